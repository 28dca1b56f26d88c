"""Plain-text policy tables.

Layout::

    # cellcac-policy v1; K=2; N=100; b=1,4; R=1.0:-0.1:-8.0|4.0:-0.4:-32.0; c=...; ...
    x1,x2,event,action
    0,0,n,reject
    ...

Rows follow the canonical state order.  Floats are written with ``repr`` so
that reading a file back reproduces every number bit for bit.
"""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .model import AdmissionModel, CallEvent, PricingScheme, QosClassSpec, TrafficModel
from .solver import Policy

MAGIC = "# cellcac-policy v1"


def _floats(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def _parse_floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",")) if text else ()


def dumps_policy(policy: Policy) -> str:
    model = policy.model
    fields = [
        MAGIC,
        f"K={model.num_classes}",
        f"N={model.total_channels}",
        "b=" + ",".join(str(int(b)) for b in model.bandwidths),
        "R=" + "|".join(f"{float(c.reward_carry)!r}:{float(c.reward_block)!r}:{float(c.reward_drop)!r}"
                        for c in model.classes),
        "names=" + ",".join(c.name for c in model.classes),
    ]
    tr = policy.traffic
    if tr is not None:
        fields += [
            "c=" + _floats(tr.expected_neighbor_calls),
            f"lambda={float(tr.arrival_rate)!r}",
            "mix=" + _floats(tr.class_mix),
            f"mu={float(tr.holding_rate)!r}",
            f"handoff={float(tr.handoff_rate_per_call)!r}",
            "departure=" + ("-" if tr.departure_rates is None else _floats(tr.departure_rates)),
        ]
    if policy.scheme is not None:
        fields.append(f"scheme={PricingScheme(policy.scheme).value}")
    if policy.gain is not None:
        fields.append(f"gain={float(policy.gain)!r}")
    out = io.StringIO()
    out.write("; ".join(fields) + "\n")
    out.write(",".join(f"x{i + 1}" for i in range(model.num_classes)) + ",event,action\n")
    for s, a in zip(model.states, policy.accept):
        out.write(",".join(str(x) for x in s.occupancy))
        out.write(f",{s.event.code},{'accept' if a else 'reject'}\n")
    return out.getvalue()


def save_policy(policy: Policy, path) -> Path:
    path = Path(path)
    path.write_text(dumps_policy(policy))
    return path


def loads_policy(text: str) -> Policy:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(MAGIC):
        raise ValueError("not a cellcac policy file (bad header)")
    meta = {}
    for part in lines[0][len(MAGIC):].split(";"):
        part = part.strip()
        if part:
            key, _, value = part.partition("=")
            meta[key] = value
    K = int(meta["K"])
    bws = [int(v) for v in meta["b"].split(",")]
    names = meta.get("names", "").split(",") if meta.get("names") else [""] * K
    classes = []
    for b, triple, name in zip(bws, meta["R"].split("|"), names):
        carry, blk, drp = (float(v) for v in triple.split(":"))
        classes.append(QosClassSpec(b, carry, blk, drp, name))
    if len(classes) != K:
        raise ValueError("header class count does not match K")
    model = AdmissionModel(classes, int(meta["N"]))
    traffic = None
    if "lambda" in meta:
        dep = None if meta.get("departure", "-") == "-" else _parse_floats(meta["departure"])
        traffic = TrafficModel(float(meta["lambda"]), _parse_floats(meta["mix"]),
                               float(meta["mu"]), float(meta["handoff"]),
                               _parse_floats(meta["c"]), dep)
    rows = [ln for ln in lines[2:] if ln.strip()]
    if len(rows) != model.num_states:
        raise ValueError(f"expected {model.num_states} rows, found {len(rows)}")
    accept = np.zeros(model.num_states, dtype=bool)
    for i, (row, state) in enumerate(zip(rows, model.states)):
        parts = row.split(",")
        occ = tuple(int(v) for v in parts[:K])
        ev = CallEvent.parse(parts[K])
        if occ != state.occupancy or ev != state.event:
            raise ValueError(f"row {i + 3}: state {occ},{ev.code} out of canonical order")
        if parts[K + 1] not in ("accept", "reject"):
            raise ValueError(f"row {i + 3}: bad action {parts[K + 1]!r}")
        accept[i] = parts[K + 1] == "accept"
    scheme = PricingScheme(meta["scheme"]) if "scheme" in meta else None
    gain = float(meta["gain"]) if "gain" in meta else None
    return Policy(model, accept, traffic, scheme, gain)


def load_policy(path) -> Policy:
    return loads_policy(Path(path).read_text())
