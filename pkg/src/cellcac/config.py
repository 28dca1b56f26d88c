"""Experiment configuration files.

INI syntax (``configparser``), one section per concern.  Every key has a
default reproducing the reference scenario, so a file containing only::

    [experiment]
    schema_version = 1

is valid.  Unknown sections or keys are rejected.  Lists are comma
separated.  Units: seconds, km/h, km, bandwidth units (BU).

Offered load is measured in BU-Erlangs per cell,
load = arrival_rate * mean_holding_time * sum(mix_i * b_i).
"""
from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import (PricingScheme, QosClassSpec, TrafficModel, mobility_rho,
                    offered_load_to_arrival_rate, proportional_classes)
from .nag import NagConfig
from .solver import SolverConfig

SCHEMA_VERSION = 1
LOAD_CONVENTION = "BU-Erlangs per cell: arrival_rate * mean_holding_time * sum(mix_i * b_i)"


def _float(s):
    return float(s)


def _int(s):
    return int(s)


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s):
    return tuple(int(v) for v in s.split(",") if v.strip())


def _words(s):
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _str(s):
    return s.strip()


def _opt(parse):
    def inner(s):
        return None if s.strip().lower() in ("", "none") else parse(s)
    return inner


# section -> key -> (parser, default)
SCHEMA = {
    "experiment": {
        "schema_version": (_int, None),
        "name": (_str, "experiment"),
    },
    "classes": {
        "bandwidth": (_ints, (1, 4)),
        "names": (_words, ("data", "video")),
        "r_db": (_floats, (80.0, 80.0)),
        "carry_per_bu": (_float, 1.0),
        "block_fraction": (_float, 0.1),
        "carry_reward": (_opt(_floats), None),
        "block_reward": (_opt(_floats), None),
        "drop_reward": (_opt(_floats), None),
    },
    "traffic": {
        "total_channels": (_int, 100),
        "arrival_rate": (_opt(_float), None),
        "offered_loads": (_floats, (100.0, 200.0, 300.0)),
        "class_mix": (_floats, (0.5, 0.5)),
        "mean_holding_time": (_float, 120.0),
        "speed_kmh": (_float, 50.0),
        "cell_radius_km": (_float, 1.0),
        "departure_mode": (_str, "cell"),
    },
    "pricing": {
        "scheme": (_str, "flat"),
    },
    "solver": {
        "criterion": (_str, "average"),
        "discount": (_float, 0.99),
        "epsilon": (_float, 1e-6),
        "max_sweeps": (_int, 200_000),
        "aperiodicity": (_float, 0.9),
        "fixed_point_tolerance": (_float, 0.01),
        "fixed_point_damping": (_float, 0.5),
        "max_fixed_point_iters": (_int, 100),
        "convention": (_str, "post"),
        "carriage": (_str, "epoch"),
        "occupancy_weighting": (_str, "time"),
        "initial_calls": (_opt(_floats), None),
        "method": (_str, "fixed_point"),
    },
    "nag": {
        "alpha": (_float, 0.01),
        "t_est": (_float, 5.0),
        "use_second_ring": (_bool, True),
    },
    "simulation": {
        "rings": (_int, 2),
        "horizon": (_float, 20_000.0),
        "warmup": (_opt(_float), None),
        "replications": (_int, 10),
        "seed": (_int, 1),
        "allow_self_reinjection": (_bool, True),
    },
    "output": {
        "dir": (_str, "results"),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict
    source: str = "<string>"

    def __getitem__(self, dotted: str):
        return self.values[dotted]

    def get(self, section: str, key: str):
        return self.values[f"{section}.{key}"]

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with ``section__key=value`` overrides, re-validated."""
        vals = dict(self.values)
        for k, v in overrides.items():
            dotted = k.replace("__", ".", 1)
            if dotted not in vals:
                raise ConfigError(f"unknown field {dotted}", field=dotted)
            vals[dotted] = v
        _validate(vals)
        return ExperimentConfig(vals, self.source)

    # derived objects ---------------------------------------------------

    @property
    def num_classes(self) -> int:
        return len(self["classes.bandwidth"])

    @property
    def holding_rate(self) -> float:
        return 1.0 / self["traffic.mean_holding_time"]

    @property
    def rho(self) -> float:
        return mobility_rho(self["traffic.speed_kmh"], self.holding_rate,
                            self["traffic.cell_radius_km"])

    @property
    def scheme(self) -> PricingScheme:
        return PricingScheme(self["pricing.scheme"])

    @property
    def loads(self) -> tuple:
        """Load points to run; a fixed arrival rate gives a single point."""
        if self["traffic.arrival_rate"] is not None:
            return (self.load_of(self["traffic.arrival_rate"]),)
        return self["traffic.offered_loads"]

    def load_of(self, arrival_rate: float) -> float:
        mean_bw = sum(m * b for m, b in zip(self["traffic.class_mix"], self["classes.bandwidth"]))
        return arrival_rate * self["traffic.mean_holding_time"] * mean_bw

    def arrival_rate_for(self, load: float) -> float:
        if self["traffic.arrival_rate"] is not None:
            return self["traffic.arrival_rate"]
        return offered_load_to_arrival_rate(load, self.holding_rate, self["traffic.class_mix"],
                                            self["classes.bandwidth"])

    def classes(self) -> list[QosClassSpec]:
        bws = self["classes.bandwidth"]
        names = self["classes.names"]
        base = proportional_classes(bws, self["classes.r_db"], self["classes.carry_per_bu"],
                                    self["classes.block_fraction"], list(names))
        out = []
        for i, c in enumerate(base):
            carry = self["classes.carry_reward"][i] if self["classes.carry_reward"] else c.reward_carry
            block = (self["classes.block_reward"][i] if self["classes.block_reward"]
                     else -self["classes.block_fraction"] * carry)
            drop = (self["classes.drop_reward"][i] if self["classes.drop_reward"]
                    else self["classes.r_db"][i] * block)
            out.append(QosClassSpec(c.bandwidth, carry, block, drop, c.name))
        return out

    def traffic(self, load: float) -> TrafficModel:
        mu = self.holding_rate
        rho = self.rho
        dep = None
        if self["traffic.departure_mode"] == "cell":
            dep = (mu * (1.0 + rho),) * self.num_classes
        return TrafficModel(self.arrival_rate_for(load), self["traffic.class_mix"], mu,
                            rho * mu, (), dep)

    def solver_config(self) -> SolverConfig:
        keys = ("criterion", "discount", "epsilon", "max_sweeps", "aperiodicity",
                "fixed_point_tolerance", "fixed_point_damping", "max_fixed_point_iters",
                "convention", "carriage", "occupancy_weighting")
        return SolverConfig(**{k: self[f"solver.{k}"] for k in keys})

    def nag_config(self) -> NagConfig:
        return NagConfig(self["nag.alpha"], self["nag.t_est"])

    @property
    def warmup(self) -> float:
        w = self["simulation.warmup"]
        return 0.1 * self["simulation.horizon"] if w is None else w

    def echo(self) -> list[tuple[str, str]]:
        """Every effective parameter plus derived quantities, in fixed order."""
        items = [(k, _fmt(v)) for k, v in self.values.items()]
        items.append(("derived.load_convention", LOAD_CONVENTION))
        items.append(("derived.rho", repr(self.rho)))
        items.append(("derived.handoff_rate_per_call", repr(self.rho * self.holding_rate)))
        items.append(("derived.warmup", repr(self.warmup)))
        for load in self.loads:
            items.append((f"derived.arrival_rate@{_fmt(load)}", repr(self.arrival_rate_for(load))))
        return items


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _fail(field, msg, line=None):
    where = f" (line {line})" if line else ""
    raise ConfigError(f"{field}: {msg}{where}", field=field, line=line)


def _validate(v: dict):
    if v["experiment.schema_version"] is None:
        _fail("experiment.schema_version", "is required")
    if v["experiment.schema_version"] != SCHEMA_VERSION:
        _fail("experiment.schema_version", f"must be {SCHEMA_VERSION}")
    K = len(v["classes.bandwidth"])
    if K < 1:
        _fail("classes.bandwidth", "needs at least one class")
    if any(b < 1 for b in v["classes.bandwidth"]):
        _fail("classes.bandwidth", "entries must be positive integers")
    for key in ("classes.names", "classes.r_db", "traffic.class_mix"):
        if len(v[key]) != K:
            _fail(key, f"must have {K} entries (one per class)")
    for key in ("classes.carry_reward", "classes.block_reward", "classes.drop_reward"):
        if v[key] is not None and len(v[key]) != K:
            _fail(key, f"must have {K} entries (one per class)")
    if any(re.search(r"[,;|:=\s]", n) for n in v["classes.names"]):
        _fail("classes.names", "names may not contain , ; | : = or whitespace")
    if any(r < 0 for r in v["classes.r_db"]):
        _fail("classes.r_db", "must be >= 0")
    if not v["classes.carry_per_bu"] > 0:
        _fail("classes.carry_per_bu", "must be > 0")
    if not v["classes.block_fraction"] >= 0:
        _fail("classes.block_fraction", "must be >= 0")
    if v["classes.carry_reward"] is not None and any(r <= 0 for r in v["classes.carry_reward"]):
        _fail("classes.carry_reward", "must be > 0")
    for key in ("classes.block_reward", "classes.drop_reward"):
        if v[key] is not None and any(r > 0 for r in v[key]):
            _fail(key, "penalties must be <= 0")
    if v["traffic.total_channels"] < 1:
        _fail("traffic.total_channels", "must be >= 1")
    if all(b > v["traffic.total_channels"] for b in v["classes.bandwidth"]):
        _fail("classes.bandwidth", "no class fits in traffic.total_channels")
    lam = v["traffic.arrival_rate"]
    if lam is not None and not (lam >= 0 and math.isfinite(lam)):
        _fail("traffic.arrival_rate", "must be finite and >= 0")
    if lam is None and (not v["traffic.offered_loads"] or any(l < 0 for l in v["traffic.offered_loads"])):
        _fail("traffic.offered_loads", "must be a non-empty list of values >= 0")
    mix = v["traffic.class_mix"]
    if any(m < 0 for m in mix) or abs(sum(mix) - 1) > 1e-9:
        _fail("traffic.class_mix", "must be non-negative and sum to 1")
    for key in ("traffic.mean_holding_time", "traffic.cell_radius_km"):
        if not v[key] > 0:
            _fail(key, "must be > 0")
    if not v["traffic.speed_kmh"] >= 0:
        _fail("traffic.speed_kmh", "must be >= 0")
    if v["traffic.departure_mode"] not in ("cell", "call"):
        _fail("traffic.departure_mode", "must be 'cell' or 'call'")
    if v["pricing.scheme"] not in ("flat", "linear"):
        _fail("pricing.scheme", "must be 'flat' or 'linear'")
    if v["solver.criterion"] not in ("average", "discounted"):
        _fail("solver.criterion", "must be 'average' or 'discounted'")
    if v["solver.criterion"] == "discounted" and not 0 < v["solver.discount"] < 1:
        _fail("solver.discount", "must lie in (0, 1)")
    if not v["solver.epsilon"] > 0:
        _fail("solver.epsilon", "must be > 0")
    if v["solver.max_sweeps"] < 1:
        _fail("solver.max_sweeps", "must be >= 1")
    if not 0 < v["solver.aperiodicity"] <= 1:
        _fail("solver.aperiodicity", "must lie in (0, 1]")
    if not v["solver.fixed_point_tolerance"] > 0:
        _fail("solver.fixed_point_tolerance", "must be > 0")
    if not 0 < v["solver.fixed_point_damping"] <= 1:
        _fail("solver.fixed_point_damping", "must lie in (0, 1]")
    if v["solver.max_fixed_point_iters"] < 1:
        _fail("solver.max_fixed_point_iters", "must be >= 1")
    if v["solver.convention"] not in ("post", "literal"):
        _fail("solver.convention", "must be 'post' or 'literal'")
    if v["solver.carriage"] not in ("epoch", "duration"):
        _fail("solver.carriage", "must be 'epoch' or 'duration'")
    if v["solver.occupancy_weighting"] not in ("time", "epoch"):
        _fail("solver.occupancy_weighting", "must be 'time' or 'epoch'")
    ic = v["solver.initial_calls"]
    if ic is not None and (len(ic) != K or any(c < 0 for c in ic)):
        _fail("solver.initial_calls", f"must have {K} non-negative entries")
    if v["solver.method"] not in ("fixed_point", "bisection"):
        _fail("solver.method", "must be 'fixed_point' or 'bisection'")
    if v["solver.method"] == "bisection" and K != 1:
        _fail("solver.method", "bisection needs exactly one class")
    if not 0 < v["nag.alpha"] < 1:
        _fail("nag.alpha", "must lie in (0, 1)")
    if not v["nag.t_est"] > 0:
        _fail("nag.t_est", "must be > 0")
    if v["simulation.rings"] < 0:
        _fail("simulation.rings", "must be >= 0")
    h = v["simulation.horizon"]
    w = v["simulation.warmup"]
    if not h > 0:
        _fail("simulation.horizon", "must be > 0")
    if w is not None and not 0 <= w < h:
        _fail("simulation.warmup", "must satisfy 0 <= warmup < horizon")
    if v["simulation.replications"] < 1:
        _fail("simulation.replications", "must be >= 1")
    if v["simulation.seed"] < 0:
        _fail("simulation.seed", "must be >= 0")


def _line_of(text: str, section: str, key: str | None = None):
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[(.+)\]", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return no
        elif key is not None and current == section and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return no
    return None


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    """Parse and validate config text; defaults fill every missing key."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        if line is None and getattr(exc, "errors", None):
            line = exc.errors[0][0]
        msg = str(exc).splitlines()[0]
        raise ConfigError(f"{source}: parse error at line {line}: {msg}", line=line) from exc
    values = {}
    for section, keys in SCHEMA.items():
        for key, (_, default) in keys.items():
            values[f"{section}.{key}"] = default
    for section in cp.sections():
        if section not in SCHEMA:
            _fail(section, "unknown section", _line_of(text, section))
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                _fail(f"{section}.{key}", "unknown key", _line_of(text, section, key))
            parse = SCHEMA[section][key][0]
            try:
                values[f"{section}.{key}"] = parse(raw)
            except ValueError as exc:
                _fail(f"{section}.{key}", f"cannot parse {raw!r} ({exc})",
                      _line_of(text, section, key))
    _validate(values)
    return ExperimentConfig(values, source)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))
