"""Solve / simulate / compare pipelines driven by an :class:`ExperimentConfig`."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .model import AdmissionModel
from .policy_file import load_policy, save_policy
from .simulator import (AcceptAll, NagPolicy, SimMetrics, SimulationSettings, TablePolicy,
                        run_simulation)
from .solver import (FixedPointResult, Policy, binary_search_single_class, fixed_point_policy,
                     verify_threshold)
from .topology import build_hex_topology

log = logging.getLogger(__name__)

REFERENCE_GAIN_ALPHA4 = {100.0: 0.18, 200.0: 0.55, 300.0: 1.44}
REFERENCE_GAIN_ALPHA1 = {100.0: 0.14, 200.0: 0.21, 300.0: 0.40}


def metric_columns(num_classes: int) -> list[str]:
    cols = ["seed", "load", "policy_name"]
    cols += [f"P_cb_{i + 1}" for i in range(num_classes)]
    cols += [f"P_hd_{i + 1}" for i in range(num_classes)]
    cols += ["utility_raw", "normalized_utility", "events_simulated"]
    return cols


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _map(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


# -- solving -----------------------------------------------------------------

def build_model(cfg: ExperimentConfig) -> AdmissionModel:
    return AdmissionModel(cfg.classes(), cfg["traffic.total_channels"])


def solve_for_load(cfg: ExperimentConfig, load: float, model: AdmissionModel | None = None
                   ) -> FixedPointResult:
    model = model or build_model(cfg)
    traffic = cfg.traffic(load)
    initial = cfg["solver.initial_calls"]
    if cfg["solver.method"] == "bisection":
        return binary_search_single_class(model, traffic, cfg.scheme, cfg.solver_config(), initial)
    return fixed_point_policy(model, traffic, cfg.scheme, cfg.solver_config(), initial)


def _solve_task(args):
    cfg, load = args
    return load, solve_for_load(cfg, load)


def solve_all(cfg: ExperimentConfig, loads=None, jobs: int = 1) -> dict:
    loads = tuple(loads or cfg.loads)
    return dict(_map(_solve_task, [(cfg, l) for l in loads], jobs))


def solve_report(load: float, result: FixedPointResult) -> dict:
    thresholds = verify_threshold(result.policy)
    return {
        "load": load,
        "method": result.method,
        "converged": result.converged,
        "iterations": result.iterations,
        "expected_calls": [float(c) for c in result.calls],
        "gain": result.policy.gain,
        "thresholds": {k: {"monotone": r.monotone, "threshold": r.threshold,
                           "violations": len(r.violations)} for k, r in thresholds.items()},
        "trace": [{"assumed": list(s.assumed), "induced": list(s.induced),
                   "delta": s.delta, "sweeps": s.sweeps, "note": s.note}
                  for s in result.trace],
    }


def policy_filename(load: float) -> str:
    return f"policy_load{_fmt(float(load))}.txt"


def solve_command(cfg: ExperimentConfig, out_dir, loads=None, jobs: int = 1) -> dict:
    """Solve every load point, write policy files and ``solve_report.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = solve_all(cfg, loads, jobs)
    reports = []
    for load in sorted(results):
        save_policy(results[load].policy, out / policy_filename(load))
        reports.append(solve_report(load, results[load]))
    doc = {"config": dict(cfg.echo()), "solves": reports}
    (out / "solve_report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return results


# -- simulation --------------------------------------------------------------

def make_provider(cfg: ExperimentConfig, source: str, load: float, policies: dict | None = None):
    """Provider for ``mdp``, ``mdp:PATH``, ``nag`` or ``accept-all``."""
    bws = cfg["classes.bandwidth"]
    cap = cfg["traffic.total_channels"]
    if source == "accept-all":
        return AcceptAll(bws, cap)
    if source == "nag":
        p = NagPolicy(cfg.nag_config(), cfg.traffic(load), bws, cap, cfg["nag.use_second_ring"])
        return p
    if source.startswith("mdp:"):
        return TablePolicy(load_policy(source[4:]), name="mdp")
    if source == "mdp":
        if policies is None or load not in policies:
            raise ValueError(f"no solved policy for load {load}")
        pol = policies[load]
        pol = pol.policy if isinstance(pol, FixedPointResult) else pol
        return TablePolicy(pol, name="mdp")
    raise ValueError(f"unknown policy source {source!r}")


def simulate_once(cfg: ExperimentConfig, provider, load: float, seed: int) -> SimMetrics:
    settings = SimulationSettings(cfg["simulation.horizon"], cfg.warmup, seed,
                                  cfg["simulation.allow_self_reinjection"])
    return run_simulation(build_hex_topology(cfg["simulation.rings"]), provider, cfg.traffic(load),
                          cfg.classes(), cfg["traffic.total_channels"], cfg.scheme, settings)


def metrics_row(cfg, seed, load, name, m: SimMetrics) -> dict:
    K = cfg.num_classes
    row = {"seed": seed, "load": float(load), "policy_name": name}
    for i in range(K):
        row[f"P_cb_{i + 1}"] = m.p_cb(i)
    for i in range(K):
        row[f"P_hd_{i + 1}"] = m.p_hd(i)
    row["utility_raw"] = float(m.utility_raw)
    row["normalized_utility"] = float(m.normalized_utility)
    row["events_simulated"] = int(m.events_simulated)
    row["_P_cb"] = m.p_cb()
    row["_P_hd"] = m.p_hd()
    return row


def _sim_task(args):
    cfg, source, load, seed, policy = args
    provider = make_provider(cfg, source, load, {load: policy} if policy is not None else None)
    return metrics_row(cfg, seed, load, provider.name, simulate_once(cfg, provider, load, seed))


def simulate_rows(cfg: ExperimentConfig, sources, loads=None, replications=None, seed=None,
                  policies: dict | None = None, jobs: int = 1) -> list[dict]:
    """One metrics row per (load, replication, policy), in canonical order."""
    loads = tuple(loads or cfg.loads)
    reps = replications or cfg["simulation.replications"]
    base = cfg["simulation.seed"] if seed is None else seed
    tasks = []
    for load in loads:
        for src in sources:
            pol = None
            if src == "mdp":
                pol = policies[load]
                pol = pol.policy if isinstance(pol, FixedPointResult) else pol
            for r in range(reps):
                tasks.append((cfg, src, load, base + r, pol))
    rows = _map(_sim_task, tasks, jobs)
    rows.sort(key=lambda r: (r["load"], r["policy_name"], r["seed"]))
    return rows


def _mean_se(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    mean = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else None
    return mean, se


def aggregate_rows(rows: list[dict], num_classes: int) -> list[dict]:
    cols = metric_columns(num_classes)[3:]
    groups = {}
    for r in rows:
        groups.setdefault((r["load"], r["policy_name"]), []).append(r)
    out = []
    for (load, name), grp in sorted(groups.items()):
        mean = {"seed": "mean", "load": load, "policy_name": name}
        se = {"seed": "se", "load": load, "policy_name": name}
        for c in cols:
            m, s = _mean_se([g[c] for g in grp])
            mean[c], se[c] = m, s
        out += [mean, se]
    return out


def render_csv(cfg: ExperimentConfig, columns: list[str], rows: list[dict],
               extra_header: list[tuple[str, str]] = ()) -> str:
    buf = io.StringIO()
    for k, v in list(cfg.echo()) + list(extra_header):
        buf.write(f"# {k} = {v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def simulate_command(cfg: ExperimentConfig, out_dir, sources=("mdp",), loads=None,
                     replications=None, seed=None, jobs: int = 1) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    loads = tuple(loads or cfg.loads)
    policies = solve_all(cfg, loads, jobs) if "mdp" in sources else None
    rows = simulate_rows(cfg, sources, loads, replications, seed, policies, jobs)
    rows += aggregate_rows(rows, cfg.num_classes)
    header = [("run.policies", ",".join(sources)), ("run.loads", ",".join(_fmt(float(l)) for l in loads)),
              ("run.replications", str(replications or cfg["simulation.replications"])),
              ("run.seed", str(cfg["simulation.seed"] if seed is None else seed))]
    text = render_csv(cfg, metric_columns(cfg.num_classes), rows, header)
    path = out / "metrics.csv"
    path.write_text(text)
    return path


# -- comparison --------------------------------------------------------------

def compare_columns(num_classes: int) -> list[str]:
    cols = ["load", "replications", "u_mdp", "u_nag", "utility_ratio", "utility_gain", "gain_se"]
    for name in ("mdp", "nag"):
        cols += [f"P_cb_{i + 1}_{name}" for i in range(num_classes)]
        cols += [f"P_hd_{i + 1}_{name}" for i in range(num_classes)]
        cols += [f"P_hd_{name}"]
    return cols


def compare_rows(cfg: ExperimentConfig, rows: list[dict]) -> list[dict]:
    """Per-load MDP vs NAG summary from matched-seed simulation rows."""
    K = cfg.num_classes
    out = []
    for load in sorted({r["load"] for r in rows}):
        by = {name: {r["seed"]: r for r in rows if r["load"] == load and r["policy_name"] == name}
              for name in ("mdp", "nag")}
        seeds = sorted(set(by["mdp"]) & set(by["nag"]))
        u_m = [by["mdp"][s]["normalized_utility"] for s in seeds]
        u_n = [by["nag"][s]["normalized_utility"] for s in seeds]
        um, un = float(np.mean(u_m)), float(np.mean(u_n))
        gains = [(a - b) / abs(b) for a, b in zip(u_m, u_n) if b != 0]
        row = {"load": load, "replications": len(seeds), "u_mdp": um, "u_nag": un,
               "utility_ratio": um / un if un != 0 else None,
               "utility_gain": (um - un) / abs(un) if un != 0 else None,
               "gain_se": _mean_se(gains)[1]}
        for name in ("mdp", "nag"):
            grp = [by[name][s] for s in seeds]
            for i in range(K):
                row[f"P_cb_{i + 1}_{name}"] = _mean_se([g[f"P_cb_{i + 1}"] for g in grp])[0]
                row[f"P_hd_{i + 1}_{name}"] = _mean_se([g[f"P_hd_{i + 1}"] for g in grp])[0]
            row[f"P_hd_{name}"] = _mean_se([g["_P_hd"] for g in grp])[0]
        out.append(row)
    return out


def compare_command(cfg: ExperimentConfig, out_dir, loads=None, replications=None, seed=None,
                    jobs: int = 1) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    loads = tuple(loads or cfg.loads)
    policies = solve_all(cfg, loads, jobs)
    rows = simulate_rows(cfg, ("mdp", "nag"), loads, replications, seed, policies, jobs)
    header = [("run.loads", ",".join(_fmt(float(l)) for l in loads)),
              ("run.replications", str(replications or cfg["simulation.replications"])),
              ("run.seed", str(cfg["simulation.seed"] if seed is None else seed))]
    text = render_csv(cfg, compare_columns(cfg.num_classes), compare_rows(cfg, rows), header)
    path = out / "compare.csv"
    path.write_text(text)
    (out / "compare_runs.csv").write_text(
        render_csv(cfg, metric_columns(cfg.num_classes), rows, header))
    return path
