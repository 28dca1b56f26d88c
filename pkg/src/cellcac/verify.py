"""Quick invariant checks on a configured instance (``cellcac verify``)."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .config import ExperimentConfig
from .experiments import build_model, make_provider, solve_for_load
from .simulator import SimulationSettings, TablePolicy, run_simulation
from .solver import MatrixMdp, fixed_point_policy, stationary_distribution, verify_threshold
from .topology import build_hex_topology


def run_checks(cfg: ExperimentConfig, load: float | None = None, sim_horizon: float = 2000.0):
    """Return ``[(name, passed, detail)]``."""
    load = cfg.loads[0] if load is None else load
    model = build_model(cfg)
    traffic = cfg.traffic(load)
    checks = []

    solved = solve_for_load(cfg, load, model)
    traffic = solved.policy.traffic
    pa, pr = model.transition_matrices(traffic, cfg["solver.convention"])
    sums_a = np.asarray(pa.sum(axis=1)).ravel()[model.accept_feasible]
    sums_r = np.asarray(pr.sum(axis=1)).ravel()
    worst = max(np.abs(sums_a - 1).max(), np.abs(sums_r - 1).max())
    checks.append(("transition rows sum to 1", bool(worst < 1e-12), f"max error {worst:.2e}"))

    rows = np.diff(pa.indptr).max(), np.diff(pr.indptr).max()
    limit = 3 * model.num_classes + 1
    checks.append(("at most 3K+1 successors per row", bool(max(rows) <= limit),
                   f"max {max(rows)} (limit {limit})"))

    mdp = MatrixMdp.from_model(model, traffic, cfg.scheme, cfg["solver.convention"],
                               cfg["solver.carriage"])
    chain, _ = mdp.induced(solved.policy.accept)
    pi = stationary_distribution(chain)
    resid = float(np.abs(chain.T @ pi - pi).sum())
    checks.append(("stationary residual < 1e-8", resid < 1e-8, f"{resid:.2e}"))

    again = fixed_point_policy(model, traffic, cfg.scheme, cfg.solver_config(), solved.calls)
    checks.append(("fixed point restart converges in one iteration", again.iterations == 1,
                   f"{again.iterations} iteration(s)"))

    reports = verify_threshold(solved.policy)
    monotone = [k for k, r in reports.items() if r.monotone]
    detail = ", ".join(f"{k}:{'T=' + str(r.threshold) if r.monotone else 'not monotone'}"
                       for k, r in reports.items())
    checks.append(("threshold structure (informational for K>1)",
                   len(monotone) == len(reports) or model.num_classes > 1, detail))

    topo = build_hex_topology(cfg["simulation.rings"])
    provider = TablePolicy(solved.policy)
    settings = SimulationSettings(sim_horizon, 0.0, cfg["simulation.seed"])
    args = (topo, provider, traffic, cfg.classes(), cfg["traffic.total_channels"], cfg.scheme)
    m1 = run_simulation(*args, settings)
    m2 = run_simulation(*args, settings)
    same = (m1.utility_raw == m2.utility_raw and m1.events_simulated == m2.events_simulated
            and np.array_equal(m1.dropped, m2.dropped) and np.array_equal(m1.blocked, m2.blocked))
    checks.append(("simulation is deterministic", same, f"{m1.events_simulated} events"))

    lhs = m1.new_arrivals
    rhs = m1.blocked + m1.completions + m1.dropped + m1.active_at_end
    checks.append(("per-class call conservation", bool(np.array_equal(lhs, rhs)),
                   f"arrivals {lhs.tolist()} vs accounted {rhs.tolist()}"))
    return checks
