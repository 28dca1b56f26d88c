"""Optimal admission policies for the single-cell MDP.

Value iteration (relative for the average-reward criterion, plain for the
discounted one), analysis of the chain a policy induces, and the outer
loop that makes the assumed neighbour occupancy consistent with the
occupancy the solved policy actually produces.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .errors import ConvergenceError, RecurrenceError
from .model import (AdmissionModel, CellState, PricingScheme, TrafficModel)

log = logging.getLogger(__name__)

AVERAGE = "average"
DISCOUNTED = "discounted"


@dataclass(frozen=True)
class SolverConfig:
    criterion: str = AVERAGE
    discount: float = 0.99
    epsilon: float = 1e-6
    max_sweeps: int = 200_000
    # self-loop weight mixed into every row for relative VI; keeps the
    # iteration convergent on periodic chains without changing the policy
    aperiodicity: float = 0.9
    fixed_point_tolerance: float = 0.01
    fixed_point_damping: float = 0.5
    max_fixed_point_iters: int = 100
    convention: str = "post"
    carriage: str = "epoch"
    occupancy_weighting: str = "time"
    stationary_tol: float = 1e-10
    stationary_max_iter: int = 2_000_000

    def __post_init__(self):
        if self.criterion not in (AVERAGE, DISCOUNTED):
            raise ValueError(f"criterion must be {AVERAGE!r} or {DISCOUNTED!r}")
        if self.criterion == DISCOUNTED and not 0 < self.discount < 1:
            raise ValueError("discount must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.aperiodicity <= 1:
            raise ValueError("aperiodicity must lie in (0, 1]")
        if not 0 < self.fixed_point_damping <= 1:
            raise ValueError("fixed_point_damping must lie in (0, 1]")
        if self.occupancy_weighting not in ("time", "epoch"):
            raise ValueError("occupancy_weighting must be 'time' or 'epoch'")


@dataclass(frozen=True, eq=False)
class Policy:
    """Accept/reject decision for every state of ``model``."""

    model: AdmissionModel
    accept: np.ndarray
    traffic: TrafficModel | None = None
    scheme: PricingScheme | None = None
    gain: float | None = None

    def __post_init__(self):
        acc = np.array(self.accept, dtype=bool)
        if acc.shape != (self.model.num_states,):
            raise ValueError(f"policy has {acc.size} entries, model has {self.model.num_states} states")
        bad = acc & ~self.model.accept_feasible
        if bad.any():
            s = self.model.states[int(np.flatnonzero(bad)[0])]
            raise ValueError(f"policy accepts infeasible state {s}")
        acc.setflags(write=False)
        object.__setattr__(self, "accept", acc)

    @classmethod
    def accept_all(cls, model, **kw):
        return cls(model, model.accept_feasible.copy(), **kw)

    @classmethod
    def reject_all(cls, model, **kw):
        return cls(model, np.zeros(model.num_states, dtype=bool), **kw)

    def action(self, state: CellState) -> bool:
        return bool(self.accept[self.model.index(state)])

    def same_actions(self, other: "Policy") -> bool:
        return (self.model.num_states == other.model.num_states
                and self.model.states == other.model.states
                and bool(np.array_equal(self.accept, other.accept)))

    @property
    def expected_neighbor_calls(self):
        return None if self.traffic is None else self.traffic.expected_neighbor_calls


@dataclass
class MatrixMdp:
    """Two-action MDP in matrix form; action 0 is reject, action 1 accept."""

    p_accept: sparse.csr_matrix
    p_reject: sparse.csr_matrix
    r_accept: np.ndarray
    r_reject: np.ndarray
    accept_feasible: np.ndarray
    reference: int = 0

    @classmethod
    def from_model(cls, model: AdmissionModel, traffic: TrafficModel, scheme,
                   convention="post", carriage="epoch"):
        pa, pr = model.transition_matrices(traffic, convention)
        ra, rr = model.reward_vectors(scheme, traffic, carriage)
        return cls(pa, pr, ra, rr, model.accept_feasible, model.empty_state_index())

    @property
    def num_states(self):
        return self.p_reject.shape[0]

    def induced(self, accept: np.ndarray):
        """Transition matrix and reward vector under a fixed policy."""
        acc = np.asarray(accept, dtype=bool)
        d = sparse.diags(acc.astype(float))
        P = (d @ self.p_accept + sparse.diags((~acc).astype(float)) @ self.p_reject).tocsr()
        r = np.where(acc, self.r_accept, self.r_reject)
        return P, r


@dataclass
class ValueIterationResult:
    values: np.ndarray
    policy_accept: np.ndarray
    gain: float | None
    sweeps: int
    residual: float
    history: list = field(default_factory=list)


def _greedy(mdp: MatrixMdp, q_acc: np.ndarray, q_rej: np.ndarray) -> np.ndarray:
    # strict comparison: reject wins exact ties
    return mdp.accept_feasible & (q_acc > q_rej)


def solve_values(mdp: MatrixMdp, config: SolverConfig, initial=None,
                 keep_history=False) -> ValueIterationResult:
    """Run value iteration on ``mdp`` and return values plus greedy policy."""
    n = mdp.num_states
    h = np.zeros(n) if initial is None else np.array(initial, dtype=float)
    infeasible = ~np.asarray(mdp.accept_feasible, dtype=bool)
    history = []
    if config.criterion == AVERAGE:
        k = config.aperiodicity
        eye = sparse.identity(n, format="csr")
        pa = (k * mdp.p_accept + (1 - k) * eye).tocsr()
        pr = (k * mdp.p_reject + (1 - k) * eye).tocsr()
        ref = mdp.reference
        h = h - h[ref]
        span = math.inf
        for sweep in range(1, config.max_sweeps + 1):
            qa = mdp.r_accept + pa @ h
            qa[infeasible] = -np.inf
            v = np.maximum(qa, mdp.r_reject + pr @ h)
            diff = v - h
            hi, lo = diff.max(), diff.min()
            span = hi - lo
            if keep_history:
                history.append(span)
            h = v - v[ref]
            if span < config.epsilon:
                break
        else:
            raise ConvergenceError(
                f"relative value iteration did not converge in {config.max_sweeps} sweeps "
                f"(span {span:.3g})", residual=span, trace=history)
        gain = float(0.5 * (hi + lo))
        qa = mdp.r_accept + pa @ h
        qa[infeasible] = -np.inf
        policy = _greedy(mdp, qa, mdp.r_reject + pr @ h)
        return ValueIterationResult(h, policy, gain, sweeps=sweep, residual=span, history=history)

    g = config.discount
    pa, pr = mdp.p_accept, mdp.p_reject
    delta = math.inf
    for sweep in range(1, config.max_sweeps + 1):
        qa = mdp.r_accept + g * (pa @ h)
        qa[infeasible] = -np.inf
        v = np.maximum(qa, mdp.r_reject + g * (pr @ h))
        delta = float(np.abs(v - h).max())
        if keep_history:
            history.append(delta)
        h = v
        if delta < config.epsilon:
            break
    else:
        raise ConvergenceError(
            f"discounted value iteration did not converge in {config.max_sweeps} sweeps "
            f"(sup-norm change {delta:.3g})", residual=delta, trace=history)
    qa = mdp.r_accept + g * (pa @ h)
    qa[infeasible] = -np.inf
    policy = _greedy(mdp, qa, mdp.r_reject + g * (pr @ h))
    return ValueIterationResult(h, policy, None, sweeps=sweep, residual=delta, history=history)


def greedy_policy(mdp: MatrixMdp, values: np.ndarray, config: SolverConfig) -> np.ndarray:
    """Policy that is greedy with respect to ``values``."""
    if config.criterion == AVERAGE:
        k = config.aperiodicity
        qa = mdp.r_accept + k * (mdp.p_accept @ values) + (1 - k) * values
        qr = mdp.r_reject + k * (mdp.p_reject @ values) + (1 - k) * values
    else:
        qa = mdp.r_accept + config.discount * (mdp.p_accept @ values)
        qr = mdp.r_reject + config.discount * (mdp.p_reject @ values)
    qa = np.where(mdp.accept_feasible, qa, -np.inf)
    return _greedy(mdp, qa, qr)


def value_iteration(model: AdmissionModel, traffic: TrafficModel, scheme,
                    config: SolverConfig = SolverConfig(), initial=None):
    """Solve the MDP at fixed handoff rates.

    Returns ``(values, policy)``; the average-reward gain is stored on the
    policy.
    """
    mdp = MatrixMdp.from_model(model, traffic, scheme, config.convention, config.carriage)
    res = solve_values(mdp, config, initial)
    return res.values, Policy(model, res.policy_accept, traffic, PricingScheme(scheme), res.gain)


# -- induced chain -------------------------------------------------------

def induced_chain(model: AdmissionModel, policy: Policy, traffic: TrafficModel | None = None,
                  convention: str = "post") -> sparse.csr_matrix:
    """Row-stochastic transition matrix of the chain ``policy`` induces."""
    traffic = traffic or policy.traffic
    if traffic is None:
        raise ValueError("a traffic model is needed to build the chain")
    pa, pr = model.transition_matrices(traffic, convention)
    acc = policy.accept.astype(float)
    return (sparse.diags(acc) @ pa + sparse.diags(1.0 - acc) @ pr).tocsr()


def recurrent_classes(chain) -> list[np.ndarray]:
    """Closed communicating classes of ``chain``, each as an index array."""
    chain = sparse.csr_matrix(chain)
    n_comp, labels = csgraph.connected_components(chain, directed=True, connection="strong")
    coo = chain.tocoo()
    mask = coo.data > 0
    src, dst = labels[coo.row[mask]], labels[coo.col[mask]]
    leaking = np.zeros(n_comp, dtype=bool)
    leaking[src[src != dst]] = True
    return [np.flatnonzero(labels == k) for k in range(n_comp) if not leaking[k]]


def stationary_distribution(chain, tol: float = 1e-10, max_iter: int = 2_000_000,
                            initial=None) -> np.ndarray:
    """Stationary distribution by power iteration on the lazy chain (I+P)/2.

    Requires exactly one recurrent class; transient states get zero mass.
    """
    chain = sparse.csr_matrix(chain, dtype=float)
    n = chain.shape[0]
    classes = recurrent_classes(chain)
    if len(classes) != 1:
        raise RecurrenceError(f"chain has {len(classes)} recurrent classes, expected exactly one")
    rec = classes[0]
    sub_t = chain[rec][:, rec].T.tocsr()
    if initial is not None:
        pi = np.asarray(initial, dtype=float)[rec].copy()
        if pi.sum() <= 0:
            pi = np.full(len(rec), 1.0 / len(rec))
        pi /= pi.sum()
    else:
        pi = np.full(len(rec), 1.0 / len(rec))
    change = math.inf
    for _ in range(max_iter):
        nxt = 0.5 * (pi + sub_t @ pi)
        nxt /= nxt.sum()
        change = float(np.abs(nxt - pi).sum())
        pi = nxt
        if change < tol:
            break
    else:
        raise ConvergenceError(f"power iteration did not converge (last change {change:.3g})",
                               residual=change)
    full = np.zeros(n)
    full[rec] = pi
    residual = float(np.abs(chain.T @ full - full).sum())
    if residual >= 1e-8:
        raise ConvergenceError(f"stationary residual {residual:.3g} exceeds 1e-8", residual=residual)
    return full


def expected_calls(distribution, model: AdmissionModel) -> np.ndarray:
    """Mean number of calls of each class under ``distribution``."""
    return np.asarray(distribution, dtype=float) @ model.state_x


def time_weighted(distribution, model: AdmissionModel, traffic: TrafficModel) -> np.ndarray:
    """Convert an event-epoch distribution into a time-average one.

    The occupancy a state carries was held during the sojourn that ended at
    that epoch, whose mean length is 1/omega(x).
    """
    pi = np.asarray(distribution, dtype=float)
    omega = model.occupancy_event_rates(traffic)[model.state_occ]
    stuck = (omega <= 0) & (pi > 0)
    if stuck.any():
        w = np.where(stuck, pi, 0.0)
    else:
        w = np.divide(pi, omega, out=np.zeros_like(pi), where=omega > 0)
    return w / w.sum()


def occupancy_marginal(distribution, model: AdmissionModel) -> np.ndarray:
    """Collapse a state distribution onto occupancy vectors."""
    return np.bincount(model.state_occ, weights=np.asarray(distribution, dtype=float),
                       minlength=len(model.occupancies))


# -- fixed point over neighbour occupancy --------------------------------

@dataclass
class FixedPointStep:
    iteration: int
    assumed: tuple
    induced: tuple
    next: tuple
    delta: float
    gain: float | None
    sweeps: int
    note: str = ""


@dataclass
class FixedPointResult:
    policy: Policy
    calls: np.ndarray
    trace: list
    converged: bool = True
    method: str = "fixed_point"

    @property
    def iterations(self):
        return len(self.trace)


def default_initial_calls(model: AdmissionModel, traffic: TrafficModel) -> np.ndarray:
    """Half the capacity, split across classes by the class mix, in calls."""
    if traffic.arrival_rate == 0:
        return np.zeros(model.num_classes)
    mix = np.asarray(traffic.class_mix)
    return 0.5 * model.total_channels * mix / model.bandwidths


class _Evaluator:
    """Solve at a given c and measure the occupancy the policy induces."""

    def __init__(self, model, traffic, scheme, config):
        self.model, self.traffic, self.config = model, traffic, config
        self.scheme = PricingScheme(scheme)
        self._values = None
        self._pi = None

    def __call__(self, c):
        traffic = self.traffic.with_neighbor_calls(c)
        mdp = MatrixMdp.from_model(self.model, traffic, self.scheme,
                                   self.config.convention, self.config.carriage)
        res = solve_values(mdp, self.config, self._values)
        self._values = res.values
        chain, _ = mdp.induced(res.policy_accept)
        pi = stationary_distribution(chain, self.config.stationary_tol,
                                     self.config.stationary_max_iter, initial=self._pi)
        self._pi = pi
        if self.config.occupancy_weighting == "time":
            pi = time_weighted(pi, self.model, traffic)
        induced = expected_calls(pi, self.model)
        policy = Policy(self.model, res.policy_accept, traffic, self.scheme, res.gain)
        return policy, induced, res


def fixed_point_policy(model: AdmissionModel, traffic: TrafficModel, scheme,
                       config: SolverConfig = SolverConfig(), initial_calls=None) -> FixedPointResult:
    """Iterate c -> optimal policy -> induced mean occupancy c' with damping.

    ``traffic.expected_neighbor_calls`` is ignored; the starting point is
    ``initial_calls`` or :func:`default_initial_calls`.  The result is a
    local fixed point only.
    """
    if traffic.arrival_rate == 0:
        c = np.zeros(model.num_classes)
    elif initial_calls is not None:
        c = np.asarray(initial_calls, dtype=float)
    else:
        c = default_initial_calls(model, traffic)
    evaluate = _Evaluator(model, traffic, scheme, config)
    d = config.fixed_point_damping
    trace = []
    for k in range(config.max_fixed_point_iters):
        policy, induced, res = evaluate(c)
        nxt = (1 - d) * c + d * induced
        delta = float(np.abs(nxt - c).max())
        trace.append(FixedPointStep(k, tuple(c), tuple(induced), tuple(nxt), delta,
                                    res.gain, res.sweeps))
        log.debug("fixed point %d: c=%s c'=%s delta=%.4g", k, c, induced, delta)
        if delta < config.fixed_point_tolerance:
            return FixedPointResult(policy, c, trace)
        c = nxt
    raise ConvergenceError(
        f"fixed point not reached in {config.max_fixed_point_iters} iterations "
        f"(last change {trace[-1].delta:.3g})", residual=trace[-1].delta, trace=trace)


def binary_search_single_class(model: AdmissionModel, traffic: TrafficModel, scheme,
                               config: SolverConfig = SolverConfig(),
                               initial_calls=None) -> FixedPointResult:
    """Bisection on g(c) = c'(c) - c for a single QoS class.

    g(0) >= 0 and g(N/b) <= 0 always hold, so [0, N/b] is a valid bracket.
    The first guess c0 and its image c0' narrow it when the image of c0'
    lands on the predicted side.  Otherwise a warning goes into the trace
    and the damped fixed-point iteration takes over; if that cycles, the
    search bisects the structural bracket instead.  Because c' jumps
    where the optimal policy changes, the search may end at a
    discontinuity rather than a root; the final trace step records that.
    """
    if model.num_classes != 1:
        raise ValueError("binary search needs exactly one QoS class")
    evaluate = _Evaluator(model, traffic, scheme, config)
    trace = []
    tol = config.fixed_point_tolerance

    def step(c, note=""):
        policy, induced, res = evaluate(np.array([c]))
        trace.append(FixedPointStep(len(trace), (c,), tuple(induced), (c,),
                                    abs(induced[0] - c), res.gain, res.sweeps, note))
        return policy, float(induced[0])

    if traffic.arrival_rate == 0:
        policy, _ = step(0.0)
        return FixedPointResult(policy, np.array([0.0]), trace, method="bisection")
    lo, hi = 0.0, model.total_channels / float(model.bandwidths[0])
    c0 = float(initial_calls[0]) if initial_calls is not None else float(
        default_initial_calls(model, traffic)[0])
    c0 = min(max(c0, lo), hi)
    policy, c0p = step(c0, "initial guess")
    if abs(c0p - c0) < tol:
        return FixedPointResult(policy, np.array([c0]), trace, method="bisection")
    if c0p > c0:
        lo = c0
    else:
        hi = c0
    _, c1p = step(c0p, "bracket check")
    if (c1p - c0p) * (c0p - c0) > 0:
        trace[-1].note = "monotonicity violated: image of c0' on the wrong side; falling back"
        log.warning("bisection bracket invalid (c0=%.4g, c0'=%.4g, c0''=%.4g); "
                    "using damped fixed-point iteration", c0, c0p, c1p)
        try:
            res = fixed_point_policy(model, traffic, scheme, config,
                                     initial_calls=[0.5 * (c0 + c0p)])
            return FixedPointResult(res.policy, res.calls, trace + res.trace,
                                    method="bisection+fixed_point")
        except ConvergenceError as exc:
            trace.extend(exc.trace)
            trace[-1].note = "damped iteration did not settle; bisecting on [0, N/b]"
            log.warning("fixed-point fallback failed; bisecting on the full bracket")
    elif c0p > c0:
        hi = c0p
    else:
        lo = c0p
    max_steps = math.ceil(math.log2(max(hi - lo, tol) / tol)) + 1
    for _ in range(max_steps):
        if hi - lo < tol:
            break
        mid = 0.5 * (lo + hi)
        _, mp = step(mid, f"bracket [{lo:.6g}, {hi:.6g}]")
        if mp > mid:
            lo = mid
        else:
            hi = mid
    c_star = 0.5 * (lo + hi)
    policy, image = step(c_star, "final")
    if abs(image - c_star) >= tol:
        trace[-1].note = "final (sign change at a policy switch, no exact root)"
    return FixedPointResult(policy, np.array([c_star]), trace, method="bisection")


# -- threshold structure -------------------------------------------------

@dataclass
class ThresholdReport:
    event: str
    monotone: bool
    threshold: int | None
    violations: list


def verify_threshold(policy: Policy, model: AdmissionModel | None = None,
                     max_violations: int = 20) -> dict[str, ThresholdReport]:
    """Check that each arrival type is accepted on a downward-closed set of
    occupied bandwidth.

    For a monotone event type the reported threshold T means: accept iff
    occupied + b_i <= T (T = N when every feasible arrival is accepted,
    0 when none is).
    """
    model = model or policy.model
    out = {}
    for ev in model.events:
        if not ev.is_arrival:
            continue
        idx = np.array([i for i, s in enumerate(model.states) if s.event == ev])
        idx = idx[model.accept_feasible[idx]]
        bw = model.state_bandwidth[idx]
        acc = policy.accept[idx]
        acc_bw, rej_bw = bw[acc], bw[~acc]
        violations = []
        monotone = True
        if acc_bw.size and rej_bw.size and rej_bw.min() <= acc_bw.max():
            monotone = False
            for a in idx[acc]:
                for r in idx[~acc]:
                    if model.state_bandwidth[r] <= model.state_bandwidth[a]:
                        violations.append((model.states[a], model.states[r]))
                        if len(violations) >= max_violations:
                            break
                if len(violations) >= max_violations:
                    break
        if not monotone:
            threshold = None
        elif not rej_bw.size:
            threshold = model.total_channels
        elif not acc_bw.size:
            threshold = 0
        else:
            threshold = int(acc_bw.max() + model.bandwidths[ev.cls])
        out[ev.code] = ThresholdReport(ev.code, monotone, threshold, violations)
    return out
