"""Predictive admission heuristic used as the comparison baseline.

A new call is admitted only if, T_est seconds from now, the probability
that the cell (or any of its neighbours) needs more than its capacity stays
at or below alpha.  Bandwidth demand T_est ahead is a sum of independent
Bernoulli-weighted call bandwidths, approximated by a Gaussian.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .model import HANDOFF, CallEvent, TrafficModel


@dataclass(frozen=True)
class NagConfig:
    alpha: float = 0.01
    t_est: float = 5.0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.t_est > 0:
            raise ValueError("t_est must be positive")


def survival_probabilities(traffic: TrafficModel, t_est: float) -> tuple[float, float]:
    """``(p_stay, p_move)`` for one call over ``t_est`` seconds.

    p_move is the chance of handing off to one particular neighbour,
    p_stay the chance of neither handing off nor completing.
    """
    mu = traffic.holding_rate
    h = traffic.handoff_rate_per_call
    p_move = -math.expm1(-h * t_est) / 6.0
    p_stay = math.exp(-(h + mu) * t_est)
    return p_stay, p_move


def _moments(occupancy, bandwidths, p):
    m = v = 0.0
    for x, b in zip(occupancy, bandwidths):
        m += x * b
        v += x * b * b
    return m * p, v * p * (1.0 - p)


def overload_probability(cell, neighbors: Sequence, extra_bandwidth: float, traffic: TrafficModel,
                         bandwidths: Sequence[int], capacity: int, t_est: float = 5.0,
                         probs: tuple | None = None) -> float:
    """P(demand at the cell in t_est seconds + extra > capacity)."""
    p_stay, p_move = probs if probs is not None else survival_probabilities(traffic, t_est)
    m, v = _moments(cell, bandwidths, p_stay)
    for nb in neighbors:
        dm, dv = _moments(nb, bandwidths, p_move)
        m += dm
        v += dv
    slack = capacity - extra_bandwidth - m
    if v <= 0:
        return 1.0 if slack < 0 else 0.0
    return 0.5 * math.erfc(slack / math.sqrt(2.0 * v))


def nag_admit(cell, neighbors: Sequence, incoming: CallEvent, config: NagConfig,
              traffic: TrafficModel, bandwidths: Sequence[int], capacity: int,
              second_ring: Sequence[Sequence] | None = None) -> bool:
    """Admission decision for ``incoming`` at a cell with occupancy ``cell``.

    ``neighbors`` are the occupancies of the adjacent cells and
    ``second_ring[k]`` the occupancies of neighbour k's own neighbours other
    than this cell (omit to ignore them).  Handoffs are admitted whenever
    they fit.
    """
    b = bandwidths[incoming.cls]
    used = sum(x * bw for x, bw in zip(cell, bandwidths))
    if used + b > capacity:
        return False
    if incoming.kind == HANDOFF:
        return True
    probs = survival_probabilities(traffic, config.t_est)
    if overload_probability(cell, neighbors, b, traffic, bandwidths, capacity,
                            probs=probs) > config.alpha:
        return False
    with_new = list(cell)
    with_new[incoming.cls] += 1
    for k, nb in enumerate(neighbors):
        sources = [with_new]
        if second_ring is not None:
            sources.extend(second_ring[k])
        if overload_probability(nb, sources, 0.0, traffic, bandwidths, capacity,
                                probs=probs) > config.alpha:
            return False
    return True
