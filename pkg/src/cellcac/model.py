"""Single-cell admission-control MDP.

A state is the per-class call count of one cell plus the call event that
is happening right now.  Transition probabilities come from competing
exponential clocks: new arrivals, handoff arrivals fed by the expected
occupancy of the neighbouring cells, and departures.

Class indices are 0-based internally; event codes written to files use
1-based class numbers (``r1``, ``h2``, ``d1``, ``n``).
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy import sparse

from .errors import DegenerateModelError, InfeasibleActionError

NEW = "r"
HANDOFF = "h"
DEPART = "d"
NONE = "n"

_KIND_CODE = {NONE: 0, NEW: 1, HANDOFF: 2, DEPART: 3}

CONVENTIONS = ("post", "literal")


class CallEvent(NamedTuple):
    kind: str
    cls: int | None = None

    @property
    def code(self) -> str:
        if self.kind == NONE:
            return NONE
        return f"{self.kind}{self.cls + 1}"

    @property
    def is_arrival(self) -> bool:
        return self.kind in (NEW, HANDOFF)

    @classmethod
    def parse(cls, code: str) -> "CallEvent":
        code = code.strip()
        if code == NONE:
            return NO_EVENT
        kind, num = code[0], code[1:]
        if kind not in (NEW, HANDOFF, DEPART) or not num.isdigit() or int(num) < 1:
            raise ValueError(f"bad event code {code!r}")
        return cls(kind, int(num) - 1)


NO_EVENT = CallEvent(NONE)


class CellState(NamedTuple):
    occupancy: tuple
    event: CallEvent


class PricingScheme(str, enum.Enum):
    FLAT = "flat"
    LINEAR = "linear"


@dataclass(frozen=True)
class QosClassSpec:
    """Bandwidth demand and reward triple of one QoS class."""

    bandwidth: int
    reward_carry: float
    reward_block: float
    reward_drop: float
    name: str = ""

    def __post_init__(self):
        if int(self.bandwidth) != self.bandwidth or self.bandwidth < 1:
            raise ValueError(f"bandwidth must be a positive integer, got {self.bandwidth}")
        if not self.reward_carry > 0:
            raise ValueError("reward_carry must be positive")
        if self.reward_block > 0 or self.reward_drop > 0:
            raise ValueError("block and drop rewards are penalties and must be <= 0")


def proportional_classes(bandwidths=(1, 4), r_db=(80.0, 80.0), carry_per_bu=1.0,
                         block_fraction=0.1, names=None) -> list[QosClassSpec]:
    """Reward setup used in the experiments.

    Carry reward proportional to bandwidth, blocking penalty a fixed
    fraction of it, dropping penalty ``r_db`` times the blocking penalty.
    """
    if len(bandwidths) != len(r_db):
        raise ValueError("bandwidths and r_db must have the same length")
    names = names or [f"class{i + 1}" for i in range(len(bandwidths))]
    out = []
    for b, ratio, name in zip(bandwidths, r_db, names):
        carry = carry_per_bu * b
        block = -block_fraction * carry
        out.append(QosClassSpec(int(b), carry, block, ratio * block, name))
    return out


def mobility_rho(speed_kmh: float, holding_rate: float, cell_radius_km: float) -> float:
    """Ratio of the per-call handoff rate to the call completion rate.

    Uses the hexagonal-cell crossing rate for uniformly random directions:
    (3 + 2*sqrt(3)) * SP / (9 * mu * R), with SP converted to km/s.
    """
    if speed_kmh < 0 or holding_rate < 0 or cell_radius_km < 0:
        raise ValueError("speed, holding rate and radius must be non-negative")
    if holding_rate == 0 or cell_radius_km == 0:
        raise ZeroDivisionError("holding_rate and cell_radius_km must be positive")
    speed = speed_kmh / 3600.0
    return (3.0 + 2.0 * math.sqrt(3.0)) * speed / (9.0 * holding_rate * cell_radius_km)


def offered_load_to_arrival_rate(load, holding_rate, class_mix, bandwidths) -> float:
    """Per-cell new-call rate giving ``load`` BU-Erlangs."""
    mean_bw = float(np.dot(class_mix, bandwidths))
    return load * holding_rate / mean_bw


def arrival_rate_to_offered_load(arrival_rate, holding_rate, class_mix, bandwidths) -> float:
    return arrival_rate / holding_rate * float(np.dot(class_mix, bandwidths))


@dataclass(frozen=True)
class TrafficModel:
    """Rates seen by one cell.

    ``handoff_rate_per_call`` is rho*mu, the rate at which a single call
    leaves its cell; handoffs into the cell arrive at
    ``expected_neighbor_calls[i] * handoff_rate_per_call`` for class i.
    ``departure_rates`` overrides the per-class mu_i used for departures
    (defaults to ``holding_rate`` for every class).
    """

    arrival_rate: float
    class_mix: tuple
    holding_rate: float
    handoff_rate_per_call: float = 0.0
    expected_neighbor_calls: tuple = ()
    departure_rates: tuple | None = None

    def __post_init__(self):
        mix = tuple(float(m) for m in self.class_mix)
        object.__setattr__(self, "class_mix", mix)
        if not mix or any(m < 0 for m in mix) or abs(sum(mix) - 1.0) > 1e-9:
            raise ValueError(f"class_mix must be a probability vector, got {mix}")
        c = tuple(float(v) for v in self.expected_neighbor_calls) or (0.0,) * len(mix)
        object.__setattr__(self, "expected_neighbor_calls", c)
        if len(c) != len(mix):
            raise ValueError("expected_neighbor_calls must have one entry per class")
        if self.departure_rates is not None:
            dep = tuple(float(v) for v in self.departure_rates)
            object.__setattr__(self, "departure_rates", dep)
            if len(dep) != len(mix) or any(v < 0 for v in dep):
                raise ValueError("departure_rates must be non-negative, one per class")
        for name in ("arrival_rate", "holding_rate", "handoff_rate_per_call"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if any(v < 0 for v in c):
            raise ValueError("expected_neighbor_calls must be >= 0")

    @classmethod
    def from_mobility(cls, arrival_rate, class_mix, holding_rate, speed_kmh,
                      cell_radius_km=1.0, expected_neighbor_calls=()):
        rho = mobility_rho(speed_kmh, holding_rate, cell_radius_km)
        return cls(arrival_rate, tuple(class_mix), holding_rate, rho * holding_rate,
                   tuple(expected_neighbor_calls))

    @property
    def num_classes(self) -> int:
        return len(self.class_mix)

    @property
    def class_arrival_rates(self) -> np.ndarray:
        return self.arrival_rate * np.asarray(self.class_mix)

    @property
    def class_handoff_rates(self) -> np.ndarray:
        return self.handoff_rate_per_call * np.asarray(self.expected_neighbor_calls)

    @property
    def class_departure_rates(self) -> np.ndarray:
        if self.departure_rates is None:
            return np.full(self.num_classes, self.holding_rate)
        return np.asarray(self.departure_rates)

    @property
    def rho(self) -> float:
        return self.handoff_rate_per_call / self.holding_rate if self.holding_rate else 0.0

    def with_neighbor_calls(self, c) -> "TrafficModel":
        return replace(self, expected_neighbor_calls=tuple(float(v) for v in c))


def event_rate(occupancy, traffic: TrafficModel) -> float:
    """Total rate omega of the next call event with ``occupancy`` calls present."""
    x = np.asarray(occupancy, dtype=float)
    return float(np.dot(x, traffic.class_departure_rates)
                 + traffic.class_arrival_rates.sum()
                 + traffic.class_handoff_rates.sum())


def event_list(num_classes: int) -> list[CallEvent]:
    """Canonical event order: n, new arrivals, handoff arrivals, departures."""
    evs = [NO_EVENT]
    for kind in (NEW, HANDOFF, DEPART):
        evs.extend(CallEvent(kind, i) for i in range(num_classes))
    return evs


def _occupancy_vectors(bandwidths: Sequence[int], total_channels: int) -> list[tuple]:
    ranges = [range(total_channels // b + 1) for b in bandwidths]
    return [x for x in itertools.product(*ranges)
            if sum(b * xi for b, xi in zip(bandwidths, x)) <= total_channels]


def enumerate_states(classes: Sequence[QosClassSpec], total_channels: int) -> list[CellState]:
    """All states (x, event) with sum(b_i x_i) <= N, in canonical order.

    Occupancies are ordered lexicographically, events by :func:`event_list`.
    A departure of class i is only paired with occupancies where x_i >= 1.
    """
    if not classes:
        raise DegenerateModelError("at least one QoS class is required")
    if total_channels < 1:
        raise DegenerateModelError("total_channels must be >= 1")
    bws = [c.bandwidth for c in classes]
    events = event_list(len(bws))
    states = []
    for x in _occupancy_vectors(bws, total_channels):
        for ev in events:
            if ev.kind == DEPART and x[ev.cls] == 0:
                continue
            states.append(CellState(x, ev))
    return states


class AdmissionModel:
    """State space, transitions and rewards for one cell.

    The object is immutable after construction.  Transition matrices are
    rebuilt per :class:`TrafficModel` since the handoff rates change with
    the assumed neighbour occupancy.
    """

    def __init__(self, classes: Sequence[QosClassSpec], total_channels: int):
        self.classes = tuple(classes)
        self.states = tuple(enumerate_states(self.classes, total_channels))
        self.total_channels = int(total_channels)
        self.bandwidths = np.array([c.bandwidth for c in self.classes], dtype=np.int64)
        if np.all(self.bandwidths > total_channels):
            raise DegenerateModelError(
                f"no class fits in {total_channels} channels; nothing can be admitted")
        self.num_classes = len(self.classes)
        self.events = tuple(event_list(self.num_classes))
        self._event_pos = {ev: j for j, ev in enumerate(self.events)}

        occs = _occupancy_vectors(list(self.bandwidths), self.total_channels)
        self.occupancies = np.array(occs, dtype=np.int64).reshape(len(occs), self.num_classes)
        dims = tuple(int(total_channels // b) + 1 for b in self.bandwidths)
        self._occ_lookup = np.full(dims, -1, dtype=np.int64)
        self._occ_lookup[tuple(self.occupancies.T)] = np.arange(len(occs))

        self._index = {s: i for i, s in enumerate(self.states)}
        S = len(self.states)
        self.state_occ = np.empty(S, dtype=np.int64)
        self.state_kind = np.empty(S, dtype=np.int64)
        self.state_cls = np.full(S, -1, dtype=np.int64)
        self.index_table = np.full((len(occs), len(self.events)), -1, dtype=np.int64)
        for i, s in enumerate(self.states):
            o = self._occ_lookup[s.occupancy]
            self.state_occ[i] = o
            self.state_kind[i] = _KIND_CODE[s.event.kind]
            if s.event.cls is not None:
                self.state_cls[i] = s.event.cls
            self.index_table[o, self._event_pos[s.event]] = i

        self.state_x = self.occupancies[self.state_occ]
        self.state_bandwidth = self.state_x @ self.bandwidths
        arriving = (self.state_kind == 1) | (self.state_kind == 2)
        need = np.where(arriving, self.bandwidths[np.maximum(self.state_cls, 0)], 0)
        self.accept_feasible = self.state_bandwidth + need <= self.total_channels
        for arr in (self.state_occ, self.state_kind, self.state_cls, self.index_table,
                    self.state_x, self.state_bandwidth, self.accept_feasible,
                    self.occupancies, self._occ_lookup):
            arr.setflags(write=False)

    @property
    def num_states(self) -> int:
        return len(self.states)

    def index(self, state: CellState) -> int:
        try:
            return self._index[state]
        except KeyError:
            raise KeyError(f"{state} is not in the state space") from None

    def occupancy_index(self, occupancy) -> int:
        occupancy = tuple(occupancy)
        if len(occupancy) != self.num_classes or min(occupancy) < 0:
            return -1
        try:
            return int(self._occ_lookup[occupancy])
        except IndexError:
            return -1

    def fits(self, occupancy) -> bool:
        return (min(occupancy) >= 0
                and int(np.dot(occupancy, self.bandwidths)) <= self.total_channels)

    def empty_state_index(self) -> int:
        return self.index(CellState((0,) * self.num_classes, NO_EVENT))

    # single-state API -------------------------------------------------

    def post_action_occupancy(self, state: CellState, accept: bool) -> tuple:
        ev = state.event
        y = list(state.occupancy)
        if ev.kind == DEPART:
            y[ev.cls] -= 1
        elif accept and ev.is_arrival:
            y[ev.cls] += 1
            if not self.fits(y):
                raise InfeasibleActionError(
                    f"accepting {ev.code} in {state.occupancy} exceeds {self.total_channels} channels")
        return tuple(y)

    def mean_event_time(self, state: CellState, traffic: TrafficModel,
                        accept: bool | None = None, convention: str = "literal") -> float:
        """Expected time to the next event, 1/omega.

        By default omega is taken at the state's own occupancy.  Passing an
        action together with ``convention="post"`` evaluates it at the
        post-action occupancy instead.
        """
        occ = state.occupancy
        if accept is not None and convention == "post":
            occ = self.post_action_occupancy(state, accept)
        omega = event_rate(occ, traffic)
        if omega <= 0:
            raise DegenerateModelError(f"all event rates are zero at occupancy {occ}")
        return 1.0 / omega

    def transition_distribution(self, state: CellState, accept: bool, traffic: TrafficModel,
                                convention: str = "post") -> list[tuple[CellState, float]]:
        """Successor states with their probabilities.

        With ``convention="post"`` departure rates and omega use the
        occupancy after the action; ``"literal"`` uses the occupancy before
        it, and sends the mass of impossible departures to the no-event
        state.  When every rate is zero the cell stays put with event ``n``.
        """
        if convention not in CONVENTIONS:
            raise ValueError(f"unknown convention {convention!r}")
        if state not in self._index:
            raise KeyError(f"{state} is not in the state space")
        y = self.post_action_occupancy(state, accept)
        base = y if convention == "post" else state.occupancy
        lam = traffic.class_arrival_rates
        hnd = traffic.class_handoff_rates
        mu = traffic.class_departure_rates
        rates = []
        for i in range(self.num_classes):
            rates.append((CallEvent(NEW, i), lam[i]))
        for i in range(self.num_classes):
            rates.append((CallEvent(HANDOFF, i), hnd[i]))
        for i in range(self.num_classes):
            rates.append((CallEvent(DEPART, i), base[i] * mu[i]))
        omega = sum(r for _, r in rates)
        if omega <= 0:
            return [(CellState(y, NO_EVENT), 1.0)]
        out = []
        stray = 0.0
        for ev, r in rates:
            if r <= 0:
                continue
            if ev.kind == DEPART and y[ev.cls] == 0:
                stray += r / omega
                continue
            out.append((CellState(y, ev), r / omega))
        if stray > 0:
            out.append((CellState(y, NO_EVENT), stray))
        return out

    def reward(self, state: CellState, accept: bool, scheme) -> float:
        scheme = PricingScheme(scheme)
        ev = state.event
        cls = self.classes[ev.cls] if ev.cls is not None else None
        if scheme is PricingScheme.FLAT:
            if accept:
                return cls.reward_carry if ev.kind == NEW else 0.0
            if ev.kind == NEW:
                return cls.reward_block
            if ev.kind == HANDOFF:
                return cls.reward_drop
            return 0.0
        carried = sum(x * c.reward_carry for x, c in zip(state.occupancy, self.classes))
        if accept:
            return carried + (cls.reward_carry if ev.is_arrival else 0.0)
        if ev.kind == NEW:
            return carried + cls.reward_block
        if ev.kind == HANDOFF:
            return carried + cls.reward_drop
        if ev.kind == DEPART:
            return carried - cls.reward_carry
        return carried

    # vectorised API ---------------------------------------------------

    def reward_vectors(self, scheme, traffic: TrafficModel | None = None,
                       carriage: str = "epoch") -> tuple[np.ndarray, np.ndarray]:
        """Rewards of accept and reject for every state.

        ``carriage="duration"`` multiplies the linear-pricing carriage term
        by the expected epoch length 1/omega(x) (needs ``traffic``).
        """
        scheme = PricingScheme(scheme)
        carry = np.array([c.reward_carry for c in self.classes])
        block = np.array([c.reward_block for c in self.classes])
        drop = np.array([c.reward_drop for c in self.classes])
        cls = np.maximum(self.state_cls, 0)
        kind = self.state_kind
        is_new, is_ho, is_dep = kind == 1, kind == 2, kind == 3
        if scheme is PricingScheme.FLAT:
            acc = np.where(is_new, carry[cls], 0.0)
            rej = np.where(is_new, block[cls], np.where(is_ho, drop[cls], 0.0))
            return acc, rej
        carried = self.state_x @ carry
        if carriage == "duration":
            if traffic is None:
                raise ValueError("duration carriage needs a traffic model")
            omega = self.occupancy_event_rates(traffic)[self.state_occ]
            with np.errstate(divide="ignore"):
                carried = carried / omega
        elif carriage != "epoch":
            raise ValueError(f"unknown carriage mode {carriage!r}")
        acc = carried + np.where(is_new | is_ho, carry[cls], 0.0)
        rej = carried + np.select([is_new, is_ho, is_dep], [block[cls], drop[cls], -carry[cls]], 0.0)
        return acc, rej

    def occupancy_event_rates(self, traffic: TrafficModel) -> np.ndarray:
        """omega for every occupancy vector (indexed like ``occupancies``)."""
        return (self.occupancies @ traffic.class_departure_rates
                + traffic.class_arrival_rates.sum() + traffic.class_handoff_rates.sum())

    def transition_matrices(self, traffic: TrafficModel, convention: str = "post"):
        """Sparse row-stochastic matrices ``(P_accept, P_reject)``.

        Rows of ``P_accept`` where accepting is infeasible are empty; check
        ``accept_feasible`` before using them.
        """
        if convention not in CONVENTIONS:
            raise ValueError(f"unknown convention {convention!r}")
        if traffic.num_classes != self.num_classes:
            raise ValueError("traffic model and state space disagree on the number of classes")
        S, K = self.num_states, self.num_classes
        lam = traffic.class_arrival_rates
        hnd = traffic.class_handoff_rates
        mu = traffic.class_departure_rates
        x = self.state_x
        rows_all = np.arange(S)
        out = []
        for accept in (True, False):
            sigma = np.zeros((S, K), dtype=np.int64)
            dep = self.state_kind == 3
            sigma[rows_all[dep], self.state_cls[dep]] -= 1
            if accept:
                arr = ((self.state_kind == 1) | (self.state_kind == 2)) & self.accept_feasible
                sigma[rows_all[arr], self.state_cls[arr]] += 1
                rows = np.flatnonzero(self.accept_feasible)
            else:
                rows = rows_all
            y = (x + sigma)[rows]
            y_occ = self._occ_lookup[tuple(y.T)]
            base = y if convention == "post" else x[rows]
            rates = np.hstack([np.broadcast_to(lam, (len(rows), K)),
                               np.broadcast_to(hnd, (len(rows), K)),
                               base * mu])
            omega = rates.sum(axis=1)
            dead = omega <= 0
            probs = np.divide(rates, omega[:, None], out=np.zeros_like(rates),
                              where=~dead[:, None])
            succ = self.index_table[y_occ][:, 1:]
            missing = succ < 0
            stray = np.where(missing, probs, 0.0).sum(axis=1) + dead
            probs[missing] = 0.0
            succ = np.where(missing, 0, succ)
            r_idx = np.concatenate([np.repeat(rows, succ.shape[1]), rows])
            c_idx = np.concatenate([succ.ravel(), self.index_table[y_occ, 0]])
            vals = np.concatenate([probs.ravel(), stray])
            keep = vals > 0
            mat = sparse.csr_matrix((vals[keep], (r_idx[keep], c_idx[keep])), shape=(S, S))
            mat.sum_duplicates()
            out.append(mat)
        return out[0], out[1]
