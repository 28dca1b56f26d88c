"""Event-driven simulation of admission control on a hexagonal network.

Each cell receives Poisson new-call arrivals.  An admitted call lives for
an exponential holding time and, while alive, leaves its cell after an
exponential dwell time for a uniformly chosen neighbour.  Calls that walk
off the edge re-enter at a boundary cell picked in proportion to its
missing neighbours.

Random numbers come from one substream per (cell, purpose), so the new-call
trace (times, classes, holding times) does not depend on any admission
decision.  That is what lets the infinite-capacity reference utility be
computed from the very same trace.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvariantViolation
from .model import (DEPART, HANDOFF, NEW, AdmissionModel, CallEvent, PricingScheme,
                    QosClassSpec, TrafficModel)
from .nag import NagConfig, nag_admit
from .topology import HexTopology, reinjection_weights

ARRIVAL_STREAM, DWELL_STREAM, DIRECTION_STREAM, REINJECT_STREAM = range(4)

_ARRIVAL, _END, _HANDOFF = 0, 1, 2


# -- admission policies ----------------------------------------------------

class PolicyProvider:
    """Admission decision interface used by the simulator.

    ``decide`` gets the cell's occupancy tuple, the occupancies of its
    neighbours, the incoming event and, when ``needs_view`` is set, a
    :class:`NetworkView` for anything further away.
    """

    name = "provider"
    needs_neighbors = False
    needs_view = False

    def decide(self, occupancy, neighbors, event: CallEvent, view=None) -> bool:
        raise NotImplementedError


class AcceptAll(PolicyProvider):
    """Admit whatever fits."""

    name = "accept-all"

    def __init__(self, bandwidths, capacity):
        self.bandwidths = tuple(bandwidths)
        self.capacity = capacity

    def decide(self, occupancy, neighbors, event, view=None):
        used = sum(x * b for x, b in zip(occupancy, self.bandwidths))
        return used + self.bandwidths[event.cls] <= self.capacity


class TablePolicy(PolicyProvider):
    """Look up a solved MDP policy by (occupancy, event)."""

    name = "mdp"

    def __init__(self, policy, name: str | None = None):
        model: AdmissionModel = policy.model
        self.policy = policy
        if name:
            self.name = name
        self._table = {}
        for i, s in enumerate(model.states):
            if s.event.is_arrival:
                self._table[(s.occupancy, s.event.kind, s.event.cls)] = bool(policy.accept[i])

    def decide(self, occupancy, neighbors, event, view=None):
        return self._table.get((occupancy, event.kind, event.cls), False)


class NagPolicy(PolicyProvider):
    name = "nag"
    needs_neighbors = True
    needs_view = True

    def __init__(self, config: NagConfig, traffic: TrafficModel, bandwidths, capacity,
                 use_second_ring: bool = True):
        self.config = config
        self.traffic = traffic
        self.bandwidths = tuple(bandwidths)
        self.capacity = capacity
        self.use_second_ring = use_second_ring

    def decide(self, occupancy, neighbors, event, view=None):
        second = None
        if self.use_second_ring and view is not None and event.kind == NEW:
            second = view.second_ring()
        return nag_admit(occupancy, neighbors, event, self.config, self.traffic,
                         self.bandwidths, self.capacity, second)


class NetworkView:
    """Read-only window on the network around the deciding cell."""

    def __init__(self, sim, cell):
        self._sim, self.cell = sim, cell

    def occupancy(self, cell):
        return tuple(self._sim.occ[cell])

    def second_ring(self):
        nbrs = self._sim.neighbors
        return [[tuple(self._sim.occ[m]) for m in nbrs[n] if m != self.cell]
                for n in nbrs[self.cell]]


# -- metrics ---------------------------------------------------------------

@dataclass
class SimMetrics:
    new_arrivals: np.ndarray
    blocked: np.ndarray
    handoff_attempts: np.ndarray
    dropped: np.ndarray
    completions: np.ndarray
    active_at_end: np.ndarray
    utility_raw: float
    utility_infinite_capacity: float
    events_simulated: int = 0
    direction_counts: np.ndarray | None = None
    state_counts: dict | None = None
    occupancy_time: dict | None = None

    @staticmethod
    def _ratio(num, den):
        return float(num) / float(den) if den > 0 else None

    def p_cb(self, cls: int | None = None):
        """Blocking probability for one class or all; None when undefined."""
        if cls is None:
            return self._ratio(self.blocked.sum(), self.new_arrivals.sum())
        return self._ratio(self.blocked[cls], self.new_arrivals[cls])

    def p_hd(self, cls: int | None = None):
        if cls is None:
            return self._ratio(self.dropped.sum(), self.handoff_attempts.sum())
        return self._ratio(self.dropped[cls], self.handoff_attempts[cls])

    @property
    def normalized_utility(self) -> float:
        if self.utility_infinite_capacity == 0:
            return 1.0
        return self.utility_raw / self.utility_infinite_capacity


def compute_metrics(counters: dict, classes: Sequence[QosClassSpec], scheme=None) -> SimMetrics:
    """Build :class:`SimMetrics` from raw per-class counters.

    ``counters`` needs new_arrivals, blocked, handoff_attempts, dropped and
    completions (per-class sequences).  Utilities default to the flat-rate
    bookkeeping identity when absent.
    """
    K = len(classes)
    arr = {k: np.asarray(counters.get(k, np.zeros(K)), dtype=np.int64)
           for k in ("new_arrivals", "blocked", "handoff_attempts", "dropped",
                     "completions", "active_at_end")}
    if np.any(arr["blocked"] > arr["new_arrivals"]) or np.any(arr["dropped"] > arr["handoff_attempts"]):
        raise InvariantViolation("more blocks/drops than attempts")
    carry = np.array([c.reward_carry for c in classes])
    block = np.array([c.reward_block for c in classes])
    drop = np.array([c.reward_drop for c in classes])
    if "utility_raw" in counters:
        raw = float(counters["utility_raw"])
    else:
        if scheme is not None and PricingScheme(scheme) is PricingScheme.LINEAR:
            raise ValueError("linear pricing needs utility_raw from the simulation")
        accepted = arr["new_arrivals"] - arr["blocked"]
        raw = float(accepted @ carry + arr["blocked"] @ block + arr["dropped"] @ drop)
    inf_cap = float(counters.get("utility_infinite_capacity", arr["new_arrivals"] @ carry))
    return SimMetrics(arr["new_arrivals"], arr["blocked"], arr["handoff_attempts"], arr["dropped"],
                      arr["completions"], arr["active_at_end"], raw, inf_cap,
                      int(counters.get("events_simulated", 0)))


# -- random streams --------------------------------------------------------

class _Buffered:
    """Chunked draws from one numpy generator."""

    def __init__(self, rng: np.random.Generator, draw, chunk=4096):
        self._rng, self._draw, self._chunk = rng, draw, chunk
        self._buf, self._i = draw(rng, chunk).tolist(), 0

    def next(self):
        if self._i >= len(self._buf):
            self._buf, self._i = self._draw(self._rng, self._chunk).tolist(), 0
        v = self._buf[self._i]
        self._i += 1
        return v


def substream(seed: int, cell: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(cell, purpose)))


def arrival_trace(seed: int, cell: int, traffic: TrafficModel, horizon: float):
    """Times, classes and holding times of every new call at ``cell``."""
    lam = traffic.arrival_rate
    K = traffic.num_classes
    if lam <= 0:
        return np.empty(0), np.empty(0, dtype=np.int64), np.empty(0)
    rng = substream(seed, cell, ARRIVAL_STREAM)
    mix = np.asarray(traffic.class_mix)
    times, classes, holds = [], [], []
    t = 0.0
    n = max(16, int(lam * horizon * 1.1) + 16)
    while t <= horizon:
        gaps = rng.exponential(1.0 / lam, n)
        cls = rng.choice(K, size=n, p=mix)
        hold = rng.exponential(1.0 / traffic.holding_rate, n)
        ts = t + np.cumsum(gaps)
        times.append(ts)
        classes.append(cls)
        holds.append(hold)
        t = ts[-1]
        n = max(16, n // 4)
    times, classes, holds = np.concatenate(times), np.concatenate(classes), np.concatenate(holds)
    keep = times <= horizon
    return times[keep], classes[keep], holds[keep]


# -- the simulation --------------------------------------------------------

@dataclass
class SimulationSettings:
    horizon: float
    warmup: float | None = None
    seed: int = 0
    allow_self_reinjection: bool = True
    record_cell: int | None = None

    def __post_init__(self):
        if self.warmup is None:
            self.warmup = 0.1 * self.horizon
        if not self.horizon > self.warmup >= 0:
            raise ValueError("need horizon > warmup >= 0")


class _Network:
    def __init__(self, topology, num_classes):
        self.neighbors = topology.neighbors
        self.occ = [[0] * num_classes for _ in topology.cells]
        self.used = [0] * topology.num_cells


def run_simulation(topology: HexTopology, provider: PolicyProvider, traffic: TrafficModel,
                   classes: Sequence[QosClassSpec], capacity: int, scheme,
                   settings: SimulationSettings) -> SimMetrics:
    """Simulate the network until ``settings.horizon`` and collect metrics.

    Counters and utility only include events at or after the warmup time.
    With ``record_cell`` set, the (occupancy, event) seen at every event of
    that cell is tallied, together with the time spent in each occupancy.
    """
    scheme = PricingScheme(scheme)
    linear = scheme is PricingScheme.LINEAR
    K = len(classes)
    bw = [c.bandwidth for c in classes]
    carry = [c.reward_carry for c in classes]
    block = [c.reward_block for c in classes]
    drop = [c.reward_drop for c in classes]
    horizon, warmup, seed = settings.horizon, settings.warmup, settings.seed
    ncell = topology.num_cells
    net = _Network(topology, K)
    occ, used, neighbors = net.occ, net.used, net.neighbors
    targets = topology.targets
    ho_rate = traffic.handoff_rate_per_call

    traces = [arrival_trace(seed, c, traffic, horizon) for c in range(ncell)]
    trace_lists = [(t.tolist(), k.tolist(), h.tolist()) for t, k, h in traces]
    dwell = [_Buffered(substream(seed, c, DWELL_STREAM), lambda g, n: g.exponential(1.0, n))
             for c in range(ncell)]
    direction = [_Buffered(substream(seed, c, DIRECTION_STREAM), lambda g, n: g.integers(0, 6, n))
                 for c in range(ncell)]
    reinject_p = [reinjection_weights(topology, c, settings.allow_self_reinjection)
                  for c in range(ncell)]
    reinject = [_Buffered(substream(seed, c, REINJECT_STREAM),
                          (lambda p: lambda g, n: g.choice(ncell, size=n, p=p))(reinject_p[c]))
                for c in range(ncell)]

    new_arr = [0] * K
    blocked = [0] * K
    ho_att = [0] * K
    dropped = [0] * K
    done = [0] * K
    dir_counts = [0] * 6
    utility = 0.0
    inf_util = 0.0

    record = settings.record_cell
    state_counts = {} if record is not None else None
    occ_time = {} if record is not None else None
    last_change = warmup

    def note_occupancy(cell, t):
        nonlocal last_change
        if cell == record:
            if t > warmup:
                key = tuple(occ[cell])
                occ_time[key] = occ_time.get(key, 0.0) + t - max(last_change, warmup)
            last_change = t

    # call records: [cls, cell, end_time, admit_time]
    calls = {}
    next_id = 0
    heap = []
    seq = 0
    pos = [0] * ncell
    for c in range(ncell):
        times = trace_lists[c][0]
        if times:
            heap.append((times[0], seq, _ARRIVAL, c))
            seq += 1
    heapq.heapify(heap)

    # infinite-capacity reference: every call carried in full, nobody dropped
    for c in range(ncell):
        times, kls, holds = traces[c]
        if linear:
            lo = np.maximum(times, warmup)
            hi = np.minimum(times + holds, horizon)
            inf_util += float(np.sum(np.asarray(carry)[kls] * np.clip(hi - lo, 0, None)))
        else:
            post = times >= warmup
            inf_util += float(np.sum(np.asarray(carry)[kls[post]]))

    def view_for(cell):
        return NetworkView(net, cell) if provider.needs_view else None

    def decide(cell, event):
        nb = [tuple(occ[n]) for n in neighbors[cell]] if provider.needs_neighbors else ()
        ok = provider.decide(tuple(occ[cell]), nb, event, view_for(cell))
        if ok and used[cell] + bw[event.cls] > capacity:
            raise InvariantViolation(
                f"{provider.name} accepted {event.code} at cell {cell} with occupancy "
                f"{tuple(occ[cell])} beyond capacity {capacity}")
        return ok

    def schedule_next(cid, t, cell):
        nonlocal seq
        end = calls[cid][2]
        if ho_rate > 0:
            nxt = t + dwell[cell].next() / ho_rate
            if nxt < end:
                heapq.heappush(heap, (nxt, seq, _HANDOFF, cid))
                seq += 1
                return
        heapq.heappush(heap, (end, seq, _END, cid))
        seq += 1

    def carriage(rec, t):
        return carry[rec[0]] * max(0.0, min(t, horizon) - max(rec[3], warmup))

    events = 0
    while heap:
        t, _, kind, who = heapq.heappop(heap)
        if t > horizon:
            break
        events += 1
        counted = t >= warmup
        if kind == _ARRIVAL:
            cell = who
            times, kls, holds = trace_lists[cell]
            i = pos[cell]
            k, hold = kls[i], holds[i]
            pos[cell] = i + 1
            if i + 1 < len(times):
                heapq.heappush(heap, (times[i + 1], seq, _ARRIVAL, cell))
                seq += 1
            ev = CallEvent(NEW, k)
            if cell == record and counted:
                key = (tuple(occ[cell]), ev.code)
                state_counts[key] = state_counts.get(key, 0) + 1
            if counted:
                new_arr[k] += 1
            if decide(cell, ev):
                note_occupancy(cell, t)
                occ[cell][k] += 1
                used[cell] += bw[k]
                calls[next_id] = [k, cell, t + hold, t]
                schedule_next(next_id, t, cell)
                next_id += 1
                if counted and not linear:
                    utility += carry[k]
            elif counted:
                blocked[k] += 1
                utility += block[k]
        elif kind == _END:
            rec = calls.pop(who)
            k, cell = rec[0], rec[1]
            if cell == record and counted:
                key = (tuple(occ[cell]), CallEvent(DEPART, k).code)
                state_counts[key] = state_counts.get(key, 0) + 1
            note_occupancy(cell, t)
            occ[cell][k] -= 1
            used[cell] -= bw[k]
            if counted:
                done[k] += 1
            if linear:
                utility += carriage(rec, t)
        else:
            rec = calls[who]
            k, src = rec[0], rec[1]
            if src == record and counted:
                key = (tuple(occ[src]), CallEvent(DEPART, k).code)
                state_counts[key] = state_counts.get(key, 0) + 1
            note_occupancy(src, t)
            occ[src][k] -= 1
            used[src] -= bw[k]
            d = direction[src].next()
            if counted:
                dir_counts[d] += 1
            dst = targets[src][d]
            if dst < 0:
                dst = reinject[src].next()
            ev = CallEvent(HANDOFF, k)
            if dst == record and counted:
                key = (tuple(occ[dst]), ev.code)
                state_counts[key] = state_counts.get(key, 0) + 1
            if counted:
                ho_att[k] += 1
            if decide(dst, ev):
                note_occupancy(dst, t)
                occ[dst][k] += 1
                used[dst] += bw[k]
                rec[1] = dst
                schedule_next(who, t, dst)
            else:
                del calls[who]
                if counted:
                    dropped[k] += 1
                    utility += drop[k]
                if linear:
                    utility += carriage(rec, t)

    active = [0] * K
    for rec in calls.values():
        active[rec[0]] += 1
        if linear:
            utility += carriage(rec, horizon)
    if record is not None:
        note_occupancy(record, horizon)

    return SimMetrics(np.array(new_arr), np.array(blocked), np.array(ho_att), np.array(dropped),
                      np.array(done), np.array(active), utility, inf_util, events,
                      np.array(dir_counts), state_counts, occ_time)
