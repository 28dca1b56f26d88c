import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cellcac.errors import DegenerateModelError, InfeasibleActionError
from cellcac.model import (AdmissionModel, CallEvent, CellState, NO_EVENT, QosClassSpec,
                           TrafficModel, enumerate_states, event_rate, mobility_rho,
                           offered_load_to_arrival_rate, arrival_rate_to_offered_load,
                           proportional_classes)
from oracles import brute_occupancies

MU = 1 / 120


def classes(*bws):
    return [QosClassSpec(b, float(b), -0.1 * b, -8.0 * b) for b in bws]


def reference_traffic(c=(20.0, 4.0), lam=0.2):
    return TrafficModel.from_mobility(lam, (0.5, 0.5), MU, 50.0, 1.0, c)


# -- state space ---------------------------------------------------------

def test_single_class_n2_has_eleven_states():
    states = enumerate_states(classes(1), 2)
    assert len(states) == 11
    assert states[0] == CellState((0,), NO_EVENT)
    assert CellState((0,), CallEvent("d", 0)) not in states


def test_reference_instance_occupancies_match_brute_force():
    m = AdmissionModel(classes(1, 4), 100)
    brute = brute_occupancies((1, 4), 100)
    assert len(m.occupancies) == len(brute) == sum(101 - 4 * k for k in range(26)) == 1326
    assert sorted(map(tuple, m.occupancies.tolist())) == sorted(brute)


def test_reference_instance_state_count():
    m = AdmissionModel(classes(1, 4), 100)
    brute = brute_occupancies((1, 4), 100)
    # 5 events always present, one departure per class in use
    expected = sum(5 + (x[0] > 0) + (x[1] > 0) for x in brute)
    assert m.num_states == expected == 9155


def test_oversized_class_leaves_only_empty_cell():
    states = enumerate_states(classes(5), 4)
    assert [s.occupancy for s in states] == [(0,)] * 3
    assert {s.event.kind for s in states} == {"n", "r", "h"}
    with pytest.raises(DegenerateModelError):
        AdmissionModel(classes(5), 4)


def test_empty_inputs_are_degenerate():
    with pytest.raises(DegenerateModelError):
        enumerate_states([], 10)
    with pytest.raises(DegenerateModelError):
        enumerate_states(classes(1), 0)


def test_canonical_order():
    m = AdmissionModel(classes(1, 2), 3)
    occs = [s.occupancy for s in m.states]
    assert occs == sorted(occs)
    first = [s.event.code for s in m.states if s.occupancy == (1, 1)]
    assert first == ["n", "r1", "r2", "h1", "h2", "d1", "d2"]
    for i, s in enumerate(m.states):
        assert m.index(s) == i


def test_event_codes_round_trip():
    for code in ("n", "r1", "h2", "d3"):
        assert CallEvent.parse(code).code == code


# -- mobility and load ---------------------------------------------------

def test_rho_values():
    assert mobility_rho(0.0, MU, 1.0) == 0.0
    hand = (3 + 2 * math.sqrt(3)) * (50 / 3600) / (9 * MU * 1.0)
    assert mobility_rho(50.0, MU, 1.0) == pytest.approx(hand, rel=1e-14)
    assert mobility_rho(50.0, MU, 1.0) == pytest.approx(1.1971, abs=1e-4)
    assert mobility_rho(100.0, MU, 1.0) == pytest.approx(2.3941, abs=1e-4)
    assert mobility_rho(100.0, MU, 1.0) == pytest.approx(2 * mobility_rho(50.0, MU, 1.0), rel=1e-15)


@given(sp=st.floats(0.1, 200), mu=st.floats(1e-4, 1.0), r=st.floats(0.1, 10), k=st.floats(0.1, 10))
def test_rho_scaling(sp, mu, r, k):
    base = mobility_rho(sp, mu, r)
    assert mobility_rho(k * sp, mu, r) == pytest.approx(k * base, rel=1e-12)
    assert mobility_rho(sp, k * mu, r) == pytest.approx(base / k, rel=1e-12)
    assert mobility_rho(sp, mu, k * r) == pytest.approx(base / k, rel=1e-12)


def test_load_conversion_round_trip():
    lam = offered_load_to_arrival_rate(300, MU, (0.5, 0.5), (1, 4))
    assert lam == pytest.approx(300 * MU / 2.5)
    assert arrival_rate_to_offered_load(lam, MU, (0.5, 0.5), (1, 4)) == pytest.approx(300)


# -- event timing --------------------------------------------------------

def test_mean_time_empty_cell():
    m = AdmissionModel(classes(1, 4), 100)
    tr = TrafficModel(0.2, (0.5, 0.5), MU)
    assert m.mean_event_time(CellState((0, 0), NO_EVENT), tr) == pytest.approx(5.0)


def test_mean_time_hand_example():
    m = AdmissionModel(classes(1, 4), 100)
    tr = reference_traffic()
    rho = mobility_rho(50.0, MU, 1.0)
    omega = 15 / 120 + 0.2 + 24 * rho / 120
    assert omega == pytest.approx(0.56442, abs=1e-5)
    tau = m.mean_event_time(CellState((10, 5), NO_EVENT), tr)
    assert tau == pytest.approx(1 / omega, rel=1e-12)
    assert tau == pytest.approx(1.7717, abs=1e-4)
    assert tau * event_rate((10, 5), tr) == 1.0


def test_doubling_rates_halves_time():
    m = AdmissionModel(classes(1, 4), 100)
    tr = reference_traffic()
    fast = TrafficModel(0.4, (0.5, 0.5), 2 * MU, 2 * tr.handoff_rate_per_call, (20.0, 4.0))
    s = CellState((10, 5), CallEvent("r", 0))
    assert m.mean_event_time(s, fast) == pytest.approx(m.mean_event_time(s, tr) / 2, rel=1e-12)


# -- transitions ---------------------------------------------------------

def test_empty_cell_has_no_departures():
    m = AdmissionModel(classes(1, 4), 100)
    tr = reference_traffic()
    for accept in (False, True):
        succ = m.transition_distribution(CellState((0, 0), NO_EVENT), accept, tr)
        assert all(s.event.kind in ("r", "h") for s, _ in succ)
        assert sum(p for _, p in succ) == pytest.approx(1.0, abs=1e-15)


def test_infeasible_accept_raises():
    m = AdmissionModel(classes(1, 4), 100)
    s = CellState((98, 0), CallEvent("r", 1))
    with pytest.raises(InfeasibleActionError):
        m.transition_distribution(s, True, reference_traffic())
    assert not m.accept_feasible[m.index(s)]
    assert m.transition_distribution(s, False, reference_traffic())


def test_departure_split_hand_example():
    m = AdmissionModel(classes(1, 4), 100)
    tr = reference_traffic(c=(3.0, 2.0))
    rho_mu = mobility_rho(50.0, MU, 1.0) * MU
    rates = {"r1": 0.1, "r2": 0.1, "h1": 3.0 * rho_mu, "h2": 2.0 * rho_mu}
    total = sum(rates.values())
    for accept in (False, True):
        succ = dict((s.event.code, p) for s, p in
                    m.transition_distribution(CellState((1, 0), CallEvent("d", 0)), accept, tr))
        assert set(succ) == set(rates)
        for code, r in rates.items():
            assert succ[code] == pytest.approx(r / total, rel=1e-12)
        assert all(s.occupancy == (0, 0) for s, _ in
                   m.transition_distribution(CellState((1, 0), CallEvent("d", 0)), accept, tr))


def test_literal_convention_sends_stray_departures_to_no_event():
    m = AdmissionModel(classes(1), 3)
    tr = TrafficModel(1.0, (1.0,), 0.5)
    succ = dict(m.transition_distribution(CellState((1,), CallEvent("d", 0)), False, tr, "literal"))
    # pre-action x=1 gives departure rate 0.5, but the cell is empty afterwards
    assert succ[CellState((0,), NO_EVENT)] == pytest.approx(0.5 / 1.5)
    assert succ[CellState((0,), CallEvent("r", 0))] == pytest.approx(1.0 / 1.5)


def test_zero_rate_cell_self_loops():
    m = AdmissionModel(classes(1), 3)
    tr = TrafficModel(0.0, (1.0,), 0.5)
    assert m.transition_distribution(CellState((0,), NO_EVENT), False, tr) == [
        (CellState((0,), NO_EVENT), 1.0)]


def test_reference_instance_matrices_are_valid():
    m = AdmissionModel(classes(1, 4), 100)
    tr = reference_traffic()
    pa, pr = m.transition_matrices(tr)
    for P, rows in ((pa, m.accept_feasible), (pr, np.ones(m.num_states, bool))):
        sums = np.asarray(P.sum(axis=1)).ravel()
        assert np.abs(sums[rows] - 1).max() < 1e-12
        assert (P.data >= 0).all()
        assert np.diff(P.indptr).max() <= 3 * 2 + 1
    assert np.diff(pa.indptr)[~m.accept_feasible].max() == 0


# -- rewards -------------------------------------------------------------

def test_reward_flat_cases():
    m = AdmissionModel(classes(1, 4), 100)
    r = lambda x, code, a: m.reward(CellState(x, CallEvent.parse(code)), a, "flat")
    assert r((0, 0), "r1", True) == 1.0
    assert r((0, 0), "r2", False) == -0.4
    assert r((0, 0), "h2", False) == -32.0
    assert r((0, 0), "h1", True) == 0.0
    for a in (True, False):
        assert r((1, 0), "d1", a) == 0.0
        assert r((1, 0), "n", a) == 0.0


def test_reward_linear_cases():
    m = AdmissionModel([QosClassSpec(1, 1.0, -0.1, -8.0), QosClassSpec(4, 4.0, -0.4, -32.0)], 100)
    r = lambda x, code, a: m.reward(CellState(x, CallEvent.parse(code)), a, "linear")
    assert r((2, 3), "d2", False) == -4 + (2 * 1 + 3 * 4) == 10
    assert r((2, 3), "d2", True) == 14
    assert r((2, 3), "n", True) == r((2, 3), "n", False) == 14
    assert r((2, 3), "r1", True) == 15
    assert r((2, 3), "h2", True) == 18
    assert r((2, 3), "r1", False) == pytest.approx(13.9)
    assert r((2, 3), "h2", False) == -18


def test_reward_vectors_match_scalar():
    m = AdmissionModel(classes(1, 2), 6)
    for scheme in ("flat", "linear"):
        ra, rr = m.reward_vectors(scheme)
        for i, s in enumerate(m.states):
            assert rr[i] == m.reward(s, False, scheme)
            if m.accept_feasible[i]:
                assert ra[i] == m.reward(s, True, scheme)


# -- properties ----------------------------------------------------------

small_instance = st.tuples(
    st.lists(st.integers(1, 3), min_size=1, max_size=2),
    st.integers(1, 7),
    st.floats(0.0, 2.0), st.floats(0.05, 1.0), st.floats(0.0, 1.0),
    st.lists(st.floats(0.0, 5.0), min_size=2, max_size=2),
    st.sampled_from(["post", "literal"]),
)


@settings(max_examples=40, deadline=None)
@given(small_instance)
def test_transitions_are_distributions_over_the_state_space(inst):
    bws, n, lam, mu, h, c, conv = inst
    if min(bws) > n:
        return
    m = AdmissionModel(classes(*bws), n)
    K = len(bws)
    tr = TrafficModel(lam, tuple([1.0 / K] * K), mu, h, tuple(c[:K]))
    pa, pr = m.transition_matrices(tr, conv)
    members = set(m.states)
    for i, s in enumerate(m.states):
        for accept, P in ((False, pr), (True, pa)):
            if accept and not m.accept_feasible[i]:
                continue
            succ = m.transition_distribution(s, accept, tr, conv)
            assert abs(sum(p for _, p in succ) - 1) < 1e-12
            assert all(p >= 0 and t in members for t, p in succ)
            if conv == "post":
                assert all(not (t.event.kind == "d" and t.occupancy[t.event.cls] == 0)
                           for t, _ in succ)
            row = P.getrow(i).toarray().ravel()
            dense = np.zeros(m.num_states)
            for t, p in succ:
                dense[m.index(t)] += p
            assert np.allclose(row, dense, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(small_instance)
def test_time_times_rate_is_one(inst):
    bws, n, lam, mu, h, c, _ = inst
    if min(bws) > n:
        return
    m = AdmissionModel(classes(*bws), n)
    K = len(bws)
    tr = TrafficModel(lam + 0.01, tuple([1.0 / K] * K), mu, h, tuple(c[:K]))
    for s in m.states:
        assert m.mean_event_time(s, tr) * event_rate(s.occupancy, tr) == pytest.approx(1.0, abs=1e-15)


def test_proportional_classes():
    data, video = proportional_classes((1, 4), (80, 40))
    assert (data.reward_carry, data.reward_block, data.reward_drop) == (1.0, -0.1, pytest.approx(-8.0))
    assert (video.reward_carry, video.reward_block, video.reward_drop) == (4.0, -0.4, pytest.approx(-16.0))
