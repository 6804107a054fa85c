import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from replaybalance.buffers import (OMISSION_EPS, ConfigError, CounterDesign, CounterKind,
                                   FifoBuffer, Offer, PluralStack, Record, ReservoirBuffer,
                                   counter_limit, counter_value, nu_from_zeta,
                                   rejection_probability, sample_replay,
                                   weighted_sample_without_replacement, write_back)


def rec(i, z=True, gb=1.0):
    return Record(i, np.array([float(i)]), np.array([0.0]),
                  np.array([float(i), -float(i)]) if z else None, gb)


def qlog(q):
    return CounterDesign(CounterKind.QLOG, q)


# q-log counter written out literally with floor/min/max, used as an independent oracle
def qlog_literal(q, n, N):
    m = max(0, n - N)
    if q == 1.0:
        g = N * math.log((N + m) / N)
    else:
        g = N * (((N + m) / N) ** (1 - q) - 1) / (1 - q)
    return min(n, N) + math.floor(g + 1e-9)


designs = st.one_of(
    st.floats(0.0, 2.0).map(lambda q: CounterDesign("qlog", q)),
    st.floats(0.0, 0.999).map(lambda q: CounterDesign("lin", q)),
    st.floats(1e-3, 1.0).map(lambda q: CounterDesign("exp", q)),
)


class TestCounter:
    def test_classic_is_identity(self):
        assert counter_value(qlog(0.0), 250, 100) == 250

    @pytest.mark.parametrize("q", [0.0, 0.5, 1.0, 1.5, 2.0])
    def test_value_at_capacity(self, q):
        assert counter_value(qlog(q), 100, 100) == 100

    def test_q2_saturates_near_limit(self):
        v = counter_value(qlog(2.0), 10**6, 100)
        assert v in (199, 200)
        assert counter_limit(qlog(2.0), 100) == 200

    def test_linear_example(self):
        assert counter_value(CounterDesign("lin", 0.5), 300, 100) == 200

    def test_exp_tiny_q_is_identity(self):
        assert counter_value(CounterDesign("exp", 1e-13), 5000, 100) == 5000

    @pytest.mark.parametrize("q", [0.25, 0.5, 1.0, 1.5, 2.0])
    def test_matches_literal_formula(self, q):
        n = np.arange(0, 20000, 7)
        got = counter_value(qlog(q), n, 100)
        want = [qlog_literal(q, int(k), 100) for k in n]
        assert np.array_equal(got, want)

    def test_scalar_and_array_paths_agree(self):
        for d in [qlog(1.0), CounterDesign("lin", 0.3), CounterDesign("exp", 0.7)]:
            n = np.arange(0, 5000)
            assert [counter_value(d, int(k), 64) for k in n] == counter_value(d, n, 64).tolist()

    @pytest.mark.parametrize("kind,q", [("qlog", -0.1), ("qlog", 2.1), ("lin", 1.0),
                                        ("exp", 0.0), ("exp", 1.5), ("qlog", float("nan"))])
    def test_domain_errors(self, kind, q):
        with pytest.raises(ConfigError):
            CounterDesign(kind, q)

    def test_bad_capacity(self):
        with pytest.raises(ConfigError):
            counter_value(qlog(1.0), 5, 0)

    @given(designs, st.integers(1, 600), st.integers(0, 200000))
    @settings(max_examples=200, deadline=None)
    def test_increments_are_zero_or_one(self, design, N, n):
        a = counter_value(design, n, N)
        b = counter_value(design, n + 1, N)
        assert b - a in (0, 1)

    @given(st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.integers(1, 600), st.integers(0, 10**6))
    @settings(max_examples=200, deadline=None)
    def test_larger_q_grows_slower(self, q1, q2, N, n):
        lo, hi = sorted((q1, q2))
        assert counter_value(qlog(hi), n, N) <= counter_value(qlog(lo), n, N)

    def test_json_round_trip(self):
        d = CounterDesign("exp", 0.3)
        assert CounterDesign.from_dict(json.loads(json.dumps(d.to_dict()))) == d


class TestFifo:
    def test_fill_and_evict(self):
        f = FifoBuffer(2)
        assert f.push(rec(1, z=False)) is None
        assert len(f) == 1
        f.push(rec(2, z=False))
        out = f.push(rec(3, z=False))
        assert out.id == 1
        assert [r.id for r in f.records()] == [2, 3]

    def test_eviction_order(self):
        f = FifoBuffer(512)
        evicted = [r.id for r in (f.push(rec(i, z=False)) for i in range(1, 514)) if r is not None]
        assert evicted == [1]

    def test_sample_distinct(self):
        f = FifoBuffer(8)
        for i in range(20):
            f.push(rec(i, z=False))
        x, y = f.sample(5, np.random.default_rng(0))
        assert x.shape == (5, 1) and len(set(x[:, 0])) == 5
        assert set(x[:, 0]) <= set(range(12, 20))

    def test_round_trip(self):
        f = FifoBuffer(3)
        for i in range(5):
            f.push(rec(i, z=False))
        g = FifoBuffer.from_dict(json.loads(json.dumps(f.to_dict())))
        assert [r.id for r in g.records()] == [2, 3, 4]


class TestReservoir:
    def test_fill_is_free(self):
        b = ReservoirBuffer(512)
        rng = np.random.default_rng(0)
        kinds = {b.offer(rec(i), rng).kind for i in range(512)}
        assert kinds == {Offer.ACCEPTED_FREE}
        assert len(b) == 512 and b.n == 512

    @given(designs, st.integers(1, 30), st.integers(0, 200), st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_occupancy_and_counter(self, design, N, offers, seed):
        b = ReservoirBuffer(N, design)
        rng = np.random.default_rng(seed)
        for i in range(offers):
            res = b.offer(rec(i), rng)
            if res.kind is Offer.REJECTED:
                assert res.record.id == i and i not in b
        assert b.n == offers
        assert len(b) == min(offers, N)
        assert len({r.id for r in b.records()}) == len(b)

    def test_q2_acceptance_tends_to_half(self):
        b = ReservoirBuffer(50, qlog(2.0))
        rng = np.random.default_rng(1)
        for i in range(20000):
            b.offer(rec(i), rng)
        hits = sum(b.offer(rec(10**6 + i), rng).accepted for i in range(20000))
        p = b.acceptance_probability()
        assert abs(p - 50 / 99) < 1e-12
        assert abs(hits / 20000 - p) < 4 * math.sqrt(p * (1 - p) / 20000)

    def test_update_feature(self):
        b = ReservoirBuffer(4)
        rng = np.random.default_rng(0)
        for i in range(3):
            b.offer(rec(i), rng)
        n = b.n
        assert b.update_feature(1, np.array([9.0, 9.0]), 0.25)
        got = b.get(1)
        assert np.array_equal(got.z, [9.0, 9.0]) and got.gamma_bar == 0.25
        assert b.n == n
        before = b.to_dict()
        assert not b.update_feature(77, np.zeros(2), 0.5)
        assert b.misses == 1
        after = b.to_dict()
        assert after["records"] == before["records"]

    def test_place_needs_feature(self):
        b = ReservoirBuffer(2)
        with pytest.raises(ValueError):
            b.offer(rec(0, z=False), np.random.default_rng(0))

    def test_round_trip(self):
        b = ReservoirBuffer(5, qlog(1.0))
        rng = np.random.default_rng(3)
        for i in range(40):
            b.offer(rec(i), rng)
        c = ReservoirBuffer.from_dict(json.loads(json.dumps(b.to_dict())))
        assert c.n == b.n and c.design == b.design
        assert [r.id for r in c.records()] == [r.id for r in b.records()]
        assert c.to_dict() == b.to_dict()


class TestOmission:
    def test_nu_examples(self):
        assert nu_from_zeta(0.75) == pytest.approx(1.0, abs=1e-12)
        # 1 - sqrt(0.8) = 0.1055728..., log2 of its inverse
        assert nu_from_zeta(0.2) == pytest.approx(3.243690, abs=1e-6)
        assert nu_from_zeta(1.0) == 0.0
        assert nu_from_zeta(0.0) is None

    @given(st.floats(1e-6, 1 - 1e-6))
    def test_nu_gives_zeta_at_midpoint(self, zeta):
        p = 0.5 ** nu_from_zeta(zeta)
        assert 1 - (1 - p) ** 2 == pytest.approx(zeta, rel=1e-9, abs=1e-12)

    def test_nu_out_of_range(self):
        with pytest.raises(ConfigError):
            nu_from_zeta(1.5)

    def test_rejection_examples(self):
        assert rejection_probability(1.0, 1.0, 0.2, 2.0) == 0.0
        assert rejection_probability(0.2, 1.0, 0.2, 2.0) == 1.0
        assert rejection_probability(0.5, 0.5 + 1e-7, 0.5, 2.0) == 0.0
        assert rejection_probability(0.6, 1.0, 0.2, 1.0) == pytest.approx(0.5)
        assert rejection_probability(0.5, 1.0, 0.0, None) == 0.0

    def test_guard_threshold(self):
        assert rejection_probability(0.0, OMISSION_EPS * 0.99, 0.0, 1.0) == 0.0
        assert rejection_probability(0.0, OMISSION_EPS * 1.01, 0.0, 1.0) == 1.0

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 8))
    def test_rejection_in_unit_interval(self, g, a, b, nu):
        p = rejection_probability(g, max(a, b), min(a, b), nu)
        assert 0.0 <= p <= 1.0


def full_stack(zeta, gb_old=1.0, caps=(4, 4)):
    s = PluralStack(list(caps), [qlog(1.5), qlog(1.0)], zeta)
    rng = np.random.default_rng(0)
    i = 0
    while any(len(b) < b.capacity for b in s.layers):
        s.offer(rec(i, gb=gb_old), rng)
        i += 1
    return s, i


class TestStack:
    def test_layer_order_check(self):
        with pytest.raises(ConfigError):
            PluralStack([4, 4], [qlog(1.0), qlog(1.5)])

    def test_rejection_stops_pipeline(self):
        s = PluralStack([2, 2], [qlog(2.0), qlog(2.0)], 0.0)
        rng = np.random.default_rng(0)
        for i in range(2):
            s.offer(rec(i), rng)
        n2 = s.layers[1].n
        rejected = False
        for i in range(2, 50):
            trail = s.offer(rec(i), rng)
            if trail[0][1].kind is Offer.REJECTED:
                rejected = True
                assert len(trail) == 1 and s.layers[1].n == n2
            n2 = s.layers[1].n
        assert rejected

    def test_zeta_zero_never_omits(self):
        s, _ = full_stack(0.0)
        rng = np.random.default_rng(1)
        for l in s.layers:
            l._s.gamma_bar[:len(l)] = np.linspace(0.1, 1.0, len(l))
        for i in range(100, 300):
            s.offer(rec(i, gb=0.0), rng)
        assert sum(s.stats.omitted) == 0
        assert s.stats.offers[0] == 300 - 100 + 8

    def test_minimal_candidate_is_omitted(self):
        s, start = full_stack(0.2)
        for l in s.layers:
            l._s.gamma_bar[:len(l)] = np.linspace(0.5, 1.0, len(l))
        ns = [b.n for b in s.layers]
        trail = s.offer(rec(999, gb=0.1), np.random.default_rng(0))
        assert trail == [(0, trail[0][1])] and trail[0][1].kind is Offer.OMITTED
        assert [b.n for b in s.layers] == ns

    def test_passing_rejection_combines_layers(self):
        s, _ = full_stack(0.75)  # nu = 1
        s.layers[0]._s.gamma_bar[:4] = [0.0, 1.0, 1.0, 1.0]
        s.layers[1]._s.gamma_bar[:4] = [0.5, 1.0, 1.0, 1.0]
        # layer 0 (first reservoir) sees only its own stats
        assert s.passing_rejection(0, 0.75) == pytest.approx(0.25)
        # layer 1 combines 0.25 from layer 0 with 0.5 from its own stats
        assert s.passing_rejection(1, 0.75) == pytest.approx(1 - 0.75 * 0.5)

    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
    @settings(max_examples=30, deadline=None)
    def test_conservation(self, seed, zeta):
        s = PluralStack([6, 5], [qlog(1.5), qlog(1.0)], zeta)
        rng = np.random.default_rng(seed)
        gbs = rng.uniform(0, 1, 300)
        for i in range(300):
            s.offer(rec(i, gb=float(gbs[i])), rng)
        ids = [r.id for b in s.layers for r in b.records()]
        assert len(ids) == len(set(ids))
        assert s.stats.offers[0] + s.stats.omitted[0] == 300
        assert [b.n for b in s.layers] == s.stats.offers
        # layer 1 only sees records displaced from layer 0
        displaced = s.stats.offers[0] - s.stats.rejected[0] - len(s.layers[0])
        assert s.stats.offers[1] + s.stats.omitted[1] == displaced

    def test_featurize_called_on_first_acceptance(self):
        s = PluralStack.single(3)
        calls = []

        def feat(x):
            calls.append(float(x[0]))
            return np.array([1.0, 2.0])

        s.offer(rec(5, z=False), np.random.default_rng(0), feat)
        assert calls == [5.0] and np.array_equal(s.layers[0].get(5).z, [1.0, 2.0])

    def test_round_trip(self):
        s, _ = full_stack(0.2)
        t = PluralStack.from_dict(json.loads(json.dumps(s.to_dict())))
        assert t.to_dict() == s.to_dict()


class TestSampling:
    def test_uniform_weights_cover_all(self):
        rng = np.random.default_rng(0)
        counts = np.zeros(10)
        for _ in range(20000):
            idx, fb = weighted_sample_without_replacement(np.ones(10), 3, rng)
            assert not fb and len(set(idx)) == 3
            counts[idx] += 1
        p = 0.3
        sd = math.sqrt(p * (1 - p) / 20000)
        assert np.all(np.abs(counts / 20000 - p) < 4 * sd)

    def test_zero_weight_never_drawn(self):
        rng = np.random.default_rng(0)
        w = np.ones(6)
        w[2] = 0.0
        for _ in range(2000):
            idx, _ = weighted_sample_without_replacement(w, 5, rng)
            assert 2 not in idx and len(idx) == 5

    def test_all_zero_falls_back(self):
        idx, fb = weighted_sample_without_replacement(np.zeros(5), 3, np.random.default_rng(0))
        assert fb and len(set(idx)) == 3

    def test_first_draw_proportional(self):
        # first element of the draw order follows w / sum(w)
        w = np.array([1.0, 2.0, 3.0, 4.0])
        rng = np.random.default_rng(2)
        first = np.zeros(4)
        trials = 40000
        for _ in range(trials):
            idx, _ = weighted_sample_without_replacement(w, 2, rng)
            first[idx[0]] += 1
        p = w / w.sum()
        assert np.all(np.abs(first / trials - p) < 4 * np.sqrt(p * (1 - p) / trials))

    def test_pair_inclusion_matches_sequential_oracle(self):
        # exact law of two sequential renormalized draws
        w = np.array([1.0, 2.0, 3.0, 4.0])
        W = w.sum()
        incl = np.array([sum(w[i] / W * w[j] / (W - w[i]) + w[j] / W * w[i] / (W - w[j])
                             for j in range(4) if j != i) for i in range(4)])
        rng = np.random.default_rng(5)
        hits = np.zeros(4)
        trials = 40000
        for _ in range(trials):
            idx, _ = weighted_sample_without_replacement(w, 2, rng)
            hits[idx] += 1
        sd = np.sqrt(incl * (1 - incl) / trials)
        assert np.all(np.abs(hits / trials - incl) < 4 * sd)

    def test_halves_disjoint_and_quota(self):
        s, _ = full_stack(0.0, caps=(3, 20))
        rng = np.random.default_rng(0)
        for _ in range(50):
            out = sample_replay(s, 7, rng)
            ids = np.concatenate([out.rehearsal.ids, out.regularization.ids])
            assert len(set(ids)) == ids.size
            assert len(out.rehearsal) == len(out.regularization)
            # the small layer gives all 3, the big one its quota of 7
            assert ids.size == 10 and (np.concatenate([out.rehearsal.layer, out.regularization.layer]) == 0).sum() == 3

    def test_single_layer_halves(self):
        s = PluralStack.single(40)
        rng = np.random.default_rng(0)
        for i in range(40):
            s.offer(rec(i), rng)
        out = sample_replay(s, 16, rng)
        assert len(out.rehearsal) == 16 and len(out.regularization) == 16
        assert not set(out.rehearsal.ids) & set(out.regularization.ids)

    def test_write_back_round_trip(self):
        s, _ = full_stack(0.0, caps=(6, 6))
        out = sample_replay(s, 4, np.random.default_rng(0))
        reg = out.regularization
        z_new = np.full((len(reg), 2), 7.0)
        gb_new = np.full(len(reg), 0.3)
        assert write_back(s, reg, z_new, gb_new) == 0
        for i in reg.ids:
            r = next(b.get(int(i)) for b in s.layers if int(i) in b)
            assert r.gamma_bar == 0.3 and np.all(r.z == 7.0)

    def test_write_back_detects_replaced_slot(self):
        s = PluralStack.single(2)
        rng = np.random.default_rng(0)
        s.offer(rec(0), rng)
        s.offer(rec(1), rng)
        out = sample_replay(s, 1, rng)
        s.layers[0].place(int(out.regularization.slot[0]), rec(50))
        assert write_back(s, out.regularization, None, np.array([0.1])) == 1
        assert s.misses == 1
