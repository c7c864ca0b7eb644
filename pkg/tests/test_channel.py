import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from rubicone.channel import (
    CHANNEL,
    COLLISION,
    DEFAULT_PER_CURVE,
    ChannelConfig,
    PerCurve,
    drop_probability,
    per_from_snr,
    set_link_snr,
    transmit,
)
from rubicone.messages import Heartbeat, LeaderRequest
from rubicone.perception import GroundTruth, PerceptionConfig, local_safety_check, observe

MSG = Heartbeat(0, 0.0, 0.0, -80.0, 10.0, 0.0)


def drop_rate(cfg, n, t=0.0, seed=1, conc=1):
    rng = random.Random(seed)
    drops = 0
    for _ in range(n):
        (d,) = transmit(cfg, 0, MSG, t, conc, rng, [1])
        drops += d.dropped
    return drops / n


class TestPerCurve:
    def test_default_anchors(self):
        assert per_from_snr(DEFAULT_PER_CURVE, 4.0) == pytest.approx(0.70, abs=1e-12)
        assert per_from_snr(DEFAULT_PER_CURVE, 14.0) == pytest.approx(0.30, abs=1e-12)

    def test_default_fit_parameters(self):
        assert DEFAULT_PER_CURVE.midpoint_snr == pytest.approx(9.0)
        assert DEFAULT_PER_CURVE.steepness == pytest.approx(math.log(7 / 3) / 5)

    def test_high_snr_limit(self):
        assert per_from_snr(DEFAULT_PER_CURVE, 60.0) < 0.01
        assert per_from_snr(DEFAULT_PER_CURVE, 1e6) == 0.0
        assert per_from_snr(DEFAULT_PER_CURVE, -1e6) == 1.0

    @given(st.floats(-50, 80), st.floats(0, 20))
    def test_monotone_and_bounded(self, snr, step):
        a = per_from_snr(DEFAULT_PER_CURVE, snr)
        b = per_from_snr(DEFAULT_PER_CURVE, snr + step)
        assert 0.0 <= b <= a <= 1.0

    def test_table_interpolates_and_clamps(self):
        curve = PerCurve.table([(0, 0.9), (10, 0.5), (20, 0.1)])
        assert per_from_snr(curve, 5) == pytest.approx(0.7)
        assert per_from_snr(curve, 15) == pytest.approx(0.3)
        assert per_from_snr(curve, -5) == 0.9
        assert per_from_snr(curve, 99) == 0.1

    def test_constant(self):
        assert per_from_snr(PerCurve.constant(0.25), 3.0) == 0.25

    @pytest.mark.parametrize("points", [[(0, 0.1), (5, 0.4)], [(5, 0.1), (0, 0.4)], [(0, 1.2)], []])
    def test_bad_tables(self, points):
        with pytest.raises(ValueError):
            PerCurve.table(points)

    def test_bad_anchors(self):
        with pytest.raises(ValueError):
            PerCurve.logistic_through((14, 0.3), (4, 0.7))

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            per_from_snr(DEFAULT_PER_CURVE, float("nan"))


class TestTransmit:
    def test_lossless_delivery(self):
        cfg = ChannelConfig(per_curve=PerCurve.constant(0.0), latency_jitter=0.0)
        out = transmit(cfg, 2, MSG, 10.0, 1, random.Random(0), [4, 0, 2, 1])
        assert [d.receiver for d in out] == [0, 1, 4]
        assert all(not d.dropped and d.arrival == 12.0 for d in out)

    def test_total_loss(self):
        cfg = ChannelConfig(per_curve=PerCurve.constant(1.0))
        out = transmit(cfg, 0, MSG, 0.0, 1, random.Random(0), range(1, 6))
        assert all(d.dropped and d.drop_cause == CHANNEL for d in out)

    def test_replay_is_exact(self):
        cfg = ChannelConfig(per_curve=PerCurve.constant(0.5))
        a = transmit(cfg, 0, MSG, 0.0, 1, random.Random(42), range(1, 6))
        b = transmit(cfg, 0, MSG, 0.0, 1, random.Random(42), range(1, 6))
        assert a == b

    def test_draw_order(self):
        # loss then jitter per receiver, ascending ids
        cfg = ChannelConfig(per_curve=PerCurve.constant(0.5), latency_base=2.0, latency_jitter=3.0)
        out = transmit(cfg, 0, MSG, 0.0, 1, random.Random(7), [2, 1])
        rng = random.Random(7)
        for d in out:
            u, j = rng.random(), rng.random()
            assert d.dropped == (u < 0.5)
            assert d.arrival == pytest.approx(2.0 + 3.0 * j)

    def test_arrival_after_send(self):
        cfg = ChannelConfig()
        out = transmit(cfg, 0, MSG, 5.0, 1, random.Random(3), range(1, 50))
        assert all(d.arrival > 5.0 for d in out)

    def test_collision_cause(self):
        cfg = ChannelConfig(per_curve=PerCurve.constant(0.0), collision_factor=0.5)
        out = transmit(cfg, 0, MSG, 0.0, 3, random.Random(0), range(1, 200))
        assert {d.drop_cause for d in out if d.dropped} == {COLLISION}

    def test_single_transmitter_has_no_collision_term(self):
        cfg = ChannelConfig(collision_factor=0.3)
        for snr in (2.0, 9.0, 30.0):
            assert drop_probability(cfg, snr, 1) == per_from_snr(cfg.per_curve, snr)
        assert drop_probability(cfg, 14.0, 4) == pytest.approx(1.0)
        assert drop_probability(ChannelConfig(), 14.0, 3) == pytest.approx(0.40)

    def test_concurrency_must_be_positive(self):
        with pytest.raises(ValueError):
            transmit(ChannelConfig(), 0, MSG, 0.0, 0, random.Random(0), [1])

    def test_corruption_only_for_signed_frames(self):
        cfg = ChannelConfig(per_curve=PerCurve.constant(0.0), corruption_prob=1.0)
        (d,) = transmit(cfg, 0, LeaderRequest(0, 1, 0), 0.0, 1, random.Random(0), [1])
        assert d.corrupted
        (d,) = transmit(cfg, 0, MSG, 0.0, 1, random.Random(0), [1])
        assert not d.corrupted

    @pytest.mark.parametrize("snr,per", [(4.0, 0.70), (14.0, 0.30), (9.0, 0.50)])
    def test_empirical_drop_rate(self, snr, per):
        n = 20000
        rate = drop_rate(ChannelConfig(default_snr=snr), n, seed=int(snr))
        assert abs(rate - per) <= 3 * math.sqrt(per * (1 - per) / n)

    def test_higher_snr_never_drops_more_with_common_numbers(self):
        lo = ChannelConfig(default_snr=4.0)
        hi = ChannelConfig(default_snr=14.0)
        r1, r2 = random.Random(9), random.Random(9)
        for _ in range(2000):
            (a,) = transmit(lo, 0, MSG, 0.0, 1, r1, [1])
            (b,) = transmit(hi, 0, MSG, 0.0, 1, r2, [1])
            assert b.dropped <= a.dropped

    @pytest.mark.parametrize("kwargs", [
        dict(latency_base=0.0), dict(latency_jitter=-1.0), dict(collision_factor=1.0),
        dict(corruption_prob=2.0), dict(retry_limit=-1), dict(default_snr=math.inf),
    ])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            ChannelConfig(**kwargs)


class TestLinks:
    def test_symmetric_lookup(self):
        cfg = ChannelConfig(default_snr=14.0, link_snr={(1, 2): 5.0})
        assert cfg.snr_at(2, 1, 0.0) == 5.0
        assert cfg.snr_at(0, 1, 0.0) == 14.0

    def test_asymmetric_lookup(self):
        cfg = ChannelConfig(link_snr={(1, 2): 5.0}, symmetric=False)
        assert cfg.snr_at(1, 2, 0.0) == 5.0
        assert cfg.snr_at(2, 1, 0.0) == cfg.default_snr

    def test_schedule_step(self):
        cfg = set_link_snr(ChannelConfig(default_snr=14.0), [(5000.0, None, 4.0)])
        before = drop_rate(cfg, 10000, t=100.0, seed=1)
        after = drop_rate(cfg, 10000, t=6000.0, seed=2)
        assert before == pytest.approx(0.30, abs=0.02)
        assert after == pytest.approx(0.70, abs=0.02)

    def test_per_link_schedule_overrides_global(self):
        cfg = set_link_snr(ChannelConfig(), [(0.0, None, 10.0), (1.0, (3, 1), 2.0)])
        assert cfg.snr_at(1, 3, 2.0) == 2.0
        assert cfg.snr_at(1, 2, 2.0) == 10.0
        assert cfg.snr_at(1, 3, 0.5) == 10.0

    def test_empty_schedule_is_static(self):
        cfg = ChannelConfig(default_snr=7.0)
        assert set_link_snr(cfg, []) == cfg

    def test_single_global_entry_matches_static(self):
        static = ChannelConfig(default_snr=7.0)
        sched = set_link_snr(ChannelConfig(default_snr=20.0), [(0.0, None, 7.0)])
        r1, r2 = random.Random(5), random.Random(5)
        a = [transmit(static, 0, MSG, float(t), 1, r1, range(1, 4)) for t in range(100)]
        b = [transmit(sched, 0, MSG, float(t), 1, r2, range(1, 4)) for t in range(100)]
        assert a == b

    def test_conflicting_entries(self):
        with pytest.raises(ValueError, match="conflicting"):
            set_link_snr(ChannelConfig(), [(1.0, (0, 1), 5.0), (1.0, (1, 0), 6.0)])

    def test_decreasing_times(self):
        with pytest.raises(ValueError):
            set_link_snr(ChannelConfig(), [(2.0, None, 5.0), (1.0, None, 6.0)])


class TestPerception:
    def test_perfect_and_inverted(self):
        rng = random.Random(0)
        for safe in (True, False):
            assert observe(GroundTruth(safe), 1.0, rng) is safe
            assert observe(GroundTruth(safe), 0.0, rng) is (not safe)

    def test_exactly_one_draw(self):
        a, b = random.Random(3), random.Random(3)
        observe(GroundTruth(True), 0.8, a)
        b.random()
        assert a.random() == b.random()

    def test_accuracy_frequency(self):
        rng = random.Random(11)
        n = 20000
        hits = sum(observe(GroundTruth(False), 0.7, rng) is False for _ in range(n))
        assert abs(hits / n - 0.7) <= 3 * math.sqrt(0.21 / n)

    def test_overrides(self):
        cfg = PerceptionConfig(0.8, {2: 0.6})
        assert cfg.accuracy(2) == 0.6 and cfg.accuracy(0) == 0.8
        assert local_safety_check(2, GroundTruth(True), PerceptionConfig(0.8, {2: 1.0}), random.Random(0))

    @pytest.mark.parametrize("p", [-0.1, 1.5])
    def test_range(self, p):
        with pytest.raises(ValueError):
            PerceptionConfig(p)
        with pytest.raises(ValueError):
            observe(GroundTruth(True), p, random.Random(0))
