import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfreg import autodiff as ad
from cfreg.autodiff import ContractError, Tape, Tensor, grad_check
from cfreg.consistent import (CFConfig, FeatureHistoryBuffer, cf_active, cf_step, generator_reg_term,
                              hinge_disc_loss, push_history, sample_history)
from cfreg.data import SIDE_A, SIDE_B
from cfreg.nn import ArchConfig, ConfigError, build_model, dense, discriminate, forward, relu
from cfreg.optim import AdamW, OptimHyper


def hinge(a, b):
    return hinge_disc_loss(Tensor(np.asarray(a, float).reshape(-1, 1)), Tensor(np.asarray(b, float).reshape(-1, 1))).item()


@pytest.fixture
def toy():
    return build_model(ArchConfig(backbone=[dense(6, 8), relu()], desc_channel=16), (6,), 3, seed=0)


class TestHinge:
    def test_margins_met(self):
        assert hinge([1.0], [-1.0]) == 0.0

    def test_zero_scores(self):
        assert hinge([0.0], [0.0]) == 2.0

    def test_hand_evaluation(self):
        assert hinge([2.0, -1.0], [0.5]) == 2.5

    def test_empty_side(self):
        with pytest.raises((ContractError, ad.DimensionError)):
            hinge_disc_loss(Tensor(np.zeros((0, 1))), Tensor(np.zeros((1, 1))))

    def test_formula_on_random_vectors(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            a = rng.standard_normal(rng.integers(1, 20)) * 2
            b = rng.standard_normal(rng.integers(1, 20)) * 2
            want = np.maximum(0, 1 - a).mean() + np.maximum(0, 1 + b).mean()
            assert abs(hinge(a, b) - want) <= 1e-12

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.lists(st.floats(-10, 10), min_size=1, max_size=8))
    def test_nonnegative(self, a, b):
        val = hinge(a, b)
        assert val >= 0
        if min(a) >= 1 and max(b) <= -1:
            assert val == 0


class TestGeneratorTerm:
    def test_default_sign(self):
        assert generator_reg_term(Tensor([[1.0], [1.0]]), CFConfig()).item() == -1.0

    @pytest.mark.parametrize("literal", [False, True])
    def test_zero_score(self, literal):
        assert generator_reg_term(Tensor([[0.0]]), CFConfig(literal_penalty_sign=literal)).item() == 0.0

    def test_literal_gradient_is_exact_negation(self):
        s = np.random.default_rng(1).standard_normal((5, 1))
        grads = []
        for literal in (False, True):
            tape = Tape()
            t = tape.watch(s.copy())
            grads.append(ad.backward(tape, generator_reg_term(t, CFConfig(literal_penalty_sign=literal)))[t.node_id])
        np.testing.assert_array_equal(grads[0], -grads[1])

    def test_weighted_penalty_gradient_wrt_backbone(self, toy):
        x = np.random.default_rng(2).standard_normal((5, 6))
        cfg = CFConfig()

        for name in toy.group("G"):
            if not name.startswith("backbone"):
                continue

            def f(t, name=name):
                params = toy.bind()
                params[name] = t
                feats, _ = forward(toy, x, params=params)
                return ad.scalar_mul(generator_reg_term(discriminate(toy, feats, params), cfg), 0.1)

            assert grad_check(f, toy.params[name].value) < 1e-4


class TestHistoryBuffer:
    def test_fifo_eviction(self):
        buf = FeatureHistoryBuffer(2)
        for v in (1.0, 2.0, 3.0):
            push_history(buf, SIDE_A, np.full((1, 2), v))
        assert [q[0, 0] for q in buf.queue(SIDE_A)] == [2.0, 3.0]

    def test_empty_sample_is_none(self):
        assert sample_history(FeatureHistoryBuffer(3), SIDE_B, 0) is None

    def test_capacity_zero(self):
        buf = FeatureHistoryBuffer(0)
        buf.push(SIDE_A, np.ones((2, 2)))
        assert len(buf) == 0 and buf.sample(SIDE_A, 0) is None

    def test_rejects_tracked_features(self):
        tape = Tape()
        with pytest.raises(ContractError):
            FeatureHistoryBuffer(2).push(SIDE_A, tape.watch(np.ones((1, 2))))

    def test_stores_copies(self):
        buf = FeatureHistoryBuffer(2)
        x = np.ones((1, 2))
        buf.push(SIDE_A, x)
        x[:] = 7
        assert buf.queue(SIDE_A)[0][0, 0] == 1.0

    def test_sides_independent(self):
        buf = FeatureHistoryBuffer(2)
        buf.push(SIDE_A, np.ones((1, 1)))
        assert buf.sample(SIDE_B, 0) is None

    def test_sample_seeded(self):
        buf = FeatureHistoryBuffer(10)
        for v in range(10):
            buf.push(SIDE_A, np.full((1, 1), float(v)))
        assert buf.sample(SIDE_A, 5)[0, 0] == buf.sample(SIDE_A, 5)[0, 0]

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 6), st.lists(st.tuples(st.sampled_from([SIDE_A, SIDE_B]), st.integers(-50, 50)), max_size=30))
    def test_fifo_property(self, capacity, pushes):
        buf = FeatureHistoryBuffer(capacity)
        for side, v in pushes:
            buf.push(side, np.full((1, 1), float(v)))
        for side in (SIDE_A, SIDE_B):
            expect = [v for s, v in pushes if s == side][-capacity:] if capacity else []
            assert [q[0, 0] for q in buf.queue(side)] == expect


class TestSchedule:
    def test_before_warm_up(self):
        assert cf_active(0, CFConfig()) == (True, False)

    def test_warm_up_inclusive(self):
        assert cf_active(1600, CFConfig()).gen_penalized

    def test_shut_off_exclusive(self):
        cfg = CFConfig(shut_off=5000)
        assert cf_active(4999, cfg) == (True, True)
        assert cf_active(5000, cfg) == (False, False)

    def test_shut_off_must_follow_warm_up(self):
        with pytest.raises(ConfigError):
            CFConfig(warm_up=100, shut_off=100)

    @pytest.mark.parametrize("bad", [dict(p=0.0), dict(p=1.0), dict(weight=-1), dict(history_len=-1),
                                     dict(desc_channel=0), dict(warm_up=-1)])
    def test_invalid_config(self, bad):
        with pytest.raises(ConfigError):
            CFConfig(**bad)


class TestCfStep:
    def test_backbone_untouched(self, toy):
        rng = np.random.default_rng(0)
        before = toy.snapshot("G")
        feats = forward(toy, rng.standard_normal((10, 6)))[0]
        sides = np.array([0, 1] * 5)
        loss = cf_step(toy, feats, sides, FeatureHistoryBuffer(5), CFConfig(), AdamW(OptimHyper(lr=1e-2)), rng)
        assert loss is not None
        after = toy.snapshot("G")
        assert all(before[k].tobytes() == after[k].tobytes() for k in before)

    def test_d_moves(self, toy):
        rng = np.random.default_rng(0)
        before = toy.snapshot("D")
        feats = forward(toy, rng.standard_normal((10, 6)))[0]
        cf_step(toy, feats, np.array([0, 1] * 5), FeatureHistoryBuffer(5), CFConfig(), AdamW(OptimHyper()), rng)
        assert any(not np.array_equal(before[k], toy.params[k].value) for k in before)

    def test_skipped_without_one_side(self, toy):
        buf = FeatureHistoryBuffer(5)
        feats = np.ones((4, 8))
        before = toy.snapshot("D")
        assert cf_step(toy, feats, np.zeros(4, dtype=int), buf, CFConfig(), AdamW(OptimHyper()), np.random.default_rng(0)) is None
        assert all(np.array_equal(before[k], toy.params[k].value) for k in before)
        assert len(buf.queue(SIDE_A)) == 1

    def test_history_fills_missing_side(self, toy):
        buf = FeatureHistoryBuffer(5)
        buf.push(SIDE_B, -np.ones((3, 8)))
        loss = cf_step(toy, np.ones((4, 8)), np.zeros(4, dtype=int), buf, CFConfig(), AdamW(OptimHyper()),
                       np.random.default_rng(0))
        assert loss is not None

    def test_history_sampled_before_push(self, toy):
        # with an empty history and one side missing, the current batch must not stand in for history
        buf = FeatureHistoryBuffer(5)
        assert cf_step(toy, np.ones((2, 8)), np.array([1, 1]), buf, CFConfig(), AdamW(OptimHyper()),
                       np.random.default_rng(0)) is None

    def test_perfect_separation_is_fixed_point(self):
        m = build_model(ArchConfig(backbone=[dense(2, 2), relu()], desc_channel=2), (2,), 2, seed=0)
        m.params["desc_head.0.weight"].value[:] = [[1.0, -1.0], [0.0, 0.0]]
        m.params["desc_head.2.weight"].value[:] = [[1.0], [-1.0]]
        feats = np.array([[5.0, 0.0], [5.0, 0.0], [-5.0, 0.0], [-5.0, 0.0]])
        before = m.snapshot("D")
        loss = cf_step(m, feats, np.array([0, 0, 1, 1]), FeatureHistoryBuffer(0), CFConfig(history_len=0),
                       AdamW(OptimHyper()), np.random.default_rng(0))
        assert loss == 0.0
        assert all(before[k].tobytes() == m.params[k].value.tobytes() for k in before)

    def test_separable_features_learned(self):
        m = build_model(ArchConfig(backbone=[dense(8, 8), relu()]), (8,), 2, seed=0)
        rng = np.random.default_rng(0)
        buf = FeatureHistoryBuffer(100)
        opt = AdamW(OptimHyper(lr=1e-3))
        sides = np.array([SIDE_A] * 25 + [SIDE_B] * 25)
        for _ in range(200):
            feats = np.concatenate([rng.normal(3, 1, (25, 8)), rng.normal(-3, 1, (25, 8))])
            loss = cf_step(m, feats, sides, buf, CFConfig(), opt, rng)
        assert loss < 0.1
