import numpy as np
import pytest

from cfreg import autodiff as ad
from cfreg.autodiff import Tape, Tensor
from cfreg.nn import (ArchConfig, ConfigError, LayerSpec, build_model, conv, dense, discriminate, dropout, flatten,
                      format_layers, forward, parse_layers, relu)
from cfreg.optim import AdamW, OptimHyper


@pytest.fixture
def model():
    return build_model(ArchConfig(), (16,), 10, seed=3)


def fill_grads(model, group, value=1.0):
    for p in model.group(group).values():
        p.grad = np.full_like(p.value, value)


class TestLayerSpec:
    def test_dense_shapes(self):
        m = build_model(ArchConfig(backbone=[dense(8, 4), relu()]), (8,), 3, seed=0)
        assert m.params["backbone.0.weight"].value.shape == (8, 4)
        assert m.params["backbone.0.bias"].value.shape == (4,)

    def test_width_mismatch_names_layers(self):
        with pytest.raises(ConfigError, match="backbone"):
            build_model(ArchConfig(backbone=[dense(8, 4), relu(), dense(5, 2)]), (8,), 3, seed=0)

    def test_invalid_dropout_rate(self):
        with pytest.raises(ConfigError):
            dropout(1.0)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            LayerSpec("pool", ())

    def test_parse_format_round_trip(self):
        text = "conv(1,4,3,1,1) relu flatten dense(256,32) relu dropout(0.25)"
        layers = parse_layers(text)
        assert [l.kind for l in layers] == ["conv", "relu", "flatten", "dense", "relu", "dropout"]
        assert parse_layers(format_layers(layers)) == layers


class TestBuild:
    def test_same_seed_bitwise_identical(self):
        a = build_model(ArchConfig(), (16,), 10, seed=7).snapshot()
        b = build_model(ArchConfig(), (16,), 10, seed=7).snapshot()
        assert a.keys() == b.keys()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_different_seed_differs(self):
        a = build_model(ArchConfig(), (16,), 10, seed=7).snapshot()
        b = build_model(ArchConfig(), (16,), 10, seed=8).snapshot()
        assert not np.array_equal(a["backbone.0.weight"], b["backbone.0.weight"])

    def test_biases_start_at_zero(self, model):
        for name, p in model.params.items():
            if name.endswith("bias"):
                assert not p.value.any()

    def test_xavier_bound(self, model):
        w = model.params["backbone.0.weight"].value
        assert np.abs(w).max() <= np.sqrt(6.0 / (16 + 128))

    def test_default_registry(self, model):
        assert model.feature_dim == 64
        g = set(model.group("G"))
        d = set(model.group("D"))
        assert all(n.startswith(("backbone.", "task_head.")) for n in g)
        assert all(n.startswith("desc_head.") for n in d)
        assert g | d == set(model.params) and not g & d
        assert model.params["desc_head.2.weight"].value.shape == (64, 1)

    def test_desc_width_does_not_change_g_init(self):
        a = build_model(ArchConfig(desc_channel=32), (16,), 10, seed=1).snapshot("G")
        b = build_model(ArchConfig(desc_channel=128), (16,), 10, seed=1).snapshot("G")
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_conv_backbone(self):
        arch = ArchConfig(backbone=[conv(1, 4, 3, 1, 1), relu(), flatten(), dense(4 * 8 * 8, 16), relu()])
        m = build_model(arch, (1, 8, 8), 4, seed=0)
        feats, logits = forward(m, np.zeros((3, 1, 8, 8)))
        assert feats.shape == (3, 16) and logits.shape == (3, 4)


class TestForward:
    def test_eval_twice_identical(self, model):
        x = np.random.default_rng(0).standard_normal((5, 16))
        a = forward(model, x)[1].data
        b = forward(model, x)[1].data
        assert a.tobytes() == b.tobytes()

    def test_train_without_dropout_equals_eval(self, model):
        x = np.random.default_rng(0).standard_normal((5, 16))
        tr = forward(model, x, "train", np.random.default_rng(1))[1].data
        assert tr.tobytes() == forward(model, x)[1].data.tobytes()

    def test_dropout_mask_reproducible_and_scaled(self):
        m = build_model(ArchConfig(backbone=[dropout(0.5)]), (50,), 2, seed=0)
        a = forward(m, np.ones((4, 50)), "train", np.random.default_rng(9))[0].data
        b = forward(m, np.ones((4, 50)), "train", np.random.default_rng(9))[0].data
        assert a.tobytes() == b.tobytes()
        assert set(np.unique(a)) == {0.0, 2.0}

    def test_dropout_survival_frequency(self):
        rate = 0.3
        m = build_model(ArchConfig(backbone=[dropout(rate)]), (1000,), 2, seed=0)
        feats, _ = forward(m, np.ones((100, 1000)), "train", np.random.default_rng(5))
        survived = feats.data != 0
        assert abs(survived.mean() - (1 - rate)) < 0.01
        np.testing.assert_allclose(feats.data[survived], 1 / (1 - rate))

    def test_dropout_off_in_eval(self):
        m = build_model(ArchConfig(backbone=[dropout(0.5)]), (10,), 2, seed=0)
        np.testing.assert_array_equal(forward(m, np.ones((2, 10)))[0].data, np.ones((2, 10)))

    def test_features_precede_task_dropout(self):
        m = build_model(ArchConfig(dropout=0.9), (16,), 4, seed=0)
        x = np.random.default_rng(0).standard_normal((8, 16))
        f_train = forward(m, x, "train", np.random.default_rng(0))[0].data
        np.testing.assert_array_equal(f_train, forward(m, x)[0].data)

    def test_wrong_input_shape(self, model):
        with pytest.raises(ad.DimensionError):
            forward(model, np.zeros((2, 15)))


class TestDiscriminate:
    def test_zero_features_give_bias_response(self, model):
        scores = discriminate(model, Tensor(np.zeros((3, 64))))
        np.testing.assert_array_equal(scores.data, np.zeros((3, 1)))

    def test_shape(self, model):
        assert discriminate(model, Tensor(np.ones((7, 64)))).shape == (7, 1)

    def test_deterministic(self, model):
        f = Tensor(np.random.default_rng(0).standard_normal((4, 64)))
        assert discriminate(model, f).data.tobytes() == discriminate(model, f).data.tobytes()

    def test_width_checked(self, model):
        with pytest.raises(ad.DimensionError):
            discriminate(model, Tensor(np.ones((2, 63))))


class TestGroupIsolation:
    def test_step_on_d_leaves_g(self, model):
        before = model.snapshot("G")
        fill_grads(model, "D")
        model.apply_grads("D", AdamW(OptimHyper(lr=0.1, weight_decay=0.1)))
        after = model.snapshot("G")
        assert all(before[k].tobytes() == after[k].tobytes() for k in before)

    def test_step_on_g_leaves_d(self, model):
        before = model.snapshot("D")
        fill_grads(model, "G")
        model.apply_grads("G", AdamW(OptimHyper(lr=0.1, weight_decay=0.1)))
        after = model.snapshot("D")
        assert all(before[k].tobytes() == after[k].tobytes() for k in before)

    def test_zero_then_accumulate_equals_fresh_backward(self, model):
        x = np.random.default_rng(0).standard_normal((4, 16))
        y = np.array([0, 1, 2, 3])

        def grads():
            tape = Tape()
            params = model.bind(tape, groups=("G",))
            loss = ad.softmax_cross_entropy(forward(model, x, params=params)[1], y)
            return ad.backward(tape, loss), params

        fill_grads(model, "G", 123.0)
        g, params = grads()
        model.zero_grads("G")
        model.accumulate(g, params, "G")
        for name, p in model.group("G").items():
            np.testing.assert_array_equal(p.grad, g[params[name].node_id])

    def test_bind_only_watches_requested_group(self, model):
        tape = Tape()
        params = model.bind(tape, groups=("D",))
        assert all(params[n].tracked == n.startswith("desc_head") for n in params)

    def test_unknown_group(self, model):
        with pytest.raises(ConfigError):
            model.group("X")
