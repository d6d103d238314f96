import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfreg import data as D
from cfreg.nn import ArchConfig, ConfigError, build_model, conv, dense, flatten, relu
from cfreg.optim import OptimHyper
from cfreg.trainer import TrainConfig, train_run


def logistic_probe_accuracy(train, test, steps=500, lr=0.5):
    """Multinomial logistic regression by full-batch gradient descent; the linear-separability oracle."""
    x, y = train.inputs, train.labels
    k = train.num_classes
    w = np.zeros((x.shape[1], k))
    b = np.zeros(k)
    onehot = np.eye(k)[y]
    for _ in range(steps):
        z = x @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        g = (p - onehot) / len(y)
        w -= lr * x.T @ g
        b -= lr * g.sum(axis=0)
    return float(((test.inputs @ w + b).argmax(axis=1) == test.labels).mean())


def same(a: D.Dataset, b: D.Dataset) -> bool:
    return a.inputs.tobytes() == b.inputs.tobytes() and a.labels.tobytes() == b.labels.tobytes()


class TestGaussianClusters:
    def test_well_separated_is_linearly_separable(self):
        ds = D.gen_gaussian_clusters(2, 8, 200, 10.0, seed=0)
        assert logistic_probe_accuracy(ds, ds) > 0.99

    def test_zero_separation_is_chance(self):
        accs = []
        for seed in range(5):
            ds = D.gen_gaussian_clusters(10, 8, 200, 0.0, seed=seed)
            tr, te = D.train_val_split(ds, 100, seed)
            accs.append(logistic_probe_accuracy(tr, te))
        assert abs(np.mean(accs) - 0.1) < 0.05

    def test_seed_determinism(self):
        assert same(D.gen_gaussian_clusters(4, 5, 50, 3.0, 9), D.gen_gaussian_clusters(4, 5, 50, 3.0, 9))
        assert not same(D.gen_gaussian_clusters(4, 5, 50, 3.0, 9), D.gen_gaussian_clusters(4, 5, 50, 3.0, 10))

    def test_balanced_and_standardized(self):
        ds = D.gen_gaussian_clusters(4, 6, 100, 3.0, 0)
        assert np.bincount(ds.labels).tolist() == [25] * 4
        np.testing.assert_allclose(ds.inputs.mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(ds.inputs.std(axis=0), 1, atol=1e-12)

    def test_rejects_single_class(self):
        with pytest.raises(ConfigError):
            D.gen_gaussian_clusters(1, 2, 10, 1.0, 0)


class TestPatternImages:
    def test_noiseless_within_class_identical(self):
        ds = D.gen_pattern_images(4, 8, 40, seed=0, noise=0.0)
        for k in range(4):
            imgs = ds.inputs[ds.labels == k]
            assert (imgs == imgs[0]).all()

    def test_templates_distinct(self):
        ts = [D.pattern_template(k, 8) for k in range(8)]
        assert len({t.tobytes() for t in ts}) == 8

    def test_seed_determinism(self):
        assert same(D.gen_pattern_images(4, 8, 40, 3), D.gen_pattern_images(4, 8, 40, 3))

    def test_shape(self):
        assert D.gen_pattern_images(3, 8, 12, 0).inputs.shape == (12, 1, 8, 8)

    def test_tiny_cnn_learns_patterns(self):
        ds = D.gen_pattern_images(4, 8, 400, seed=0)
        arch = ArchConfig(backbone=[conv(1, 4, 3, 1, 1), relu(), flatten(), dense(256, 32), relu()])
        model = build_model(arch, (1, 8, 8), 4, seed=0)
        cfg = TrainConfig(epochs=30, batch_size=50, optim=OptimHyper(lr=1e-3))
        recs = train_run(model, ds, ds, cfg)
        assert recs[-1].train_top1 > 0.9


class TestLabelCorruption:
    def test_randomized_fraction_unchanged(self):
        ds = D.gen_gaussian_clusters(10, 2, 10_000, 1.0, 0)
        rnd = D.randomize_labels(ds, 1)
        assert abs((rnd.labels == ds.labels).mean() - 0.1) < 0.02

    def test_randomize_deterministic(self):
        ds = D.gen_gaussian_clusters(4, 2, 100, 1.0, 0)
        assert (D.randomize_labels(ds, 5).labels == D.randomize_labels(ds, 5).labels).all()

    def test_noise_rate_zero_unchanged(self):
        ds = D.gen_gaussian_clusters(4, 2, 100, 1.0, 0)
        assert (D.inject_label_noise(ds, 0.0, 1).labels == ds.labels).all()

    def test_noise_exact_count(self):
        ds = D.gen_gaussian_clusters(4, 2, 1000, 1.0, 0)
        assert (D.inject_label_noise(ds, 0.2, 1).labels != ds.labels).sum() == 200

    def test_noise_rate_one_changes_all(self):
        ds = D.gen_gaussian_clusters(4, 2, 100, 1.0, 0)
        assert (D.inject_label_noise(ds, 1.0, 1).labels != ds.labels).all()

    def test_inputs_untouched(self):
        ds = D.gen_gaussian_clusters(4, 2, 100, 1.0, 0)
        assert D.inject_label_noise(ds, 0.5, 1).inputs is ds.inputs

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 12), st.integers(12, 300), st.floats(0, 1), st.integers(0, 10**6))
    def test_noise_count_property(self, k, n, rate, seed):
        labels = np.arange(n) % k
        ds = D.Dataset(np.zeros((n, 1)), labels, k)
        noisy = D.inject_label_noise(ds, rate, seed)
        assert (noisy.labels != labels).sum() == round(rate * n)
        assert noisy.labels.min() >= 0 and noisy.labels.max() < k


class TestSplit:
    @pytest.mark.parametrize("n,p,na", [(10, 0.5, 5), (10, 0.8, 8), (10, 0.2, 2)])
    def test_sizes(self, n, p, na):
        s = D.split_ab(n, p, 0)
        assert len(s.a_index) == na and len(s.b_index) == n - na

    def test_deterministic(self):
        assert (D.split_ab(50, 0.3, 7).side == D.split_ab(50, 0.3, 7).side).all()

    def test_empty_side_rejected(self):
        with pytest.raises(ConfigError):
            D.split_ab(3, 0.1, 0)

    @pytest.mark.parametrize("p", [0.2, 0.5, 0.8])
    def test_per_sample_frequency_over_seeds(self, p):
        n = 20
        hits = np.zeros(n)
        for seed in range(1000):
            hits += D.split_ab(n, p, seed).side == D.SIDE_A
        assert np.abs(hits / 1000 - p).max() < 0.05

    def test_train_val_split_partitions(self):
        ds = D.gen_gaussian_clusters(3, 2, 30, 1.0, 0)
        tr, va = D.train_val_split(ds, 10, 0)
        rows = np.concatenate([tr.inputs, va.inputs])
        assert len(va) == 10 and len(tr) == 20
        assert sorted(map(tuple, rows)) == sorted(map(tuple, ds.inputs))


class TestBatches:
    def test_epoch_covers_dataset_once(self):
        ds = D.Dataset(np.arange(23.0)[:, None], np.zeros(23, dtype=int), 2)
        split = D.split_ab(23, 0.5, 0)
        seen = np.concatenate([x[:, 0] for x, _, _ in D.batches(ds, D.BatchPlan(0, 5), 0, split)])
        assert sorted(seen.tolist()) == list(range(23))

    def test_partial_last_batch_kept(self):
        ds = D.Dataset(np.arange(23.0)[:, None], np.zeros(23, dtype=int), 2)
        sizes = [len(y) for _, y, _ in D.batches(ds, D.BatchPlan(0, 5), 0, D.split_ab(23, 0.5, 0))]
        assert sizes == [5, 5, 5, 5, 3]

    def test_sides_follow_samples(self):
        ds = D.Dataset(np.arange(40.0)[:, None], np.zeros(40, dtype=int), 2)
        split = D.split_ab(40, 0.5, 3)
        for x, _, sides in D.batches(ds, D.BatchPlan(1, 7), 2, split):
            assert (split.side[x[:, 0].astype(int)] == sides).all()

    def test_epochs_reshuffle(self):
        plan = D.BatchPlan(0, 10)
        assert not (plan.permutation(50, 0) == plan.permutation(50, 1)).all()


class TestCsv:
    def test_round_trip(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("label,x0,x1\n0,1.5,2\n2,-1,0.25\n")
        ds = D.load_csv(p)
        assert ds.num_classes == 3
        np.testing.assert_array_equal(ds.inputs, [[1.5, 2.0], [-1.0, 0.25]])

    def test_bad_header(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("y,x0\n0,1\n1,2\n")
        with pytest.raises(ConfigError):
            D.load_csv(p)
