import numpy as np
import pytest

from roundlab import defense as F
from roundlab import network as net
from roundlab import quantize as Q


TABLE_NORMS = [8.97, 28.16, 30.51, 29.33, 31.93, 22.44, 45.63, 36.69, 34.74, 19.56]


class TestAnomalyIndex:
    def test_published_reference_values(self):
        idx, degenerate = F.anomaly_index(TABLE_NORMS)
        assert not degenerate
        assert idx[0] == pytest.approx(2.44, abs=0.01)
        assert idx[6] == pytest.approx(1.83, abs=0.01)
        assert idx[9] == pytest.approx(1.21, abs=0.01)

    def test_all_reference_rows(self):
        expected = [2.44, 0.21, 0.07, 0.07, 0.23, 0.87, 1.83, 0.79, 0.56, 1.21]
        idx, _ = F.anomaly_index(TABLE_NORMS)
        assert np.max(np.abs(idx - expected)) < 0.015

    def test_scale_invariance(self, rng):
        norms = rng.uniform(1, 50, size=8)
        idx1, _ = F.anomaly_index(norms)
        idx2, _ = F.anomaly_index(norms * 37.5)
        assert np.allclose(idx1, idx2)

    def test_degenerate_mad(self):
        idx, degenerate = F.anomaly_index([5.0, 5.0, 5.0, 5.0])
        assert degenerate
        assert np.array_equal(idx, np.zeros(4))

    def test_too_few_labels(self):
        with pytest.raises(ValueError):
            F.anomaly_index([1.0, 2.0])


def tiny_model(rng, num_classes=3, shape=(1, 4, 4)):
    in_dim = int(np.prod(shape))
    layers = [net.flatten(),
              net.dense(rng.normal(0, 0.5, size=(8, in_dim))), net.relu(),
              net.dense(rng.normal(0, 0.5, size=(num_classes, 8)))]
    return net.Model(layers, shape, num_classes).validate()


class TestInversion:
    def test_hardwired_label_collapses_mask(self, rng):
        # model that always answers "label 1" regardless of input: the zero
        # mask already satisfies the objective, sparsity shrinks it there
        w = np.zeros((3, 16))
        b = np.array([0.0, 30.0, 0.0])
        model = net.Model([net.flatten(), net.dense(w, b)], (1, 4, 4), 3).validate()
        probes = rng.uniform(0, 1, size=(16, 1, 4, 4))
        out = F.invert_trigger(model, 1, probes, iters=300, seed=0)
        assert out.l1 < 0.5
        assert out.final_ce < 1e-6

    def test_deterministic_under_seed(self, rng):
        model = tiny_model(rng)
        probes = rng.uniform(0, 1, size=(8, 1, 4, 4))
        a = F.invert_trigger(model, 0, probes, iters=50, seed=3)
        b = F.invert_trigger(model, 0, probes, iters=50, seed=3)
        assert a.l1 == b.l1
        assert np.array_equal(a.mask, b.mask)

    def test_run_all_labels_shapes(self, rng):
        model = tiny_model(rng)
        probes = rng.uniform(0, 1, size=(8, 1, 4, 4))
        res = F.run_trigger_inversion(model, probes, iters=30, seed=0)
        assert len(res.outcomes) == 3
        assert res.l1_norms.shape == (3,)
        assert res.indices.shape == (3,)
        assert all(0 <= l for l in res.l1_norms)


class TestWeightDiff:
    def test_nearest_quantized_has_zero_violations(self, rng):
        for bits in (2, 4, 8):
            model = tiny_model(rng)
            q = Q.quantize_model_nearest(model, bits)
            scales = [Q.compute_scale(model.layers[i].weights, bits).scale
                      for i in model.weighted_indices()]
            report = F.weight_diff_detector(model, q, scales)
            assert all(l.violation_fraction == 0.0 for l in report.layers)
            assert report.flagged_layers == []

    def test_forced_violation_flagged(self, rng):
        model = tiny_model(rng)
        q = Q.quantize_model_nearest(model, 4)
        scales = [Q.compute_scale(model.layers[i].weights, 4).scale
                  for i in model.weighted_indices()]
        li = model.weighted_indices()[0]
        # push 5% of the first layer a full step away from nearest
        w = q.layers[li].weights
        flat = w.ravel()
        k = max(1, int(0.05 * flat.size))
        flat[:k] += scales[0]
        report = F.weight_diff_detector(model, q, scales)
        assert report.layers[0].violation_fraction > 0.01
        assert li in report.flagged_layers

    def test_architecture_mismatch(self, rng):
        a = tiny_model(rng)
        b = net.Model([net.dense(rng.normal(size=(3, 16)))], (16,), 3)
        with pytest.raises(Exception):
            F.weight_diff_detector(a, b, [0.1])

    def test_histogram_counts_weights(self, rng):
        model = tiny_model(rng)
        q = Q.quantize_model_nearest(model, 4)
        scales = [Q.compute_scale(model.layers[i].weights, 4).scale
                  for i in model.weighted_indices()]
        report = F.weight_diff_detector(model, q, scales)
        for pos, li in enumerate(model.weighted_indices()):
            assert sum(report.layers[pos].histogram) == model.layers[li].weights.size
