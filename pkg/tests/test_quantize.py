import itertools

import numpy as np
import pytest

from roundlab import network as net
from roundlab import quantize as Q
from roundlab.tensor_ops import matmul

from conftest import central_diff, rel_err


def make_spec(scale=1.0, bits=4):
    p = 2 ** (bits - 1) - 1
    return Q.QuantSpec(bits, scale, -(2 ** (bits - 1)), p)


def random_problem(rng, out_dim=None, in_dim=None, bits=4, with_ce=False, alpha=0.0,
                   lambda_p=0.01, w_scale=1.0):
    out_dim = out_dim or int(rng.integers(1, 5))
    in_dim = in_dim or int(rng.integers(1, 5))
    w = rng.normal(0, w_scale, size=(out_dim, in_dim))
    spec = Q.compute_scale(w, bits)
    nbatch = int(rng.integers(3, 9))
    x = rng.normal(0, 1.0, size=(in_dim, nbatch))
    kwargs = {}
    if alpha:
        xt = x + rng.normal(0, 0.5, size=x.shape)
        kwargs.update(h_stamped=Q.layer_hessian(xt), alpha=alpha)
    if with_ce:
        kwargs["ce"] = Q.CETerm(
            x=x,
            bias=rng.normal(0, 0.2, size=out_dim),
            targets=rng.integers(0, out_dim, size=nbatch),
            weight=1.0,
        )
    return Q.RoundingProblem(w=w, spec=spec, h_clean=Q.layer_hessian(x),
                             lambda_p=lambda_p, **kwargs), x


def exhaustive_optimum(problem, frozen_mask=None, frozen_values=None):
    """Brute-force best binary rounding respecting frozen entries."""
    shape = problem.w.shape
    size = problem.w.size
    free = np.ones(size, dtype=bool) if frozen_mask is None else ~frozen_mask.ravel()
    free_idx = np.flatnonzero(free)
    base = np.zeros(size)
    if frozen_mask is not None:
        base[frozen_mask.ravel()] = frozen_values.ravel()[frozen_mask.ravel()]
    best = (np.inf, None)
    for bits in itertools.product([0.0, 1.0], repeat=len(free_idx)):
        r = base.copy()
        r[free_idx] = bits
        loss = Q.hard_loss(problem, r.reshape(shape))
        if loss < best[0]:
            best = (loss, r.reshape(shape))
    return best


class TestScaleAndNearest:
    def test_scale_4bit(self):
        spec = Q.compute_scale(np.array([0.5, -1.0]), 4)
        assert spec.scale == pytest.approx(1 / 7)
        assert (spec.n, spec.p) == (-8, 7)

    def test_scale_8bit(self):
        spec = Q.compute_scale(np.array([1.0]), 8)
        assert spec.scale == pytest.approx(1 / 127)
        assert (spec.n, spec.p) == (-128, 127)

    def test_zero_weights_sentinel(self):
        spec = Q.compute_scale(np.zeros(5), 4)
        assert spec.scale == 1.0
        assert np.array_equal(Q.quantize_nearest(np.zeros(5), spec), np.zeros(5))

    def test_bits_out_of_range(self):
        with pytest.raises(ValueError):
            Q.compute_scale(np.ones(3), 9)
        with pytest.raises(ValueError):
            Q.compute_scale(np.ones(3), 1)

    def test_nearest_hand_case(self):
        spec = make_spec(scale=1 / 7)
        assert Q.quantize_nearest(np.array([0.3]), spec)[0] == pytest.approx(2 / 7)

    def test_nearest_clips(self):
        spec = make_spec(scale=1.0)
        assert Q.quantize_nearest(np.array([9.4]), spec)[0] == 7.0
        assert Q.quantize_nearest(np.array([-9.4]), spec)[0] == -8.0

    def test_exact_multiple_is_fixed_point(self):
        spec = make_spec(scale=0.25)
        w = np.array([-1.25, 0.5, 1.75])
        assert np.array_equal(Q.quantize_nearest(w, spec), w)

    def test_ties_round_half_away_from_zero(self):
        spec = make_spec(scale=1.0)
        assert Q.quantize_nearest(np.array([2.5]), spec)[0] == 3.0
        assert Q.quantize_nearest(np.array([-2.5]), spec)[0] == -3.0


class TestDecomposition:
    def test_hand_cases(self):
        spec = make_spec(scale=1.0)
        floors, r = Q.rounding_decompose(np.array([2.6, 2.4]), spec)
        assert np.array_equal(floors, np.array([2.0, 2.0]))
        assert np.array_equal(r, np.array([1.0, 0.0]))

    def test_reconstruction_matches_nearest_bitwise(self, rng):
        for bits in range(2, 9):
            w = rng.normal(0, 2.0, size=100_000 // 7)
            spec = Q.compute_scale(w, bits)
            floors, r = Q.rounding_decompose(w, spec)
            recon = Q.reconstruct(floors, r, spec)
            assert np.array_equal(recon, Q.quantize_nearest(w, spec))

    def test_tie_decomposition_consistent(self):
        # exact .5 fractions: R must match the half-away-from-zero choice
        spec = make_spec(scale=1.0)
        w = np.array([2.5, -2.5, 0.5, -0.5])
        floors, r = Q.rounding_decompose(w, spec)
        assert np.array_equal(Q.reconstruct(floors, r, spec), Q.quantize_nearest(w, spec))


class TestHessianAndLosses:
    def test_hessian_single_sample(self):
        h = Q.layer_hessian(np.array([1.0, 2.0]))
        assert np.array_equal(h, np.array([[2.0, 4.0], [4.0, 8.0]]))

    def test_hessian_zero_activations(self):
        assert np.array_equal(Q.layer_hessian(np.zeros((3, 4))), np.zeros((3, 3)))

    def test_hessian_symmetric_psd(self, rng):
        for _ in range(10):
            x = rng.normal(size=(int(rng.integers(2, 6)), int(rng.integers(1, 8))))
            h = Q.layer_hessian(x)
            assert np.allclose(h, h.T)
            assert np.min(np.linalg.eigvalsh(h)) >= -1e-10

    def test_hessian_empty_batch(self):
        with pytest.raises(ValueError):
            Q.layer_hessian(np.zeros((3, 0)))

    def test_loss_accuracy_identity(self, rng):
        w = rng.normal(size=(2, 3))
        assert Q.loss_accuracy(w, w, rng.normal(size=(3, 4))) == 0.0

    def test_loss_accuracy_hand_case(self):
        assert Q.loss_accuracy(np.array([[1.0]]), np.array([[1.1]]),
                               np.array([2.0])) == pytest.approx(0.04)

    def test_loss_accuracy_equals_quadratic_form(self, rng):
        for _ in range(20):
            out_dim, in_dim, nb = (int(rng.integers(1, 6)) for _ in range(3))
            w = rng.normal(size=(out_dim, in_dim))
            w_hat = w + rng.normal(0, 0.1, size=w.shape)
            x = rng.normal(size=(in_dim, nb + 1))
            h = Q.layer_hessian(x)
            dw = w_hat - w
            quad = 0.5 * float(np.sum(dw * matmul(dw, h)))
            assert Q.loss_accuracy(w, w_hat, x) == pytest.approx(quad, abs=1e-9)

    def test_penalty_anchors(self):
        for beta in (2.0, 7.5, 20.0):
            assert Q.loss_penalty(np.array([0.0]), beta) == 0.0
            assert Q.loss_penalty(np.array([1.0]), beta) == 0.0
            assert Q.loss_penalty(np.array([0.5]), beta) == 1.0

    def test_penalty_range(self, rng):
        v = rng.uniform(0, 1, size=50)
        val = Q.loss_penalty(v, 4.0)
        assert 0.0 <= val <= 50.0


class TestGradient:
    def test_matches_finite_differences(self, rng):
        for variant in ({}, {"with_ce": True}, {"alpha": 0.05}):
            for _ in range(8):
                problem, _ = random_problem(rng, **variant)
                for _ in range(20):
                    v = rng.uniform(0.05, 0.95, size=problem.w.shape)
                    beta = float(rng.uniform(2.0, 12.0))
                    _, grad = Q.rounding_loss_and_grad(problem, v, beta)
                    fd = central_diff(
                        lambda vv: Q.rounding_loss_and_grad(problem, vv, beta)[0],
                        v.copy(),
                    )
                    assert rel_err(grad, fd, floor=1.0) < 1e-4

    def test_frozen_entries_zero_grad(self, rng):
        problem, _ = random_problem(rng, out_dim=2, in_dim=3)
        problem.frozen_mask = np.zeros((2, 3), dtype=bool)
        problem.frozen_mask[0, 1] = True
        problem.frozen_values = np.ones((2, 3))
        _, grad = Q.rounding_loss_and_grad(problem, problem.init_v(), 4.0)
        assert grad[0, 1] == 0.0


class TestOptimizeRounding:
    def test_single_weight_rounds_down(self):
        spec = make_spec(scale=1.0)
        problem = Q.RoundingProblem(
            w=np.array([[0.45]]), spec=spec, h_clean=Q.layer_hessian(np.array([1.0]))
        )
        result = Q.optimize_rounding(problem, Q.PenaltySchedule(steps=300))
        assert result.r[0, 0] == 0.0
        assert result.w_hat[0, 0] == 0.0

    def test_two_weight_compensation(self):
        # best configuration rounds exactly one of the two 0.4s up
        spec = make_spec(scale=1.0)
        x = np.array([[1.0], [1.0]])
        problem = Q.RoundingProblem(
            w=np.array([[0.4, 0.4]]), spec=spec, h_clean=Q.layer_hessian(x)
        )
        result = Q.optimize_rounding(problem, Q.PenaltySchedule(steps=400))
        assert result.r.sum() == 1.0
        assert result.loss_final == pytest.approx(0.04, abs=1e-9)
        assert result.loss_initial == pytest.approx(0.64, abs=1e-9)

    def test_reaches_exhaustive_optimum_benign(self, rng):
        for _ in range(25):
            problem, _ = random_problem(rng, out_dim=int(rng.integers(1, 5)),
                                        in_dim=int(rng.integers(1, 5)))
            result = Q.optimize_rounding(problem, Q.PenaltySchedule(steps=600))
            best_loss, _ = exhaustive_optimum(problem)
            assert result.loss_final <= best_loss + 1e-6

    def test_never_worse_than_nearest(self, rng):
        for _ in range(20):
            problem, x = random_problem(rng)
            result = Q.optimize_rounding(problem, Q.PenaltySchedule(steps=300))
            la_opt = Q.loss_accuracy(problem.w, result.w_hat, x)
            la_near = Q.loss_accuracy(problem.w, Q.quantize_nearest(problem.w, problem.spec), x)
            assert la_opt <= la_near + 1e-9

    def test_binarization(self, rng):
        # trained-network weight scales: max|W| well below 1, so the corner
        # penalty dominates near the end of the anneal
        for _ in range(10):
            problem, _ = random_problem(rng, out_dim=3, in_dim=6, w_scale=0.25)
            result = Q.optimize_rounding(problem, Q.PenaltySchedule(steps=1000))
            assert result.binarization_residual < 0.05

    def test_envelope(self, rng):
        for _ in range(10):
            problem, _ = random_problem(rng)
            result = Q.optimize_rounding(problem, Q.PenaltySchedule(steps=200))
            assert np.all(np.abs(result.w_hat - problem.w) < problem.spec.scale)


class TestModelQuantization:
    def test_identity_quantizable_fixed_point(self, rng):
        bits = 4
        p = 2 ** (bits - 1) - 1
        scale = 1.0 / p
        codes = rng.integers(-p, p + 1, size=(3, 4)).astype(np.float64)
        codes.flat[0] = p  # pin the max so compute_scale reproduces this scale
        w = scale * codes
        model = net.Model([net.dense(w)], (4,), 3)
        calib = rng.uniform(0, 1, size=(6, 4))
        q, reports = Q.quantize_model_benign(model, calib, bits, Q.PenaltySchedule(steps=50))
        assert np.array_equal(q.layers[0].weights, w)
        assert reports[0].la_final == pytest.approx(0.0, abs=1e-18)

    def test_nearest_model_baseline(self, rng):
        model = net.Model([net.dense(rng.normal(size=(3, 4)))], (4,), 3)
        q = Q.quantize_model_nearest(model, 4)
        spec = Q.compute_scale(model.layers[0].weights, 4)
        assert np.all(np.abs(q.layers[0].weights - model.layers[0].weights) <= spec.scale / 2)

    def test_layer_order_and_reports(self, rng):
        layers = [
            net.dense(rng.normal(size=(5, 4))),
            net.relu(),
            net.dense(rng.normal(size=(2, 5))),
        ]
        model = net.Model(layers, (4,), 2).validate()
        calib = rng.uniform(0, 1, size=(8, 4))
        q, reports = Q.quantize_model_benign(model, calib, 4, Q.PenaltySchedule(steps=100))
        assert [r.index for r in reports] == [0, 2]
        for r in reports:
            assert r.la_final <= r.la_nearest + 1e-9
            assert r.scale > 0
