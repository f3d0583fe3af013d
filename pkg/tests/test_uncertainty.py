import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal, ortho_group

from mnn.activations import ActivationKind
from mnn.data import gen_sign_product
from mnn.network import LayerSpec, MnnModel, build_specs, forward, init_params
from mnn.uncertainty import (DegenerateSeparability, PredictionMoments, deviation_profile,
                             deviation_rate, entropies, evaluate_dataset, fgsm_attack,
                             gaussian_entropy, gradient_masking_defense, infinity_norm, layer_entropy,
                             logistic_entropy_approx, msp, predict, propagate_deviation,
                             regression_metrics, separability, softmax_entropy)

from oracles import deviation_rate_direct

H = ActivationKind.heaviside()
LOG_2PI = math.log(2 * math.pi)


class TestEntropy:
    def test_identity(self):
        r = gaussian_entropy(np.eye(2))
        assert r.entropy == pytest.approx(2.83788, abs=1e-5)
        assert r.entropy == pytest.approx(1 + LOG_2PI, rel=1e-15) and r.effective_dim == 2

    def test_rank_deficient(self):
        r = gaussian_entropy(np.diag([1.0, 0.0]))
        assert r.effective_dim == 1 and r.dropped_eigenvalues == 1
        assert r.entropy == pytest.approx(1.41894, abs=1e-5)

    @pytest.mark.parametrize("a", [0.1, 3.0, 50.0])
    def test_scaling(self, a):
        n = 4
        d = gaussian_entropy(a * np.eye(n)).entropy - gaussian_entropy(np.eye(n)).entropy
        assert d == pytest.approx(n / 2 * math.log(a), rel=1e-12)

    def test_matches_scipy(self):
        c = np.array([[2.0, 0.3, 0.1], [0.3, 1.0, -0.2], [0.1, -0.2, 0.7]])
        assert gaussian_entropy(c).entropy == pytest.approx(multivariate_normal(cov=c).entropy(), rel=1e-12)

    def test_all_zero_is_flagged(self):
        r = gaussian_entropy(np.zeros((3, 3)))
        assert r == (0.0, 0, 3, True)

    def test_accepts_prediction_moments(self):
        assert gaussian_entropy(PredictionMoments(np.zeros(2), np.eye(2))).effective_dim == 2

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            gaussian_entropy(np.array([[1.0, 0.5], [0.0, 1.0]]))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_rotation_invariant(self, n, seed):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(n, n))
        c = A @ A.T + 0.1 * np.eye(n)
        Q = ortho_group.rvs(n, random_state=seed) if n > 1 else np.eye(1)
        rot = Q @ c @ Q.T
        rot = 0.5 * (rot + rot.T)
        assert gaussian_entropy(rot).entropy == pytest.approx(gaussian_entropy(c).entropy, abs=1e-10)

    def test_vectorized_matches(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(5, 3, 3))
        covs = A @ np.swapaxes(A, 1, 2)
        covs[2] = np.diag([1.0, 0.0, 2.0])
        np.testing.assert_allclose(entropies(covs), [gaussian_entropy(c).entropy for c in covs], rtol=1e-12)

    def test_layer_entropy(self):
        m = init_params(build_specs([2, 3, 2], H), 0)
        s = forward(m, [0.1, 0.2])
        assert layer_entropy(s, 0).entropy == pytest.approx(gaussian_entropy(0.04 * np.eye(2)).entropy)
        assert layer_entropy(s, 2) == gaussian_entropy(s.cov_y)

    def test_layer_entropy_disabled(self):
        m = init_params(build_specs([2, 3, 2], H, covariance=[False, True]), 0)
        with pytest.raises(ValueError):
            layer_entropy(forward(m, [0.1, 0.2]), 0)


class TestSoftmaxMetrics:
    def test_msp(self):
        assert msp([0.0, 0.0]) == 0.5
        assert msp([1.0, 2.0, 3.0]) == pytest.approx(0.66524, abs=1e-5)
        assert msp([500.0, 0.0]) == pytest.approx(1.0)

    def test_softmax_entropy(self):
        assert softmax_entropy(np.zeros(7)) == pytest.approx(math.log(7), rel=1e-14)
        # reference: scipy.stats.entropy(softmax([1, 2, 3]))
        assert softmax_entropy([1.0, 2.0, 3.0]) == pytest.approx(0.8323955818399389, rel=1e-12)
        assert softmax_entropy([500.0, 0.0]) == pytest.approx(0.0, abs=1e-12)

    @settings(max_examples=50)
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
    def test_ranges(self, logits):
        p, h = msp(logits), softmax_entropy(logits)
        assert 0 < p <= 1 and 0 <= h <= math.log(len(logits)) + 1e-12
        if p == 1.0:
            assert h < 1e-6


class TestSeparability:
    def test_identical(self):
        assert separability([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0

    def test_hand_example(self):
        assert separability([1, 1, 1, 3], [0, 0, 0, 2]) == pytest.approx(1 / math.sqrt(2), rel=1e-15)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=10),
           st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=10))
    def test_antisymmetric(self, a, b):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateSeparability)
            assert separability(b, a) == -separability(a, b)

    def test_degenerate(self):
        with pytest.warns(DegenerateSeparability):
            assert separability([2.0, 2.0], [2.0, 2.0]) == 0.0

    def test_too_small(self):
        with pytest.raises(ValueError):
            separability([1.0], [1.0, 2.0])


class TestRegression:
    def test_perfect_mean(self):
        m = regression_metrics([[1.0]], [[[1.0]]], [[1.0]])
        assert m.mse == 0 and m.log_likelihood == pytest.approx(-0.91894, abs=1e-5)

    def test_one_std_away(self):
        m = regression_metrics([[0.0]], [[[1.0]]], [[1.0]])
        assert m.log_likelihood == pytest.approx(-0.5 * (LOG_2PI + 1), rel=1e-15)

    def test_matches_scipy(self):
        rng = np.random.default_rng(0)
        mu, y = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        A = rng.normal(size=(4, 2, 2))
        cov = A @ np.swapaxes(A, 1, 2) + 0.1 * np.eye(2)
        ref = np.mean([multivariate_normal(mu[i], cov[i]).logpdf(y[i]) for i in range(4)])
        assert regression_metrics(mu, cov, y).log_likelihood == pytest.approx(ref, rel=1e-12)

    def test_target_scale_is_change_of_units(self):
        rng = np.random.default_rng(1)
        mu, y = rng.normal(size=(5, 1)), rng.normal(size=(5, 1))
        cov = np.full((5, 1, 1), 0.3)
        base = regression_metrics(mu, cov, y).log_likelihood
        scaled = regression_metrics(mu, cov, y, target_scale=[4.0]).log_likelihood
        assert scaled == pytest.approx(base - math.log(4.0), rel=1e-13)

    def test_singular(self):
        with pytest.raises(ArithmeticError):
            regression_metrics([[0.0]], [[[0.0]]], [[0.0]])
        assert math.isfinite(regression_metrics([[0.0]], [[[0.0]]], [[0.0]], jitter=True).log_likelihood)


def deep_heaviside(depth_widths, seed, sigma=1.0):
    return init_params(build_specs(depth_widths, H, sigma=sigma), seed, input_sigma=sigma)


class TestDeviationRate:
    def test_unit_example(self):
        m = MnnModel([LayerSpec(1, 1, ActivationKind.relu(), 0.0), LayerSpec(1, 1, None, 0.0)],
                     [np.ones((1, 1)), np.ones((1, 1))], [np.full(1, 40.0), np.zeros(1)], 1.0)
        # chi = Phi(40) = 1, n = 1, lambda_min = 1, sigma = 0
        assert deviation_rate(forward(m, [0.0]), m, 0) == 1.0

    def test_zero_chi(self):
        m = MnnModel([LayerSpec(1, 1, H, 0.0), LayerSpec(1, 1, None, 0.0)],
                     [np.ones((1, 1)), np.ones((1, 1))], [np.full(1, 1e3), np.zeros(1)], 1.0)
        assert deviation_rate(forward(m, [0.0]), m, 0) == 0.0

    def test_direct_oracle(self):
        m = init_params(build_specs([3, 4, 4, 2], H, sigma=0.5), 0, input_sigma=0.5)
        s = forward(m, np.array([0.3, -0.2, 0.8]))
        for l in range(2):
            ref = deviation_rate_direct(m.weights[l], m.biases[l], 0.5, s.mu[l], s.cov[l])
            assert deviation_rate(s, m, l) == pytest.approx(ref, rel=1e-12)

    def test_profile(self):
        m = deep_heaviside([3, 5, 5, 5, 2], 1)
        prof = deviation_profile(forward(m, np.zeros(3)), m)
        assert prof.rates.shape == (3,)
        np.testing.assert_allclose(prof.partial_products, np.cumprod(prof.rates))

    def test_singular_covariance_rejected(self):
        m = init_params(build_specs([3, 4, 2], H), 0, input_sigma=0.0)
        with pytest.raises(ValueError):
            deviation_rate(forward(m, np.zeros(3)), m, 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_contraction_inequality(self, seed):
        rng = np.random.default_rng(seed)
        m = deep_heaviside([4, 6, 6, 6, 6, 2], seed)
        x = rng.normal(size=4)
        A = rng.normal(size=(4, 4))
        c1 = A @ A.T / 4 + 0.5 * np.eye(4)
        s = forward(m, x, input_cov=c1)
        delta = rng.normal(size=(4, 4))
        delta = 0.1 * (delta + delta.T)
        for l in range(m.depth - 1):
            nxt = propagate_deviation(s, m, l, delta)
            assert infinity_norm(nxt) <= deviation_rate(s, m, l) * infinity_norm(delta) * (1 + 1e-12)
            delta = nxt
            if not delta.any():
                break


class TestFgsm:
    model = init_params(build_specs([4, 8, 3], ActivationKind.relu()), 0)

    def test_eps_zero(self):
        x = np.linspace(-1, 1, 4)
        np.testing.assert_array_equal(fgsm_attack(self.model, x, 1, 0.0), x)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0, 1), st.integers(0, 2), st.integers(0, 1000))
    def test_max_norm(self, eps, label, seed):
        x = np.random.default_rng(seed).normal(size=4)
        assert np.max(np.abs(fgsm_attack(self.model, x, label, eps) - x)) <= eps

    def test_batch_matches_single(self):
        X = np.random.default_rng(0).normal(size=(3, 4))
        labels = np.array([0, 2, 1])
        batch = fgsm_attack(self.model, X, labels, 0.1)
        for i in range(3):
            np.testing.assert_array_equal(batch[i], fgsm_attack(self.model, X[i], labels[i], 0.1))

    def test_heaviside_zero_noise_has_no_gradient(self):
        m = init_params(build_specs([4, 8, 3], H), 0).with_noise(0.0, 0.0)
        x = np.random.default_rng(0).normal(size=4)
        np.testing.assert_array_equal(fgsm_attack(m, x, 1, 0.3), x)

    def test_defense_keeps_deeper_noise(self):
        m = init_params(build_specs([4, 8, 6, 3], H, sigma=0.3), 0)
        d = gradient_masking_defense(m)
        assert d.input_sigma == 0 and [s.sigma for s in d.specs] == [0.0, 0.3, 0.0]
        x = np.random.default_rng(0).normal(size=4)
        np.testing.assert_array_equal(fgsm_attack(d, x, 1, 0.3), x)
        assert np.isfinite(entropies(forward(d, x).cov_y[None])[0])

    def test_clip(self):
        x = np.full(4, 0.95)
        adv = fgsm_attack(self.model, x, 0, 0.2, clip=(0.0, 1.0))
        assert adv.max() <= 1.0

    def test_negative_eps(self):
        with pytest.raises(ValueError):
            fgsm_attack(self.model, np.zeros(4), 0, -0.1)


class TestLogistic:
    def test_boundary(self):
        w = np.array([1.0, -2.0])
        h = logistic_entropy_approx(w, 0.0, np.eye(2), np.zeros(2))
        assert h == pytest.approx(0.5 * (1 + LOG_2PI + math.log(0.0625 * 5)), rel=1e-14)

    def test_max_at_boundary(self):
        w, b = np.array([1.0, 1.0]), -0.5
        xs = np.linspace(-3, 3, 61)
        hs = [logistic_entropy_approx(w, b, np.eye(2), [t, 0.0]) for t in xs]
        assert xs[int(np.argmax(hs))] == pytest.approx(0.5)

    def test_scaling(self):
        w, x = np.array([0.3, 0.7]), np.array([0.1, 0.4])
        d = logistic_entropy_approx(w, 0.2, 3 * np.eye(2), x) - logistic_entropy_approx(w, 0.2, np.eye(2), x)
        assert d == pytest.approx(0.5 * math.log(3), rel=1e-12)

    def test_degenerate(self):
        with pytest.raises(ValueError):
            logistic_entropy_approx([0.0, 0.0], 0.0, np.eye(2), [0.0, 0.0])


class TestEvaluation:
    def test_predict_chunking(self):
        m = init_params(build_specs([2, 5, 2], H), 0)
        X = np.random.default_rng(0).normal(size=(7, 2))
        a, b = predict(m, X, chunk=3), predict(m, X, chunk=100)
        np.testing.assert_array_equal(a[0], b[0])
        _, _, hs = predict(m, X, chunk=3, layers=True)
        assert hs.shape == (7, 2)
        np.testing.assert_allclose(hs[:, -1], entropies(b[1]))

    def test_classification_keys(self):
        m = init_params(build_specs([2, 5, 2], H), 0)
        out = evaluate_dataset(m, gen_sign_product(50, 0))
        assert set(out) == {"accuracy", "entropy", "entropy_correct", "entropy_incorrect"}
