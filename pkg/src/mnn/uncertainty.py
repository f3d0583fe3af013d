"""Uncertainty read-outs of moment networks, and probes of their behaviour.

Entropies are in nats.  Most metrics accept a single vector/matrix or a stack
with a leading batch axis.
"""
from __future__ import annotations

import math
import warnings
from typing import NamedTuple

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .data import Dataset
from .network import MnnModel, MomentState, forward

LOG_2PI = math.log(2.0 * math.pi)


class PredictionMoments(NamedTuple):
    mu_y: np.ndarray
    cov_y: np.ndarray


class EntropyResult(NamedTuple):
    entropy: float
    effective_dim: int
    dropped_eigenvalues: int
    degenerate: bool = False


def gaussian_entropy(cov, rank_tol: float = 1e-10) -> EntropyResult:
    """Differential entropy of a Gaussian, restricted to the span of its covariance.

    Eigenvalues at or below ``rank_tol * lambda_max`` are treated as zero and the
    entropy is taken in the subspace of the rest.
    """
    if isinstance(cov, PredictionMoments):
        cov = cov.cov_y
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"covariance must be square, got shape {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-14):
        raise ValueError("covariance is not symmetric")
    lam = np.linalg.eigvalsh(0.5 * (cov + cov.T))
    top = lam.max() if lam.size else 0.0
    keep = lam[lam > rank_tol * top] if top > 0 else lam[:0]
    n = keep.size
    if n == 0:
        return EntropyResult(0.0, 0, lam.size, True)
    h = 0.5 * n * (1.0 + LOG_2PI) + 0.5 * float(np.sum(np.log(keep)))
    return EntropyResult(h, n, lam.size - n, False)


def entropies(covs, rank_tol: float = 1e-10) -> np.ndarray:
    """Vectorized :func:`gaussian_entropy` over a stack of covariances (entropy only)."""
    covs = np.asarray(covs, dtype=float)
    lam = np.linalg.eigvalsh(0.5 * (covs + np.swapaxes(covs, -1, -2)))
    top = lam.max(axis=-1, keepdims=True)
    keep = (lam > rank_tol * top) & (top > 0)
    n = keep.sum(axis=-1)
    logs = np.where(keep, np.log(np.where(keep, lam, 1.0)), 0.0).sum(axis=-1)
    return 0.5 * n * (1.0 + LOG_2PI) + 0.5 * logs


def layer_entropy(state: MomentState, l: int, rank_tol: float = 1e-10) -> EntropyResult:
    """Entropy of the signal entering layer ``l`` (``l == depth`` is the output)."""
    _, cov = state.layer(l)
    if cov is None:
        raise ValueError(f"layer {l} has no covariance (disabled)")
    if np.ndim(cov) != 2:
        raise ValueError("layer_entropy takes an unbatched state; use entropies() for stacks")
    return gaussian_entropy(cov, rank_tol)


def msp(mu_y) -> np.ndarray | float:
    """Maximum softmax probability."""
    p = softmax(np.asarray(mu_y, dtype=float), axis=-1).max(axis=-1)
    return float(p) if np.ndim(p) == 0 else p


def softmax_entropy(mu_y) -> np.ndarray | float:
    mu_y = np.asarray(mu_y, dtype=float)
    lp = log_softmax(mu_y, axis=-1)
    h = -np.sum(np.exp(lp) * lp, axis=-1)
    h = np.maximum(h, 0.0)
    return float(h) if np.ndim(h) == 0 else h


class DegenerateSeparability(UserWarning):
    pass


def separability(group1, group2) -> float:
    """``(m1 - m2) / sqrt(s1^2 + s2^2)`` with unbiased variances; group1 is expected higher."""
    a = np.asarray(group1, dtype=float).ravel()
    b = np.asarray(group2, dtype=float).ravel()
    if a.size < 2 or b.size < 2:
        raise ValueError("each group needs at least two samples")
    num = a.mean() - b.mean()
    den = math.sqrt(a.var(ddof=1) + b.var(ddof=1))
    if den == 0:
        if num == 0:
            warnings.warn("both groups are constant and equal", DegenerateSeparability)
            return 0.0
        return math.copysign(math.inf, num)
    return float(num / den)


class RegressionMetrics(NamedTuple):
    mse: float
    log_likelihood: float


def regression_metrics(mu_y, cov_y, targets, jitter: bool = False,
                       target_scale=None) -> RegressionMetrics:
    """Mean squared error and average Gaussian log-likelihood of the targets.

    With ``target_scale`` (per-dimension std of a standardization), predictions
    and targets given in standardized units are scored in original units.
    """
    mu = np.atleast_2d(np.asarray(mu_y, dtype=float))
    y = np.asarray(targets, dtype=float).reshape(mu.shape)
    cov = np.asarray(cov_y, dtype=float)
    cov = cov.reshape(mu.shape[0], mu.shape[1], mu.shape[1])
    if target_scale is not None:
        s = np.broadcast_to(np.asarray(target_scale, dtype=float), mu.shape[1:])
        mu, y = mu * s, y * s
        cov = cov * np.outer(s, s)
    if jitter:
        cov = cov + 1e-8 * np.eye(mu.shape[1])
    r = y - mu
    mse = float(np.mean(np.sum(r * r, axis=-1)))
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as e:
        raise ArithmeticError("predictive covariance is singular; enable jitter to regularize") from e
    z = np.linalg.solve(L, r[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    ll = -0.5 * (mu.shape[1] * LOG_2PI + logdet + np.sum(z * z, axis=-1))
    return RegressionMetrics(mse, float(ll.mean()))


# -- covariance deviation rate -------------------------------------------------

def _layer_chi(model: MnnModel, state: MomentState, l: int):
    spec = model.specs[l]
    W, b = model.weights[l], model.biases[l]
    mu, cov = state.mu[l], state.cov[l]
    mu_bar = W @ mu + b
    c_bar = np.einsum("ik,kq,iq->i", W, cov, W) + spec.sigma**2
    return spec.kind.moments(mu_bar, c_bar)[2]


def deviation_rate(state: MomentState, model: MnnModel, l: int) -> float:
    """Bound on how much layer ``l`` can amplify an error in its input covariance.

    ``n max(chi)^2 / sqrt(lam^2 + 2 lam sigma^2)`` with ``n`` the fan-in,
    ``lam`` the smallest eigenvalue of the incoming covariance and chi taken at
    the layer means.
    """
    spec = model.specs[l]
    if spec.is_readout:
        raise ValueError("the readout has no activation")
    cov = state.cov[l]
    if cov is None or np.ndim(cov) != 2:
        raise ValueError(f"layer {l}: needs an unbatched state with covariance")
    lam = float(np.linalg.eigvalsh(cov)[0])
    if lam <= 0:
        raise ValueError(f"layer {l}: incoming covariance is not positive definite (lambda_min={lam})")
    chi_max = float(np.max(np.abs(_layer_chi(model, state, l))))
    return spec.in_dim * chi_max**2 / math.sqrt(lam * lam + 2.0 * lam * spec.sigma**2)


class DeviationProfile(NamedTuple):
    rates: np.ndarray
    partial_products: np.ndarray
    neg_log_sum: np.ndarray  # partial sums of -log r; growth without bound means contraction


def deviation_profile(state: MomentState, model: MnnModel) -> DeviationProfile:
    rates = np.array([deviation_rate(state, model, l) for l in range(model.depth - 1)])
    with np.errstate(divide="ignore"):
        nls = np.cumsum(-np.log(rates))
    return DeviationProfile(rates, np.cumprod(rates), nls)


def propagate_deviation(state: MomentState, model: MnnModel, l: int, delta) -> np.ndarray:
    """Covariance error after layer ``l`` when only correlations differ.

    The two networks share means and per-unit variances, so an input error
    ``delta`` reaches the next layer as ``chi_i chi_j (W delta W^T)_ij / sqrt(cbar_i cbar_j)``
    off the diagonal, and not at all on it.
    """
    spec = model.specs[l]
    W = model.weights[l]
    cov = state.cov[l]
    c_bar = np.einsum("ik,kq,iq->i", W, cov, W) + spec.sigma**2
    chi = _layer_chi(model, state, l)
    s = chi / np.sqrt(c_bar)
    out = np.outer(s, s) * (W @ delta @ W.T)
    np.fill_diagonal(out, 0.0)
    return out


def infinity_norm(a) -> float:
    """Largest absolute entry."""
    return float(np.max(np.abs(a)))


# -- attacks and sensitivity ---------------------------------------------------

def input_gradient(model: MnnModel, x, label) -> np.ndarray:
    """SMUC gradient of the cross-entropy loss with respect to the input."""
    from .smuc import LossKind, modified_backward
    state = forward(model, x)
    g = modified_backward(model, state, LossKind.CROSS_ENTROPY, label, input_grad=True).dx
    # the loss is batch-averaged; undo it so each sample sees its own gradient
    return g * (1 if np.ndim(x) == 1 else np.shape(x)[0])


def fgsm_attack(model: MnnModel, x, label, eps: float, clip=None) -> np.ndarray:
    """``x + eps * sign(grad_x loss)``; ``clip=(lo, hi)`` optionally boxes the result."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    x = np.asarray(x, dtype=float)
    if eps == 0:
        return x.copy()
    x_adv = x + eps * np.sign(input_gradient(model, x, label))
    over = np.abs(x_adv - x) > eps  # rounding can overshoot by one ulp
    x_adv[over] = np.nextafter(x_adv[over], x[over])
    if clip is not None:
        x_adv = np.clip(x_adv, *clip)
    return x_adv


def gradient_masking_defense(model: MnnModel) -> MnnModel:
    """Inference-time copy with no input noise and no noise in the first hidden layer.

    The first layer then applies its activation to a noise-free input; for the
    Heaviside kind that step has zero derivative, so input gradients vanish.
    """
    return model.with_noise(0.0, [0.0] + [None] * (model.depth - 2))


def logistic_entropy_approx(w, b: float, C, x) -> float:
    """Linearized entropy of sigmoid(w.x + b) under input noise of covariance C."""
    w = np.asarray(w, dtype=float)
    q = float(w @ np.asarray(C, dtype=float) @ w)
    if not q > 0:
        raise ValueError("w^T C w must be positive")
    s = float(w @ np.asarray(x, dtype=float) + b)
    p = expit(s)
    slope = p * (1.0 - p)
    return 0.5 * (1.0 + LOG_2PI + math.log(slope * slope * q))


# -- dataset-level evaluation ---------------------------------------------------

def predict(model: MnnModel, x, chunk: int = 500, layers: bool = False):
    """Per-sample output moments over a dataset; with ``layers`` also per-layer entropies.

    Returns ``(mu_y, cov_y)`` or ``(mu_y, cov_y, layer_h)`` where ``layer_h[:, l]``
    is the entropy of the signal entering layer ``l`` (NaN where disabled), and
    the last column is the output entropy.
    """
    X = np.atleast_2d(np.asarray(x, dtype=float))
    mus, covs, hs = [], [], []
    for start in range(0, X.shape[0], chunk):
        st = forward(model, X[start:start + chunk])
        mus.append(st.mu_y)
        covs.append(st.cov_y)
        if layers:
            cols = [entropies(c) if c is not None else np.full(len(st.mu_y), np.nan)
                    for c in st.cov[1:] + [st.cov_y]]
            hs.append(np.stack(cols, axis=1))
    mu, cov = np.concatenate(mus), np.concatenate(covs) if covs[0] is not None else None
    return (mu, cov, np.concatenate(hs)) if layers else (mu, cov)


def evaluate_dataset(model: MnnModel, data: Dataset, chunk: int = 500) -> dict:
    """Accuracy and entropy split for classifiers; MSE and log-likelihood for regressors."""
    mu, cov = predict(model, data.inputs, chunk)
    if data.is_classification:
        correct = mu.argmax(axis=1) == data.targets
        out = {"accuracy": float(correct.mean())}
        if cov is not None:
            h = entropies(cov)
            out["entropy"] = float(h.mean())
            out["entropy_correct"] = float(h[correct].mean()) if correct.any() else math.nan
            out["entropy_incorrect"] = float(h[~correct].mean()) if (~correct).any() else math.nan
        return out
    m = regression_metrics(mu, cov, data.targets, jitter=True)
    return {"mse": m.mse, "log_likelihood": m.log_likelihood}
