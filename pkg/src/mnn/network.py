"""Layered moment networks: parameters, linear moment maps and forward passes.

A model is a chain of dense layers.  Every layer but the last applies a
moment activation; the last is a plain linear readout.  Each layer adds
independent Gaussian noise of scale ``sigma`` to its pre-activation, and the
input itself carries noise of scale ``input_sigma``.  The readout adds none.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .activations import ActivationKind, DomainError, covariance_from_kernels

DEFAULT_SIGMA = 0.2


@dataclass(frozen=True)
class LayerSpec:
    """Shape, nonlinearity and noise of one layer; ``kind=None`` marks the readout."""

    in_dim: int
    out_dim: int
    kind: ActivationKind | None = None
    sigma: float = DEFAULT_SIGMA
    covariance_enabled: bool = True

    def __post_init__(self):
        if int(self.in_dim) < 1 or int(self.out_dim) < 1:
            raise ValueError(f"layer dimensions must be positive, got {self.in_dim}x{self.out_dim}")
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ValueError(f"sigma must be finite and >= 0, got {self.sigma}")
        if self.kind is None and self.sigma != 0:
            raise ValueError("the linear readout carries no noise; use sigma=0")

    @property
    def is_readout(self) -> bool:
        return self.kind is None


def build_specs(dims, kind: ActivationKind, sigma=DEFAULT_SIGMA, covariance=True) -> list[LayerSpec]:
    """Specs for a dense chain ``dims[0] -> ... -> dims[-1]`` ending in a readout.

    ``sigma`` and ``covariance`` may be scalars or per-hidden-layer sequences;
    ``covariance`` may also have one extra entry for the readout.
    """
    dims = [int(d) for d in dims]
    n_hidden = len(dims) - 2
    if n_hidden < 0:
        raise ValueError("need at least an input and an output dimension")
    sigmas = [float(sigma)] * n_hidden if np.isscalar(sigma) else [float(s) for s in sigma]
    if isinstance(covariance, bool):
        flags = [covariance] * (n_hidden + 1)
    else:
        flags = [bool(c) for c in covariance]
        if len(flags) == n_hidden:
            flags.append(flags[-1] if flags else True)
    if len(sigmas) != n_hidden or len(flags) != n_hidden + 1:
        raise ValueError("per-layer sigma/covariance lists must match the number of hidden layers")
    specs = [LayerSpec(dims[i], dims[i + 1], kind, sigmas[i], flags[i]) for i in range(n_hidden)]
    specs.append(LayerSpec(dims[-2], dims[-1], None, 0.0, flags[-1]))
    return specs


@dataclass
class MnnModel:
    specs: list[LayerSpec]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        if not self.specs:
            raise ValueError("a model needs at least one layer")
        if len(self.weights) != len(self.specs) or len(self.biases) != len(self.specs):
            raise ValueError("one weight matrix and one bias per layer")
        for k, spec in enumerate(self.specs):
            if spec.is_readout != (k == len(self.specs) - 1):
                raise ValueError("exactly the last layer must be the linear readout")
            if k and spec.in_dim != self.specs[k - 1].out_dim:
                raise ValueError(f"layer {k} expects {spec.in_dim} inputs, previous layer gives "
                                 f"{self.specs[k - 1].out_dim}")
            W = self.weights[k] = np.asarray(self.weights[k], dtype=float)
            b = self.biases[k] = np.asarray(self.biases[k], dtype=float)
            if W.shape != (spec.out_dim, spec.in_dim) or b.shape != (spec.out_dim,):
                raise ValueError(f"layer {k}: parameter shapes {W.shape}, {b.shape} do not match spec")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k}: non-finite parameters")
        kinds = {s.kind for s in self.specs if s.kind is not None and s.covariance_enabled}
        if len(kinds) > 1:
            raise ValueError("covariance-enabled layers must share one activation kind")
        if not np.isfinite(self.input_sigma) or self.input_sigma < 0:
            raise ValueError("input_sigma must be finite and >= 0")

    @property
    def in_dim(self) -> int:
        return self.specs[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.specs[-1].out_dim

    @property
    def depth(self) -> int:
        return len(self.specs)

    def params(self) -> list[np.ndarray]:
        """Flat parameter list ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "MnnModel":
        return MnnModel(list(self.specs), [W.copy() for W in self.weights],
                        [b.copy() for b in self.biases], self.input_sigma)

    def with_noise(self, input_sigma: float | None = None, sigma=None) -> "MnnModel":
        """Same weights, different noise levels.

        ``sigma`` is a scalar for every hidden layer or one value per hidden
        layer, ``None`` entries keeping the current level.
        """
        specs = list(self.specs)
        if sigma is not None:
            n_hidden = len(specs) - 1
            levels = [sigma] * n_hidden if np.isscalar(sigma) else list(sigma)
            if len(levels) != n_hidden:
                raise ValueError(f"expected {n_hidden} hidden noise levels, got {len(levels)}")
            specs = [s if v is None else replace(s, sigma=float(v))
                     for s, v in zip(specs, levels)] + specs[n_hidden:]
        return MnnModel(specs, [W.copy() for W in self.weights], [b.copy() for b in self.biases],
                        self.input_sigma if input_sigma is None else float(input_sigma))


def init_params(specs, seed: int, input_sigma: float = DEFAULT_SIGMA) -> MnnModel:
    """Uniform Glorot weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for s in specs:
        a = np.sqrt(6.0 / (s.in_dim + s.out_dim))
        weights.append(rng.uniform(-a, a, size=(s.out_dim, s.in_dim)))
        biases.append(np.zeros(s.out_dim))
    return MnnModel(list(specs), weights, biases, input_sigma)


def symmetrize(c: np.ndarray) -> np.ndarray:
    return 0.5 * (c + np.swapaxes(c, -1, -2))


def linear_moment_map(W, b, sigma, mu, cov):
    """``(W mu + b, W cov W^T + sigma^2 I)``; broadcasts over leading batch axes."""
    W = np.asarray(W, dtype=float)
    b = np.asarray(b, dtype=float)
    mu = np.asarray(mu, dtype=float)
    cov = np.asarray(cov, dtype=float)
    n_out, n_in = W.shape
    if b.shape != (n_out,) or mu.shape[-1] != n_in or cov.shape[-2:] != (n_in, n_in):
        raise ValueError(f"shape mismatch: W {W.shape}, b {b.shape}, mu {mu.shape}, cov {cov.shape}")
    mu_bar = mu @ W.T + b
    c_bar = symmetrize(W @ cov @ W.T)
    if sigma:
        c_bar = c_bar + sigma**2 * np.eye(n_out)
    return mu_bar, c_bar


def layer_kernels(kind: ActivationKind, mu_bar, var_bar):
    """Mean, variance and chi of each unit; units with zero input variance run deterministically."""
    var_bar = np.broadcast_to(var_bar, np.shape(mu_bar))
    live = var_bar > 0
    if live.all():
        return kind.moments(mu_bar, var_bar)
    mean, var, chi = kind.moments(mu_bar, np.where(live, var_bar, 1.0))
    mean = np.where(live, mean, kind.apply(mu_bar))
    return mean, np.where(live, var, 0.0), np.where(live, chi, 0.0)


def mean_derivative(kind: ActivationKind, mu_bar, var_bar):
    """d mean / d mu_bar at frozen input variance, with the same deterministic routing."""
    var_bar = np.broadcast_to(var_bar, np.shape(mu_bar))
    live = var_bar > 0
    if live.all():
        return kind.mean_derivative(mu_bar, var_bar)
    d = kind.mean_derivative(mu_bar, np.where(live, var_bar, 1.0))
    return np.where(live, d, kind.apply_derivative(mu_bar))


@dataclass
class MomentState:
    """Moments recorded along a forward pass.

    ``mu[k]``/``cov[k]`` are the moments entering layer ``k`` (``mu[0]`` is the
    input); ``mu_bar[k]``/``c_bar[k]`` are that layer's pre-activation moments.
    ``cov``/``c_bar`` entries are ``None`` where covariance is disabled.  Arrays
    carry a leading batch axis when the input was a batch.
    """

    mu: list
    cov: list
    mu_bar: list
    c_bar: list
    mu_y: np.ndarray
    cov_y: np.ndarray | None

    def frozen_variance(self, k: int):
        """Diagonal of ``c_bar[k]`` (what the mean kernels saw), or None."""
        c = self.c_bar[k]
        return None if c is None else np.diagonal(c, axis1=-2, axis2=-1)

    def layer(self, l: int):
        """(mu, cov) of the signal entering layer ``l``; ``l == depth`` gives the output."""
        if l == len(self.mu):
            return self.mu_y, self.cov_y
        return self.mu[l], self.cov[l]


@dataclass
class BatchMomentState(MomentState):
    """Per-sample means with one covariance path shared by the whole batch."""

    mu_avg: list = field(default_factory=list)


def _propagate(model: MnnModel, X: np.ndarray, shared: bool, input_cov=None):
    mus, covs, mu_bars, c_bars, avgs = [], [], [], [], []
    mu = X
    cov = None
    isotropic = input_cov is None
    if model.specs[0].covariance_enabled:
        if isotropic:
            cov = (model.input_sigma**2 * np.eye(model.in_dim))[None]
        else:
            cov = symmetrize(np.asarray(input_cov, dtype=float))[None]
            if cov.shape[1:] != (model.in_dim, model.in_dim):
                raise ValueError(f"input covariance must be {model.in_dim}x{model.in_dim}")
    for k, spec in enumerate(model.specs):
        W, b = model.weights[k], model.biases[k]
        mus.append(mu)
        covs.append(cov)
        mu_bar = mu @ W.T + b
        if not spec.covariance_enabled:
            c_bar = None
            new_mu = mu_bar if spec.is_readout else spec.kind.apply(mu_bar)
            new_cov = None
        else:
            if cov is None:
                c_bar = (spec.sigma**2 * np.eye(spec.out_dim))[None]
            elif k == 0 and isotropic:
                # isotropic input noise: W (s^2 I) W^T without the m x m product
                c_bar = symmetrize(model.input_sigma**2 * (W @ W.T))[None]
                if spec.sigma:
                    c_bar = c_bar + spec.sigma**2 * np.eye(spec.out_dim)
            else:
                c_bar = symmetrize(W @ cov @ W.T)
                if spec.sigma:
                    c_bar = c_bar + spec.sigma**2 * np.eye(spec.out_dim)
            if spec.is_readout:
                new_mu, new_cov = mu_bar, c_bar
            else:
                d = np.diagonal(c_bar, axis1=-2, axis2=-1)
                try:
                    if shared:
                        avg_bar = mu.mean(axis=0, keepdims=True) @ W.T + b
                        _, var, chi = layer_kernels(spec.kind, avg_bar, d)
                        new_mu = layer_kernels(spec.kind, mu_bar, d)[0]
                        avgs.append(avg_bar)
                    else:
                        new_mu, var, chi = layer_kernels(spec.kind, mu_bar, d)
                except DomainError as e:
                    raise DomainError(f"layer {k}: {e}") from e
                new_cov = symmetrize(covariance_from_kernels(var, chi, c_bar))
        mu_bars.append(mu_bar)
        c_bars.append(c_bar)
        mu, cov = new_mu, new_cov
    return mus, covs, mu_bars, c_bars, mu, cov, avgs


def _as_batch(model: MnnModel, x):
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.ndim != 2 or X.shape[1] != model.in_dim:
        raise ValueError(f"expected inputs of length {model.in_dim}, got shape {np.shape(x)}")
    if not np.all(np.isfinite(X)):
        bad = np.argwhere(~np.isfinite(X))[0]
        raise ValueError(f"non-finite input at row {bad[0]}, column {bad[1]}")
    return X, single


def forward(model: MnnModel, x, input_cov=None) -> MomentState:
    """Propagate means and per-sample covariances; ``x`` is a vector or a batch of rows.

    The input covariance defaults to ``input_sigma**2 * I``.
    """
    X, single = _as_batch(model, x)
    mus, covs, mu_bars, c_bars, mu_y, cov_y, _ = _propagate(model, X, False, input_cov)
    if single:
        first = (lambda a: None if a is None else a[0])
        return MomentState([first(m) for m in mus], [first(c) for c in covs],
                           [first(m) for m in mu_bars], [first(c) for c in c_bars],
                           first(mu_y), first(cov_y))
    full = (lambda a: None if a is None else np.broadcast_to(a, (X.shape[0],) + a.shape[1:]))
    return MomentState(mus, [full(c) for c in covs], mu_bars, [full(c) for c in c_bars],
                       mu_y, full(cov_y))


def forward_batch_shared(model: MnnModel, xs) -> BatchMomentState:
    """Per-sample means; covariances computed once along the batch-averaged mean path."""
    X = np.asarray(xs, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("need a nonempty 2-d batch")
    X, _ = _as_batch(model, X)
    mus, covs, mu_bars, c_bars, mu_y, cov_y, avgs = _propagate(model, X, shared=True)
    first = (lambda a: None if a is None else a[0])
    return BatchMomentState(mus, [first(c) for c in covs], mu_bars, [first(c) for c in c_bars],
                            mu_y, first(cov_y), mu_avg=[a[0] for a in avgs])


def deterministic_forward(model: MnnModel, x) -> np.ndarray:
    """The conventional network on the same weights: no noise, plain activations."""
    h = np.asarray(x, dtype=float)
    for spec, W, b in zip(model.specs, model.weights, model.biases):
        h = h @ W.T + b
        if not spec.is_readout:
            h = spec.kind.apply(h)
    return h
