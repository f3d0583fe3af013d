"""Moment activations: Gaussian-input mean, variance and linear-response kernels.

Every kernel maps the pre-activation moments ``(mu_bar, c_bar)`` of a unit to
the mean and variance of its output signal, together with the linear-response
coefficient ``chi`` that scales input correlations into output covariances.
Kernels accept scalars or numpy arrays and broadcast.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import integrate, special

SQRT_2PI = math.sqrt(2.0 * math.pi)
SQRT_PI = math.sqrt(math.pi)


class DomainError(ValueError):
    """Raised when a kernel is evaluated outside its domain."""


class QuadratureError(ArithmeticError):
    """Raised when a numerical integral fails to converge or returns NaN."""


class ScalarMoments(NamedTuple):
    mean: np.ndarray | float
    variance: np.ndarray | float
    chi: np.ndarray | float


class GaussianInput(NamedTuple):
    mu_bar: float
    c_bar: float


@dataclass(frozen=True)
class LifParams:
    """Leaky integrate-and-fire constants (mV, ms, 1/ms)."""

    v_th: float = 20.0
    v_res: float = 0.0
    t_ref: float = 5.0
    leak: float = 1.0 / 20.0

    def __post_init__(self):
        if not self.v_th > self.v_res:
            raise ValueError(f"v_th ({self.v_th}) must exceed v_res ({self.v_res})")
        if self.t_ref < 0:
            raise ValueError("t_ref must be nonnegative")
        if not self.leak > 0:
            raise ValueError("leak must be positive")


def normal_cdf(z):
    return special.ndtr(z)


def normal_pdf(z):
    z = np.asarray(z, dtype=float)
    return np.exp(-0.5 * z * z) / SQRT_2PI


def _check_input(mu_bar, c_bar):
    mu_bar = np.asarray(mu_bar, dtype=float)
    c_bar = np.asarray(c_bar, dtype=float)
    if not np.all(np.isfinite(c_bar)) or np.any(c_bar <= 0):
        raise DomainError(f"c_bar must be finite and > 0, got {c_bar}")
    if not np.all(np.isfinite(mu_bar)):
        raise DomainError(f"mu_bar must be finite, got {mu_bar}")
    return mu_bar, c_bar


def _unwrap(x):
    return x.item() if isinstance(x, np.ndarray) and x.ndim == 0 else x


# ---------------------------------------------------------------------------
# Heaviside and ReLU
# ---------------------------------------------------------------------------

def _heaviside(mu_bar, c_bar):
    s = np.sqrt(c_bar)
    z = mu_bar / s
    mean = normal_cdf(z)
    var = mean * (1.0 - mean)
    chi = normal_pdf(z)
    return mean, var, chi


def _relu(mu_bar, c_bar):
    s = np.sqrt(c_bar)
    z = mu_bar / s
    cdf = normal_cdf(z)
    pdf = normal_pdf(z)
    mean = s * pdf + mu_bar * cdf
    var = (c_bar + mu_bar**2) * cdf + mu_bar * s * pdf - mean**2
    # cancellation can leave tiny negatives in the dead regime
    var = np.maximum(var, 0.0)
    chi = s * cdf
    return mean, var, chi


def heaviside_ma(mu_bar, c_bar) -> ScalarMoments:
    mu_bar, c_bar = _check_input(mu_bar, c_bar)
    return ScalarMoments(*map(_unwrap, _heaviside(mu_bar, c_bar)))


def relu_ma(mu_bar, c_bar) -> ScalarMoments:
    mu_bar, c_bar = _check_input(mu_bar, c_bar)
    return ScalarMoments(*map(_unwrap, _relu(mu_bar, c_bar)))


# ---------------------------------------------------------------------------
# Dawson-like functions and the LIF kernel
# ---------------------------------------------------------------------------

def dawson_g(x):
    """g(x) = exp(x^2) * int_{-inf}^x exp(-u^2) du.

    Uses the scaled complementary error function, which carries the
    -1/(2x) asymptote for x -> -inf without cancellation.
    """
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore"):
        return _unwrap(0.5 * SQRT_PI * special.erfcx(-x))


# h grows like exp(2 x^2); past this the float64 range is exhausted
_H_OVERFLOW = 18.8


def _dawson_h_scalar(x: float) -> float:
    if x > _H_OVERFLOW:
        return math.inf
    if x < -1e3:
        # leading terms of the integration-by-parts expansion
        return -1.0 / (8.0 * x**3) * (1.0 - 2.0 / x**2)

    def f(u):
        return math.exp(x * x - u * u) * (0.5 * SQRT_PI * special.erfcx(-u)) ** 2

    val, err = integrate.quad(f, -np.inf, x, epsabs=1e-13, epsrel=1e-12, limit=200)
    if not math.isfinite(val):
        raise QuadratureError(f"dawson_h failed at x={x}")
    return val


def dawson_h(x):
    """h(x) = exp(x^2) * int_{-inf}^x exp(-u^2) g(u)^2 du."""
    x = np.asarray(x, dtype=float)
    out = np.vectorize(_dawson_h_scalar, otypes=[float])(x)
    return _unwrap(out)


def _int_exp_sq(a: float, b: float) -> float:
    """int_a^b exp(t^2) dt via the Dawson integral."""
    return float(np.exp(b * b) * special.dawsn(b) - np.exp(a * a) * special.dawsn(a))


def integral_g(lb: float, ub: float) -> float:
    """int_lb^ub g(x) dx for lb <= ub.

    The negative half-line integrand is bounded, so it goes to adaptive
    quadrature directly.  On the positive half-line g = sqrt(pi) e^{x^2} -
    (sqrt(pi)/2) erfcx(x), whose first term integrates in closed form.
    """
    if ub > 26.0:
        # exp(ub^2) leaves the float64 range
        return math.inf
    total = 0.0
    opts = dict(epsabs=1e-12, epsrel=1e-12, limit=200)
    if lb < 0.0:
        hi = min(ub, 0.0)
        v, _ = integrate.quad(lambda x: special.erfcx(-x), lb, hi, **opts)
        total += 0.5 * SQRT_PI * v
    if ub > 0.0:
        lo = max(lb, 0.0)
        closed = SQRT_PI * _int_exp_sq(lo, ub)
        v, _ = integrate.quad(special.erfcx, lo, ub, **opts)
        total += closed - 0.5 * SQRT_PI * v
    if math.isnan(total):
        raise QuadratureError(f"integral of g did not converge on [{lb}, {ub}]")
    return total


def integral_h(lb: float, ub: float) -> float:
    """int_lb^ub h(x) dx for lb <= ub.

    Swapping the order of the double integral leaves a single integral over
    u < ub of g(u)^2 * int_{max(u, lb)}^{ub} exp(x^2 - u^2) dx.
    """
    if ub > _H_OVERFLOW:
        return math.inf
    d_ub = special.dawsn(ub)

    def kernel(u):
        a = max(u, lb)
        inner = math.exp(ub * ub - u * u) * d_ub - math.exp(a * a - u * u) * special.dawsn(a)
        return (0.5 * SQRT_PI * special.erfcx(-u)) ** 2 * inner

    opts = dict(epsabs=1e-13, epsrel=1e-11, limit=200)
    below, _ = integrate.quad(kernel, -np.inf, lb, **opts)
    within, _ = integrate.quad(kernel, lb, ub, **opts)
    total = below + within
    if not math.isfinite(total):
        raise QuadratureError(f"integral of h did not converge on [{lb}, {ub}]")
    return total


def _lif_bounds(mu_bar, c_bar, p: LifParams):
    s = math.sqrt(p.leak * c_bar)
    return (p.v_th * p.leak - mu_bar) / s, (p.v_res * p.leak - mu_bar) / s, s


# beyond this upper bound the firing rate is below 1e-40 per ms
_LIF_SILENT = 9.5


def _lif_mean_scalar(mu_bar: float, c_bar: float, p: LifParams) -> float:
    ub, lb, _ = _lif_bounds(mu_bar, c_bar, p)
    return 1.0 / (p.t_ref + 2.0 / p.leak * integral_g(lb, ub))


def _lif_scalar(mu_bar: float, c_bar: float, p: LifParams, with_variance=True):
    ub, lb, s = _lif_bounds(mu_bar, c_bar, p)
    mean = _lif_mean_scalar(mu_bar, c_bar, p)
    if mean == 0.0:
        return 0.0, 0.0, 0.0
    # grouped so that the huge g(ub) meets the tiny rate before squaring
    chi = mean * (mean * (2.0 / p.leak) * (dawson_g(ub) - dawson_g(lb))) / s
    if not with_variance:
        return mean, math.nan, chi
    if ub > _LIF_SILENT:
        # rate < 1e-40: the spike-count variance is negligible and its integral overflows
        return mean, 0.0, chi
    return mean, 8.0 / p.leak**2 * mean**3 * integral_h(lb, ub), chi


def lif_ma(mu_bar, c_bar, p: LifParams | None = None) -> ScalarMoments:
    p = p or LifParams()
    mu_bar, c_bar = _check_input(mu_bar, c_bar)
    f = np.vectorize(lambda m, c: _lif_scalar(m, c, p), otypes=[float, float, float])
    return ScalarMoments(*map(_unwrap, f(mu_bar, c_bar)))


def lif_mean(mu_bar, c_bar, p: LifParams | None = None):
    p = p or LifParams()
    mu_bar, c_bar = _check_input(mu_bar, c_bar)
    f = np.vectorize(lambda m, c: _lif_mean_scalar(m, c, p), otypes=[float])
    return _unwrap(f(mu_bar, c_bar))


def lif_chi(mu_bar, c_bar, p: LifParams | None = None):
    p = p or LifParams()
    mu_bar, c_bar = _check_input(mu_bar, c_bar)
    f = np.vectorize(lambda m, c: _lif_scalar(m, c, p, with_variance=False)[2], otypes=[float])
    return _unwrap(f(mu_bar, c_bar))


def lif_rate(mu_bar, p: LifParams | None = None):
    """Noise-free LIF firing rate (the c_bar -> 0 limit)."""
    p = p or LifParams()
    mu_bar = np.asarray(mu_bar, dtype=float)
    drive = p.v_th * p.leak
    on = mu_bar > drive
    safe = np.where(on, mu_bar, drive + 1.0)
    t = np.log((safe - p.v_res * p.leak) / (safe - drive)) / p.leak
    return _unwrap(np.where(on, 1.0 / (p.t_ref + t), 0.0))


def lif_rate_derivative(mu_bar, p: LifParams | None = None):
    p = p or LifParams()
    mu_bar = np.asarray(mu_bar, dtype=float)
    drive = p.v_th * p.leak
    on = mu_bar > drive
    safe = np.where(on, mu_bar, drive + 1.0)
    t = np.log((safe - p.v_res * p.leak) / (safe - drive)) / p.leak
    dt = (1.0 / (safe - p.v_res * p.leak) - 1.0 / (safe - drive)) / p.leak
    return _unwrap(np.where(on, -dt / (p.t_ref + t) ** 2, 0.0))


# ---------------------------------------------------------------------------
# Activation kinds
# ---------------------------------------------------------------------------

HEAVISIDE = "heaviside"
RELU = "relu"
LIF = "lif"


@dataclass(frozen=True)
class ActivationKind:
    """Tagged choice of nonlinearity; ``lif`` is set iff ``tag == 'lif'``."""

    tag: str
    lif: LifParams | None = None

    def __post_init__(self):
        if self.tag not in (HEAVISIDE, RELU, LIF):
            raise ValueError(f"unknown activation {self.tag!r}")
        if (self.tag == LIF) != (self.lif is not None):
            raise ValueError("lif parameters must be given exactly for the LIF kind")

    @classmethod
    def heaviside(cls):
        return cls(HEAVISIDE)

    @classmethod
    def relu(cls):
        return cls(RELU)

    @classmethod
    def lif_default(cls, **kw):
        return cls(LIF, LifParams(**kw))

    @classmethod
    def parse(cls, name: str):
        name = name.lower()
        if name == LIF:
            return cls.lif_default()
        return cls(name)

    # -- array kernels, no domain checks (network internals) --

    def moments(self, mu_bar, c_bar):
        if self.tag == HEAVISIDE:
            return _heaviside(mu_bar, c_bar)
        if self.tag == RELU:
            return _relu(mu_bar, c_bar)
        f = np.vectorize(lambda m, c: _lif_scalar(m, c, self.lif), otypes=[float] * 3)
        return f(mu_bar, c_bar)

    def mean(self, mu_bar, c_bar):
        if self.tag == HEAVISIDE:
            return normal_cdf(mu_bar / np.sqrt(c_bar))
        if self.tag == RELU:
            s = np.sqrt(c_bar)
            z = mu_bar / s
            return s * normal_pdf(z) + mu_bar * normal_cdf(z)
        f = np.vectorize(lambda m, c: _lif_mean_scalar(m, c, self.lif), otypes=[float])
        return f(mu_bar, c_bar)

    def mean_derivative(self, mu_bar, c_bar):
        """d mean / d mu_bar with c_bar held fixed."""
        if self.tag == HEAVISIDE:
            s = np.sqrt(c_bar)
            return normal_pdf(mu_bar / s) / s
        if self.tag == RELU:
            return normal_cdf(mu_bar / np.sqrt(c_bar))
        f = np.vectorize(lambda m, c: _lif_scalar(m, c, self.lif, with_variance=False)[2],
                         otypes=[float])
        return f(mu_bar, c_bar)

    def apply(self, x):
        """The noise-free activation h(x)."""
        x = np.asarray(x, dtype=float)
        if self.tag == HEAVISIDE:
            return (x >= 0).astype(float)
        if self.tag == RELU:
            return np.maximum(x, 0.0)
        return np.asarray(lif_rate(x, self.lif), dtype=float)

    def apply_derivative(self, x):
        x = np.asarray(x, dtype=float)
        if self.tag == HEAVISIDE:
            return np.zeros_like(x)
        if self.tag == RELU:
            return (x > 0).astype(float)
        return np.asarray(lif_rate_derivative(x, self.lif), dtype=float)

    @property
    def pointwise(self) -> Callable[[np.ndarray], np.ndarray] | None:
        """The signal function for Gaussian-state kinds; None for LIF."""
        return None if self.tag == LIF else self.apply

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return (0.0,) if self.tag in (HEAVISIDE, RELU) else ()


def ma_moments(kind: ActivationKind, mu_bar, c_bar) -> ScalarMoments:
    mu_bar, c_bar = _check_input(mu_bar, c_bar)
    return ScalarMoments(*map(_unwrap, kind.moments(mu_bar, c_bar)))


def ma_mean_derivative(kind: ActivationKind, mu_bar, c_bar):
    mu_bar, c_bar = _check_input(mu_bar, c_bar)
    return _unwrap(np.asarray(kind.mean_derivative(mu_bar, c_bar), dtype=float))


# ---------------------------------------------------------------------------
# Quadrature oracle
# ---------------------------------------------------------------------------

_TAIL = 14.0  # standardized truncation for piecewise rules


def _piecewise_nodes(mu_bar, s, breakpoints, n):
    z_cuts = sorted({(b - mu_bar) / s for b in breakpoints if abs((b - mu_bar) / s) < _TAIL})
    edges = [-_TAIL, *z_cuts, _TAIL]
    t, w = np.polynomial.legendre.leggauss(n)
    nodes, weights = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        half = 0.5 * (b - a)
        z = a + half * (t + 1.0)
        nodes.append(z)
        weights.append(half * w * normal_pdf(z))
    return np.concatenate(nodes), np.concatenate(weights)


def quadrature_ma(h: Callable, mu_bar: float, c_bar: float, n_nodes: int = 200,
                  breakpoints: Sequence[float] = ()) -> ScalarMoments:
    """Moments of h(X), X ~ N(mu_bar, c_bar), by numerical quadrature.

    Smooth h uses Gauss-Hermite with ``n_nodes`` nodes.  If h has kinks or
    jumps, pass their locations in ``breakpoints``: the line is then cut there
    and each piece gets its own Gauss-Legendre rule, which keeps the rule
    exact-to-rounding on piecewise-polynomial h.
    """
    mu_bar, c_bar = _check_input(mu_bar, c_bar)
    mu_bar, c_bar = float(mu_bar), float(c_bar)
    s = math.sqrt(c_bar)
    if breakpoints:
        z, w = _piecewise_nodes(mu_bar, s, breakpoints, n_nodes)
    else:
        if not 2 <= n_nodes <= 350:
            raise ValueError("Gauss-Hermite node count must lie in [2, 350] (weights underflow beyond)")
        z, w = np.polynomial.hermite_e.hermegauss(n_nodes)
        w = w / SQRT_2PI
    v = np.asarray(h(mu_bar + s * z), dtype=float)
    if np.any(np.isnan(v)):
        raise QuadratureError("signal function returned NaN at a quadrature node")
    mean = float(w @ v)
    second = float(w @ (v * v))
    chi = float(w @ (v * z))
    return ScalarMoments(mean, max(second - mean**2, 0.0), chi)


def kind_quadrature_ma(kind: ActivationKind, mu_bar, c_bar, n_nodes: int = 200) -> ScalarMoments:
    if kind.pointwise is None:
        raise ValueError("LIF has no pointwise signal function; use lif_ma")
    return quadrature_ma(kind.pointwise, mu_bar, c_bar, n_nodes, kind.breakpoints)


# ---------------------------------------------------------------------------
# Covariance assembly
# ---------------------------------------------------------------------------

def correlation(c_bar: np.ndarray) -> np.ndarray:
    """Correlation matrix of the last two axes, clamped to [-1, 1]."""
    d = np.sqrt(np.diagonal(c_bar, axis1=-2, axis2=-1))
    rho = c_bar / (d[..., :, None] * d[..., None, :])
    return np.clip(rho, -1.0, 1.0)


def covariance_from_kernels(var, chi, c_bar):
    """Linear-response covariance: chi_i chi_j rho_ij off the diagonal, var on it.

    Works on a single (n, n) matrix or a stack (..., n, n); units with a zero
    input variance carry chi = 0 and so drop out of every off-diagonal term.
    """
    d = np.sqrt(np.clip(np.diagonal(c_bar, axis1=-2, axis2=-1), 0.0, None))
    safe = np.where(d > 0, d, 1.0)
    rho = np.clip(c_bar / (safe[..., :, None] * safe[..., None, :]), -1.0, 1.0)
    chi = np.asarray(chi, dtype=float)
    out = chi[..., :, None] * chi[..., None, :] * rho
    n = out.shape[-1]
    idx = np.arange(n)
    out[..., idx, idx] = var
    return out


def assemble_covariance(mu_bar, c_bar, kind: ActivationKind) -> np.ndarray:
    mu_bar = np.asarray(mu_bar, dtype=float)
    c_bar = np.asarray(c_bar, dtype=float)
    if c_bar.shape != (mu_bar.size, mu_bar.size):
        raise ValueError(f"c_bar shape {c_bar.shape} does not match mu_bar of size {mu_bar.size}")
    diag = np.diag(c_bar)
    bad = np.flatnonzero(~(diag > 0))
    if bad.size:
        raise DomainError(f"non-positive input variance at coordinate {int(bad[0])}: {diag[bad[0]]}")
    _, var, chi = kind.moments(mu_bar, diag)
    out = covariance_from_kernels(np.asarray(var), np.asarray(chi), c_bar)
    return 0.5 * (out + out.T)
