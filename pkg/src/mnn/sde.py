"""Monte-Carlo ground truth for moment networks.

``simulate_network`` integrates the stochastic network whose stationary
moments a moment network approximates, with Euler-Maruyama::

    dx1 = (-x1 + x) dt + sqrt(2) s1 dB1                     v1 = x1
    tau dxl = (-xl + W v(l-1) + b) dt + sqrt(2 tau) sl dBl    vl = h(xl)
    y = W vL + b

``tau = hidden_tau`` sets the hidden-layer time constant relative to the
input layer.  ``tau = 0`` (the default) is the fast-synapse limit in which a
hidden state is its instantaneous drive plus fresh noise of variance
``sl^2`` -- the regime the moment recursion describes.  With ``tau > 0`` each
hidden layer low-pass filters its (already time-correlated) drive, which
shrinks the variance it passes on.  Set ``filtered_readout`` to integrate the
output with unit time constant as well.

The scalar and pair estimators check single moment activations.
"""
from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .activations import ActivationKind, ma_moments
from .network import MnnModel, forward


class SimulationError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SdeConfig:
    dt: float = 0.01
    burn_in: float = 20.0
    horizon: float = 100.0
    n_trajectories: int = 100
    seed: int = 0
    hidden_tau: float = 0.0
    filtered_readout: bool = False
    chunk_steps: int = 64

    def __post_init__(self):
        if not 0 < self.dt <= 0.05:
            raise ValueError(f"dt must lie in (0, 0.05], got {self.dt}")
        if self.burn_in < 0 or self.horizon <= 0:
            raise ValueError("burn_in must be >= 0 and horizon > 0")
        if self.n_trajectories < 2:
            raise ValueError("need at least two trajectories for standard errors")
        if self.hidden_tau < 0 or (0 < self.hidden_tau and self.dt > 0.05 * self.hidden_tau):
            raise ValueError("hidden_tau must be 0 or at least 20*dt")


class McMomentEstimate(NamedTuple):
    mean: np.ndarray
    cov: np.ndarray
    se_mean: np.ndarray
    se_cov: np.ndarray
    n_effective: float
    n_samples: int = 0


@dataclass
class SimulationResult:
    layers: list            # estimate of the signal entering each layer (None if not recorded)
    output: McMomentEstimate
    config: SdeConfig
    final_state: list = field(repr=False, default_factory=list)

    def layer(self, l: int) -> McMomentEstimate | None:
        return self.output if l == len(self.layers) else self.layers[l]


class _Accumulator:
    """Per-trajectory time sums of v and v v^T, taken about a fixed shift
    (the first sample) so that tiny variances do not cancel away."""

    def __init__(self, n_traj: int, dim: int):
        self.s1 = np.zeros((n_traj, dim))
        self.s2 = np.zeros((n_traj, dim, dim))
        self.shift = None
        self.n = 0

    def add(self, v):  # v: (steps, n_traj, dim)
        if len(v) == 0:
            return
        if self.shift is None:
            self.shift = v[0, 0].copy()
        d = np.swapaxes(v - self.shift, 0, 1)  # (n_traj, steps, dim)
        self.s1 += d.sum(axis=1)
        self.s2 += np.swapaxes(d, 1, 2) @ d
        self.n += v.shape[0]

    def estimate(self) -> McMomentEstimate:
        m_k = self.s1 / self.n
        centre = m_k.mean(axis=0)
        c_k = self.s2 / self.n - centre[:, None] * centre[None, :]
        c_k = 0.5 * (c_k + np.swapaxes(c_k, 1, 2))
        cov = c_k.mean(axis=0)
        K = m_k.shape[0]
        se_mean = m_k.std(axis=0, ddof=1) / math.sqrt(K)
        se_cov = c_k.std(axis=0, ddof=1) / math.sqrt(K)
        var = np.diag(cov)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = var / (K * se_mean**2)
        finite = ratio[np.isfinite(ratio)]
        n_eff = float(np.median(finite)) * K if finite.size else math.nan
        return McMomentEstimate(centre + self.shift, cov, se_mean, se_cov, n_eff, K * self.n)


def _check_kinds(model: MnnModel):
    for s in model.specs:
        if s.kind is not None and s.kind.pointwise is None:
            raise ValueError("LIF networks have no Gaussian-state simulation")


def simulate_network(model: MnnModel, x, cfg: SdeConfig = SdeConfig(),
                     record=None) -> SimulationResult:
    """Integrate the stochastic network at input ``x`` and estimate stationary moments.

    Moments pool time averages within each trajectory and averages across
    trajectories; standard errors come from the spread across trajectories.
    ``record`` lists the layers (0 = input) whose signal moments are kept;
    default all.  The output is always recorded.
    """
    _check_kinds(model)
    x = np.asarray(x, dtype=float)
    if x.shape != (model.in_dim,):
        raise ValueError(f"input must have length {model.in_dim}")
    K = cfg.n_trajectories
    hidden = [s for s in model.specs if not s.is_readout]
    dims = [model.in_dim] + [s.out_dim for s in hidden]
    sigmas = [model.input_sigma] + [s.sigma for s in hidden]
    offsets = np.cumsum([0] + dims)
    gens = [np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, k])))
            for k in range(K)]

    def drive(l, v_prev):
        return v_prev @ model.weights[l].T + model.biases[l]

    # start every layer at its noise-free value
    states = [np.tile(x, (K, 1))]
    sig = [states[0]]
    for l, s in enumerate(hidden):
        states.append(drive(l, sig[-1]))
        sig.append(s.kind.apply(states[-1]))
    y = drive(len(hidden), sig[-1])

    n_burn = int(round(cfg.burn_in / cfg.dt))
    n_keep = int(round(cfg.horizon / cfg.dt))
    record = range(len(dims)) if record is None else set(record)
    accs = [_Accumulator(K, d) if l in record else None for l, d in enumerate(dims)]
    out_acc = _Accumulator(K, model.out_dim)
    dt = cfg.dt
    tau = cfg.hidden_tau
    amp = [math.sqrt(2.0 * dt) * sigmas[0]] + [
        (s if tau == 0 else math.sqrt(2.0 * dt / tau) * s) for s in sigmas[1:]]

    step = 0
    total = n_burn + n_keep
    while step < total:
        n = min(cfg.chunk_steps, total - step)
        noise = np.stack([g.standard_normal((n, offsets[-1])) for g in gens], axis=1)
        keep = max(0, step + n - max(step, n_burn))
        bufs = [np.empty((keep, K, d)) if a is not None else None for a, d in zip(accs, dims)]
        out_buf = np.empty((keep, K, model.out_dim))
        for j in range(n):
            xi = noise[j]
            states[0] = states[0] + (x - states[0]) * dt + amp[0] * xi[:, :dims[0]]
            sig[0] = states[0]
            for l, s in enumerate(hidden, start=1):
                d = drive(l - 1, sig[l - 1])
                e = xi[:, offsets[l]:offsets[l + 1]]
                if tau == 0:
                    states[l] = d + amp[l] * e
                else:
                    states[l] = states[l] + (d - states[l]) * (dt / tau) + amp[l] * e
                sig[l] = s.kind.apply(states[l])
            d = drive(len(hidden), sig[-1])
            y = y + (d - y) * dt if cfg.filtered_readout else d
            if step + j >= n_burn:
                t = step + j - max(step, n_burn)
                for buf, v in zip(bufs, sig):
                    if buf is not None:
                        buf[t] = v
                out_buf[t] = y
        if not all(np.all(np.isfinite(s)) for s in states + [y]):
            raise SimulationError(f"non-finite state by time {(step + n) * dt:.4g}")
        for acc, buf in zip(accs, bufs):
            if acc is not None:
                acc.add(buf)
        out_acc.add(out_buf)
        step += n
    return SimulationResult([a.estimate() if a is not None else None for a in accs],
                            out_acc.estimate(), cfg,
                            [s.copy() for s in states])


def mc_scalar_ma(kind: ActivationKind, mu_bar: float, c_bar: float, n: int, seed: int) -> McMomentEstimate:
    """Sample mean and variance of h(X), X ~ N(mu_bar, c_bar), with standard errors."""
    if n < 1000:
        raise ValueError("use at least 1000 samples")
    if kind.pointwise is None:
        raise ValueError("LIF has no pointwise signal function")
    z = np.random.default_rng(seed).standard_normal(n)
    v = kind.apply(mu_bar + math.sqrt(c_bar) * z)
    mean = v.mean()
    d = v - mean
    m2 = d @ d / n
    var = m2 * n / (n - 1)
    # exact sampling variance of the unbiased variance, (m4 - m2^2 (n-3)/(n-1)) / n,
    # with the central moments estimated by their plain sample averages
    m4 = np.mean(d**4)
    se_var = math.sqrt(max(m4 - m2**2 * (n - 3) / (n - 1), 0.0) / n)
    return McMomentEstimate(np.array([mean]), np.array([[var]]),
                            np.array([math.sqrt(var / n)]), np.array([[se_var]]), float(n), n)


class PairEstimate(NamedTuple):
    cov: float
    se: float


def mc_pair_covariance(kind: ActivationKind, mu_i: float, mu_j: float, c_i: float, c_j: float,
                       rho: float, n: int, seed: int, chunk: int = 1_000_000) -> PairEstimate:
    """Covariance of (h(X_i), h(X_j)) for a correlated bivariate Gaussian."""
    if not abs(rho) < 1:
        raise ValueError("need |rho| < 1")
    if not (c_i > 0 and c_j > 0):
        raise ValueError("variances must be positive")
    if kind.pointwise is None:
        raise ValueError("LIF has no pointwise signal function")
    s_i, s_j = math.sqrt(c_i), math.sqrt(c_j)
    a = math.sqrt(1.0 - rho * rho)

    def pairs():
        # regenerated identically on each pass
        rng = np.random.default_rng(seed)
        for start in range(0, n, chunk):
            m = min(chunk, n - start)
            z1 = rng.standard_normal(m)
            z2 = rho * z1 + a * rng.standard_normal(m)
            yield kind.apply(mu_i + s_i * z1), kind.apply(mu_j + s_j * z2)

    su = sw = 0.0
    for u, w in pairs():
        su += u.sum()
        sw += w.sum()
    mu_u, mu_w = su / n, sw / n
    s_prod = s_sq = 0.0
    for u, w in pairs():
        p = (u - mu_u) * (w - mu_w)
        s_prod += p.sum()
        s_sq += p @ p
    cov = s_prod / (n - 1)
    var_p = (s_sq - n * (s_prod / n) ** 2) / (n - 1)
    return PairEstimate(float(cov), float(math.sqrt(max(var_p, 0.0) / n)))


# -- MNN vs simulation ---------------------------------------------------------

@dataclass
class MomentReport:
    """Analytic-vs-Monte-Carlo comparison rows.

    Each row is ``(layer, quantity, i, j, analytic, mc, se, z)`` where
    quantity is mean/var/cov and ``z = |analytic - mc| / se``.  Layer index
    ``depth`` is the network output.
    """

    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, layer, quantity, i, j, analytic, mc, se, resolution=0.0):
        """``resolution`` is the smallest discrepancy the sample could reveal
        when it shows no spread at all (e.g. a unit that never switched)."""
        err = abs(analytic - mc)
        if se > 0:
            z = err / se
        else:
            z = 0.0 if err <= max(resolution, 1e-12 * max(1.0, abs(mc))) else math.inf
        self.rows.append((layer, quantity, i, j, float(analytic), float(mc), float(se), float(z)))

    def max_z(self, quantity: str | None = None, layer: int | None = None) -> float:
        zs = [r[7] for r in self.rows
              if (quantity is None or r[1] == quantity) and (layer is None or r[0] == layer)]
        return max(zs) if zs else 0.0

    def extend(self, other: "MomentReport"):
        self.rows.extend(other.rows)

    def to_tsv(self) -> str:
        out = io.StringIO()
        out.write("layer\tquantity\ti\tj\tanalytic\tmc\tse\tz\n")
        for r in self.rows:
            out.write("\t".join(str(v) if not isinstance(v, float) else repr(v) for v in r) + "\n")
        return out.getvalue()

    def to_text(self) -> str:
        lines = ["moment comparison: analytic vs Monte Carlo"]
        for k, v in self.metadata.items():
            lines.append(f"  {k}: {v}")
        layers = sorted({r[0] for r in self.rows})
        lines.append(f"{'layer':>6} {'quantity':>9} {'entries':>8} {'max z':>9} {'mean |err|':>12}")
        for l in layers:
            for q in ("mean", "var", "cov"):
                sel = [r for r in self.rows if r[0] == l and r[1] == q]
                if sel:
                    lines.append(f"{l:>6} {q:>9} {len(sel):>8} {max(r[7] for r in sel):>9.3f} "
                                 f"{np.mean([abs(r[4] - r[5]) for r in sel]):>12.4e}")
        return "\n".join(lines) + "\n"


def _compare(report: MomentReport, layer: int, mu, cov, est: McMomentEstimate):
    n = len(mu)
    res = 1.0 / est.n_samples if est.n_samples else 0.0
    for i in range(n):
        report.add(layer, "mean", i, i, mu[i], est.mean[i], est.se_mean[i], res)
    if cov is None:
        return
    for i in range(n):
        report.add(layer, "var", i, i, cov[i, i], est.cov[i, i], est.se_cov[i, i], res)
        for j in range(i + 1, n):
            report.add(layer, "cov", i, j, cov[i, j], est.cov[i, j], est.se_cov[i, j], res)


def compare_mnn_vs_sde(model: MnnModel, x, cfg: SdeConfig = SdeConfig(),
                       layers: bool = True) -> MomentReport:
    """Run both the moment network and the simulation at ``x`` and tabulate the differences."""
    state = forward(model, x)
    sim = simulate_network(model, x, cfg, record=range(1, model.depth) if layers else ())
    report = MomentReport(metadata={
        "estimator": "time average within trajectory, pooled across trajectories; "
                     "SE from across-trajectory spread",
        **{k: v for k, v in asdict(cfg).items() if k != "chunk_steps"},
        "n_effective_output": round(sim.output.n_effective, 1),
    })
    if layers:
        for l in range(1, model.depth):
            _compare(report, l, state.mu[l], state.cov[l], sim.layers[l])
    _compare(report, model.depth, state.mu_y, state.cov_y, sim.output)
    return report


def scalar_ma_report(kind: ActivationKind, grid, n: int, seed: int) -> MomentReport:
    """Analytic moment activation vs :func:`mc_scalar_ma` over ``(mu_bar, c_bar)`` pairs."""
    report = MomentReport(metadata={"kind": kind.tag, "samples": n, "seed": seed})
    for idx, (mu, c) in enumerate(grid):
        an = ma_moments(kind, mu, c)
        est = mc_scalar_ma(kind, mu, c, n, seed + idx)
        # a sample with no spread cannot see events rarer than ~3/n (rule of three),
        # scaled by the typical squared output magnitude
        res = 3.0 / n * max(1.0, (abs(mu) + 5.0 * math.sqrt(c)) ** 2)
        report.add(idx, "mean", 0, 0, an.mean, est.mean[0], est.se_mean[0], res)
        report.add(idx, "var", 0, 0, an.variance, est.cov[0, 0], est.se_cov[0, 0], res)
    return report
