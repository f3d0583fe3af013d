"""Supervised-mean / unsupervised-covariance training.

The loss only sees the output mean.  Gradients flow back through the mean
recursion alone, with every pre-activation variance held at the value the
forward pass recorded; the covariance path receives no gradient.
"""
from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, softmax

from .data import BatchIterator, Dataset
from .network import MnnModel, MomentState, forward, forward_batch_shared, mean_derivative


class NumericError(ArithmeticError):
    """Non-finite values met during training."""


class LossKind(str, enum.Enum):
    CROSS_ENTROPY = "cross_entropy"
    MSE = "mse"


def _targets(loss: LossKind, mu_y: np.ndarray, target):
    if loss is LossKind.CROSS_ENTROPY:
        label = np.asarray(target, dtype=np.int64).reshape(mu_y.shape[:-1])
        if np.any(label < 0) or np.any(label >= mu_y.shape[-1]):
            raise ValueError(f"label out of range for {mu_y.shape[-1]} classes")
        return label
    t = np.asarray(target, dtype=float).reshape(mu_y.shape)
    return t


def loss_value(loss: LossKind, mu_y, target) -> float:
    """Loss of one output mean, or the batch average for a stack of them."""
    loss = LossKind(loss)
    mu_y = np.asarray(mu_y, dtype=float)
    t = _targets(loss, mu_y, target)
    if loss is LossKind.CROSS_ENTROPY:
        lp = log_softmax(mu_y, axis=-1)
        per = -np.take_along_axis(np.atleast_2d(lp), np.atleast_1d(t)[:, None], axis=-1)[:, 0]
    else:
        per = np.sum((np.atleast_2d(mu_y) - np.atleast_2d(t)) ** 2, axis=-1)
    return float(per.mean())


def loss_grad(loss: LossKind, mu_y, target) -> np.ndarray:
    """d loss / d mu_y, matching :func:`loss_value` (batch-averaged)."""
    loss = LossKind(loss)
    mu_y = np.asarray(mu_y, dtype=float)
    t = _targets(loss, mu_y, target)
    n = 1 if mu_y.ndim == 1 else mu_y.shape[0]
    if loss is LossKind.CROSS_ENTROPY:
        g = softmax(mu_y, axis=-1)
        if mu_y.ndim == 1:
            g[t] -= 1.0
        else:
            g[np.arange(n), t] -= 1.0
    else:
        g = 2.0 * (mu_y - t)
    return g / n


@dataclass
class GradientSet:
    dW: list
    db: list
    dx: np.ndarray | None = None

    def flat(self) -> list[np.ndarray]:
        return [p for pair in zip(self.dW, self.db) for p in pair]


def _slopes(model: MnnModel, state: MomentState, k: int):
    spec = model.specs[k]
    if spec.covariance_enabled:
        return mean_derivative(spec.kind, state.mu_bar[k], state.frozen_variance(k))
    return spec.kind.apply_derivative(state.mu_bar[k])


def modified_backward(model: MnnModel, state: MomentState, loss: LossKind, target,
                      input_grad: bool = False) -> GradientSet:
    """Mean-path gradient with all covariances treated as constants."""
    if len(state.mu) != model.depth or np.shape(state.mu_y)[-1] != model.out_dim:
        raise ValueError("state was not produced by this model")
    g = loss_grad(loss, state.mu_y, target)
    dW, db = [None] * model.depth, [None] * model.depth
    for k in reversed(range(model.depth)):
        if not model.specs[k].is_readout:
            g = g * _slopes(model, state, k)
        mu = state.mu[k]
        if g.ndim == 1:
            dW[k] = np.outer(g, mu)
            db[k] = g.copy()
        else:
            dW[k] = g.T @ mu
            db[k] = g.sum(axis=0)
        if k or input_grad:
            g = g @ model.weights[k]
    return GradientSet(dW, db, g if input_grad else None)


def frozen_forward(model: MnnModel, x, frozen) -> np.ndarray:
    """Output mean with each layer's input variances pinned to ``frozen[k]``.

    ``frozen[k]`` is None for covariance-disabled layers (plain activation).
    """
    mu = np.asarray(x, dtype=float)
    for k, spec in enumerate(model.specs):
        mu_bar = mu @ model.weights[k].T + model.biases[k]
        if spec.is_readout:
            mu = mu_bar
        elif frozen[k] is None:
            mu = spec.kind.apply(mu_bar)
        else:
            var = np.broadcast_to(frozen[k], mu_bar.shape)
            live = var > 0
            m = spec.kind.mean(mu_bar, np.where(live, var, 1.0))
            mu = m if live.all() else np.where(live, m, spec.kind.apply(mu_bar))
    return mu


def frozen_loss(model: MnnModel, x, target, loss: LossKind, frozen) -> float:
    return loss_value(loss, frozen_forward(model, x, frozen), target)


@dataclass
class GradcheckReport:
    max_rel_error: float
    n_checked: int
    worst: tuple  # (layer, "W" | "b", flat index)

    def __str__(self):
        return (f"max relative error {self.max_rel_error:.3e} over {self.n_checked} "
                f"coordinates (worst: layer {self.worst[0]} {self.worst[1]}[{self.worst[2]}])")


def gradcheck_frozen_cov(model: MnnModel, x, target, loss: LossKind, step: float = 1e-5,
                         n_coords: int | None = None, seed: int = 0,
                         floor: float = 1e-6) -> GradcheckReport:
    """Central differences of the frozen-covariance loss against :func:`modified_backward`.

    Relative error is ``|a - b| / max(|a|, |b|, floor)``.  ``n_coords`` limits
    the check to a random subset of parameter coordinates.
    """
    if not step > 0:
        raise ValueError("finite-difference step must be positive")
    state = forward(model, x)
    frozen = [state.frozen_variance(k) for k in range(model.depth)]
    grads = modified_backward(model, state, loss, target)
    coords = [(k, name, i) for k in range(model.depth)
              for name, arr in (("W", model.weights[k]), ("b", model.biases[k]))
              for i in range(arr.size)]
    if n_coords is not None and n_coords < len(coords):
        pick = np.random.default_rng(seed).choice(len(coords), n_coords, replace=False)
        coords = [coords[j] for j in sorted(pick)]
    probe = model.copy()
    worst, worst_at = 0.0, coords[0]
    for k, name, i in coords:
        arr = (probe.weights if name == "W" else probe.biases)[k].reshape(-1)
        g = (grads.dW if name == "W" else grads.db)[k].reshape(-1)[i]
        keep = arr[i]
        arr[i] = keep + step
        up = frozen_loss(probe, x, target, loss, frozen)
        arr[i] = keep - step
        down = frozen_loss(probe, x, target, loss, frozen)
        arr[i] = keep
        fd = (up - down) / (2 * step)
        err = abs(fd - g) / max(abs(fd), abs(g), floor)
        if err > worst:
            worst, worst_at = err, (k, name, i)
    return GradcheckReport(worst, len(coords), worst_at)


# -- optimizers ---------------------------------------------------------------

def _check_finite(grads: GradientSet):
    for k, (dW, db) in enumerate(zip(grads.dW, grads.db)):
        for name, a in (("dW", dW), ("db", db)):
            if not np.all(np.isfinite(a)):
                raise NumericError(f"non-finite gradient in layer {k} {name}")


@dataclass
class Sgd:
    learning_rate: float
    weight_decay: float = 0.0

    def step(self, model: MnnModel, grads: GradientSet) -> MnnModel:
        _check_finite(grads)
        for p, g in zip(model.params(), grads.flat()):
            p -= self.learning_rate * (g + self.weight_decay * p)
        return model


@dataclass
class Adam:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, model: MnnModel, grads: GradientSet) -> MnnModel:
        _check_finite(grads)
        if not self.m:
            self.m = [np.zeros_like(p) for p in model.params()]
            self.v = [np.zeros_like(p) for p in model.params()]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(model.params(), grads.flat(), self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.learning_rate * ((m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p)
        return model


def optimizer_step(opt, model: MnnModel, grads: GradientSet):
    """Apply one update in place; returns ``(model, opt)``."""
    return opt.step(model, grads), opt


# -- training loop -----------------------------------------------------------

@dataclass
class TrainConfig:
    loss: LossKind = LossKind.CROSS_ENTROPY
    optimizer: str = "adam"
    learning_rate: float = 5e-4
    weight_decay: float = 0.0
    batch_size: int = 128
    epochs: int = 10
    covariance_mode: str = "per_sample"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.loss = LossKind(self.loss)
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.covariance_mode not in ("per_sample", "batch_shared"):
            raise ValueError(f"unknown covariance mode {self.covariance_mode!r}")

    def make_optimizer(self):
        if self.optimizer == "sgd":
            return Sgd(self.learning_rate, self.weight_decay)
        return Adam(self.learning_rate, self.beta1, self.beta2, self.eps, self.weight_decay)


@dataclass
class TrainingLog:
    """Rows of ``(epoch, split, metric, value)``."""

    rows: list = field(default_factory=list)

    def add(self, epoch: int, split: str, metric: str, value: float):
        self.rows.append((int(epoch), split, metric, float(value)))

    def get(self, split: str, metric: str) -> list[float]:
        return [v for _, s, m, v in self.rows if s == split and m == metric]

    def last(self, split: str, metric: str) -> float:
        return self.get(split, metric)[-1]

    def to_tsv(self) -> str:
        out = io.StringIO()
        out.write("epoch\tsplit\tmetric\tvalue\n")
        for e, s, m, v in self.rows:
            out.write(f"{e}\t{s}\t{m}\t{v!r}\n")
        return out.getvalue()

    def write(self, path):
        Path(path).write_text(self.to_tsv())

    @classmethod
    def read(cls, path) -> "TrainingLog":
        log = cls()
        for line in Path(path).read_text().splitlines()[1:]:
            e, s, m, v = line.split("\t")
            log.add(int(e), s, m, float(v))
        return log


def _evaluate(model: MnnModel, data: Dataset) -> dict:
    from .uncertainty import evaluate_dataset  # uncertainty builds on this module
    return evaluate_dataset(model, data)


def train(model: MnnModel, data: Dataset, config: TrainConfig, test: Dataset | None = None,
          log: TrainingLog | None = None, epoch_callback=None):
    """Seeded minibatch SMUC training; updates ``model`` in place and returns ``(model, log)``."""
    if len(data) == 0:
        raise ValueError("empty training set")
    log = TrainingLog() if log is None else log
    opt = config.make_optimizer()
    batches = BatchIterator(data, config.batch_size, config.seed)
    run = forward_batch_shared if config.covariance_mode == "batch_shared" else forward
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for b, batch in enumerate(batches):
            try:
                state = run(model, batch.inputs)
                grads = modified_backward(model, state, config.loss, batch.targets)
                optimizer_step(opt, model, grads)
            except (ArithmeticError, ValueError) as e:
                raise type(e)(f"epoch {epoch}, batch {b}: {e}") from e
            lv = loss_value(config.loss, state.mu_y, batch.targets)
            if not math.isfinite(lv):
                raise NumericError(f"epoch {epoch}, batch {b}: loss is {lv}")
            total += lv * len(batch)
            count += len(batch)
        log.add(epoch, "train", "loss", total / count)
        if test is not None:
            for name, value in _evaluate(model, test).items():
                log.add(epoch, "test", name, value)
        if epoch_callback is not None:
            epoch_callback(epoch, model, log)
    return model, log
