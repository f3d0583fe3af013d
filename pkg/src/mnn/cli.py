"""Command-line front end.

Subcommands: train, eval, verify-ma, verify-net, uq-report, attack, simulate.
Every command reads a YAML config (deep-merged over the shipped default),
writes ``config.yaml`` with the fully resolved settings into the output
directory, and exits 0 on success, 1 on a user error, 2 on a numeric abort.
"""
from __future__ import annotations

import argparse
import copy
import math
import os
import sys
from dataclasses import fields
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .activations import ActivationKind, kind_quadrature_ma, ma_moments
from .checkpoint import load_model, save_model
from .data import (DataError, Dataset, distance_to_axes, gen_sign_product, load_csv_regression,
                   load_idx, standardize_fit_apply, train_test_split)
from .network import MnnModel, build_specs, init_params
from .sde import MomentReport, SdeConfig, compare_mnn_vs_sde, scalar_ma_report, simulate_network
from .smuc import TrainConfig, train
from .uncertainty import (entropies, evaluate_dataset, fgsm_attack, gradient_masking_defense, msp,
                          predict, separability, softmax_entropy)

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2


class UserError(Exception):
    """Bad configuration or missing input; exit code 1."""


# -- configuration ---------------------------------------------------------------

def default_config() -> dict:
    text = resources.files("mnn").joinpath("configs/default.yaml").read_text()
    return yaml.safe_load(text)


def shipped_config(name: str) -> Path:
    """Path of a config shipped with the package (``default``, ``toy2d``, ``regress``)."""
    return Path(str(resources.files("mnn").joinpath(f"configs/{name}.yaml")))


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, seed=None, out=None, checkpoint=None) -> dict:
    cfg = default_config()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise UserError(f"config file not found: {path}")
        try:
            user = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise UserError(f"config {path}: {e}") from e
        if not isinstance(user, dict):
            raise UserError(f"config {path}: top level must be a mapping")
        unknown = set(user) - set(cfg)
        if unknown:
            raise UserError(f"config {path}: unknown keys {sorted(unknown)}")
        cfg = deep_merge(cfg, user)
    if seed is not None:
        cfg["seed"] = int(seed)
    if out is not None:
        cfg["out"] = str(out)
    if checkpoint is not None:
        cfg["checkpoint"] = str(checkpoint)
    if cfg["data"].get("mnist_dir") is None and os.environ.get("MNN_MNIST_DIR"):
        cfg["data"]["mnist_dir"] = os.environ["MNN_MNIST_DIR"]
    if cfg["data"].get("csv") is None and os.environ.get("MNN_CSV"):
        cfg["data"]["csv"] = os.environ["MNN_CSV"]
    if cfg["task"] not in ("classify", "regress", "toy2d"):
        raise UserError(f"unknown task {cfg['task']!r}")
    return cfg


def out_dir(cfg: dict, command: str) -> Path:
    d = Path(cfg["out"])
    d.mkdir(parents=True, exist_ok=True)
    echo = {"command": command, **cfg}
    (d / "config.yaml").write_text(yaml.safe_dump(echo, sort_keys=False))
    return d


def train_config(cfg: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    extra = set(cfg["train"]) - names
    if extra:
        raise UserError(f"unknown train settings {sorted(extra)}")
    return TrainConfig(**cfg["train"], seed=cfg["seed"])


def sde_config(cfg: dict) -> SdeConfig:
    return SdeConfig(**{"seed": cfg["seed"], **cfg["sde"]})


def build_model(cfg: dict) -> MnnModel:
    m = cfg["model"]
    specs = build_specs(m["dims"], ActivationKind.parse(m["kind"]), m["sigma"], m["covariance"])
    return init_params(specs, cfg["seed"], input_sigma=m["input_sigma"])


def checkpoint_path(cfg: dict) -> Path:
    return Path(cfg["checkpoint"]) if cfg.get("checkpoint") else Path(cfg["out"]) / "model.ckpt"


def read_model(cfg: dict) -> MnnModel:
    path = checkpoint_path(cfg)
    if not path.exists():
        raise UserError(f"checkpoint not found: {path} (train first or set checkpoint)")
    return load_model(path)


# -- data --------------------------------------------------------------------------

def _idx_pair(directory: Path, prefix: str):
    for suffix in ("", ".gz"):
        img = directory / f"{prefix}-images-idx3-ubyte{suffix}"
        lab = directory / f"{prefix}-labels-idx1-ubyte{suffix}"
        if img.exists() and lab.exists():
            return img, lab
    raise UserError(f"no {prefix}-images/labels IDX files in {directory}")


def find_idx(directory) -> tuple[Path, Path]:
    """Any images/labels IDX pair in a directory (used for OOD sets)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise UserError(f"not a directory: {directory}")
    imgs = sorted(directory.glob("*images*idx3*"))
    labs = sorted(directory.glob("*labels*idx1*"))
    if not imgs or not labs:
        raise UserError(f"no IDX images/labels in {directory}")
    return imgs[0], labs[0]


def load_task_data(cfg: dict) -> tuple[Dataset, Dataset]:
    """``(train, test)`` for the configured task; regression data is standardized."""
    d, seed = cfg["data"], cfg["seed"]
    if cfg["task"] == "toy2d":
        return gen_sign_product(d["toy_train"], seed), gen_sign_product(d["toy_test"], seed + 1)
    if cfg["task"] == "classify":
        if not d.get("mnist_dir"):
            raise UserError("data.mnist_dir is not set (or export MNN_MNIST_DIR)")
        root = Path(d["mnist_dir"])
        if not root.is_dir():
            raise UserError(f"data.mnist_dir does not exist: {root}")
        tr = load_idx(*_idx_pair(root, "train"), n_classes=d["n_classes"])
        te = load_idx(*_idx_pair(root, "t10k"), n_classes=d["n_classes"])
        return tr, te
    if not d.get("csv"):
        raise UserError("data.csv is not set (or export MNN_CSV)")
    table = load_csv_regression(d["csv"], d.get("target_columns"))
    tr, te = train_test_split(table, d["test_fraction"], seed)
    tr, (te,), _ = standardize_fit_apply(tr, [te])
    return tr, te


def _tsv(path: Path, header, rows):
    with open(path, "w") as f:
        f.write("\t".join(header) + "\n")
        for r in rows:
            f.write("\t".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)
                              for v in r) + "\n")


# -- commands ----------------------------------------------------------------------

def cmd_train(cfg: dict) -> int:
    out = out_dir(cfg, "train")
    train_set, test_set = load_task_data(cfg)
    model = build_model(cfg)
    if model.in_dim != train_set.inputs.shape[1]:
        raise UserError(f"model.dims[0]={model.in_dim} but the data has "
                        f"{train_set.inputs.shape[1]} features")

    def report(epoch, m, log):
        vals = {metric: v for e, s, metric, v in log.rows if e == epoch}
        print(f"epoch {epoch}: " + ", ".join(f"{k}={v:.4g}" for k, v in vals.items()), flush=True)

    model, log = train(model, train_set, train_config(cfg), test=test_set, epoch_callback=report)
    save_model(model, out / "model.ckpt")
    log.write(out / "train_log.tsv")
    if train_set.is_classification:
        metrics = ("accuracy", "entropy", "entropy_correct", "entropy_incorrect")
        cols = [log.get("test", k) for k in metrics]
        _tsv(out / "entropy_vs_epoch.tsv", ("epoch",) + metrics,
             [(i + 1, *vals) for i, vals in enumerate(zip(*cols))])
    print(f"wrote {out / 'model.ckpt'}")
    return EXIT_OK


def eval_metrics(model: MnnModel, cfg: dict, test: Dataset) -> dict:
    metrics = evaluate_dataset(model, test)
    if not test.is_classification and test.stats is not None:
        from .uncertainty import regression_metrics
        mu, cov = predict(model, test.inputs)
        orig = regression_metrics(mu, cov, test.targets, jitter=True,
                                  target_scale=test.stats.target_scale)
        metrics["mse_original_units"] = orig.mse
        metrics["log_likelihood_original_units"] = orig.log_likelihood
    if cfg["task"] == "toy2d":
        _, cov = predict(model, test.inputs)
        h = entropies(cov)
        metrics["entropy_distance_correlation"] = float(
            np.corrcoef(h, distance_to_axes(test.inputs))[0, 1])
    return metrics


def cmd_eval(cfg: dict) -> int:
    out = out_dir(cfg, "eval")
    model = read_model(cfg)
    _, test = load_task_data(cfg)
    metrics = eval_metrics(model, cfg, test)
    _tsv(out / "metrics.tsv", ("metric", "value"), sorted(metrics.items()))
    for k, v in sorted(metrics.items()):
        print(f"{k}\t{v:.6g}")
    return EXIT_OK


def cmd_verify_ma(cfg: dict) -> int:
    out = out_dir(cfg, "verify-ma")
    v = cfg["verify_ma"]
    grid = [(float(m), float(c)) for m in v["mu"] for c in v["c"]]
    report, quad_rows, ok = MomentReport(metadata={"samples": v["samples"], "seed": cfg["seed"]}), [], True
    for name in v["kinds"]:
        kind = ActivationKind.parse(name)
        if kind.pointwise is not None:
            rep = scalar_ma_report(kind, grid, int(v["samples"]), cfg["seed"])
            rep.rows = [(f"{name}:{mu}:{c}",) + r[1:] for r, (mu, c) in
                        zip(rep.rows, [g for g in grid for _ in range(2)])]
            ok &= rep.max_z() < 4
            report.extend(rep)
        for mu, c in grid:
            exact, quad = ma_moments(kind, mu, c), kind_quadrature_ma(kind, mu, c)
            err = max(abs(a - b) for a, b in zip(exact, quad))
            ok &= err < 1e-7
            quad_rows.append((name, mu, c, *exact, *quad, err))
    (out / "ma_report.tsv").write_text(report.to_tsv())
    _tsv(out / "ma_quadrature.tsv", ("kind", "mu", "c", "mean", "var", "chi", "q_mean", "q_var",
                                     "q_chi", "max_abs_err"), quad_rows)
    print(f"max MC z = {report.max_z():.3f}; max quadrature error = "
          f"{max(r[-1] for r in quad_rows):.3e}; {'PASS' if ok else 'FAIL'}")
    return EXIT_OK


def _test_inputs(cfg: dict, n: int):
    _, test = load_task_data(cfg)
    return test.inputs[:n]


def cmd_verify_net(cfg: dict) -> int:
    out = out_dir(cfg, "verify-net")
    model = read_model(cfg)
    xs = _test_inputs(cfg, int(cfg["verify_net"]["n_inputs"]))
    sc = sde_config(cfg)
    full = MomentReport(metadata={"inputs": len(xs)})
    for k, x in enumerate(xs):
        rep = compare_mnn_vs_sde(model, x, sc)
        full.metadata.update(rep.metadata)
        full.rows.extend((f"{k}:{r[0]}",) + r[1:] for r in rep.rows)
        d = model.depth
        print(f"input {k}: output max z mean={rep.max_z('mean', d):.2f} "
              f"var={rep.max_z('var', d):.2f} cov={rep.max_z('cov', d):.2f}", flush=True)
    (out / "net_report.tsv").write_text(full.to_tsv())
    (out / "net_report.txt").write_text(full.to_text())
    return EXIT_OK


def layer_separability(model: MnnModel, test: Dataset):
    """Per-layer entropy separability, misclassified (expected higher) vs correct."""
    mu, _, hs = predict(model, test.inputs, layers=True)
    correct = mu.argmax(axis=1) == test.targets
    rows = []
    for l in range(hs.shape[1]):
        h = hs[:, l]
        if np.isnan(h).any() or correct.sum() < 2 or (~correct).sum() < 2:
            rows.append((l + 1, math.nan))
        else:
            rows.append((l + 1, separability(h[~correct], h[correct])))
    return mu, hs, correct, rows


def ood_separability(model: MnnModel, in_data: Dataset, ood: Dataset) -> dict:
    """Entropy, softmax entropy (OOD expected higher) and MSP (in-distribution expected higher)."""
    mu_in, cov_in = predict(model, in_data.inputs)
    mu_out, cov_out = predict(model, ood.inputs)
    return {"entropy": separability(entropies(cov_out), entropies(cov_in)),
            "softmax_entropy": separability(softmax_entropy(mu_out), softmax_entropy(mu_in)),
            "msp": separability(msp(mu_in), msp(mu_out))}


def cmd_uq_report(cfg: dict, ood_path=None) -> int:
    out = out_dir(cfg, "uq-report")
    model = read_model(cfg)
    _, test = load_task_data(cfg)
    if not test.is_classification:
        raise UserError("uq-report needs a classification task")
    mu, hs, correct, sep = layer_separability(model, test)
    _tsv(out / "per_sample.tsv", ("index", "label", "pred", "correct", "entropy", "msp", "softmax_entropy"),
         [(i, int(test.targets[i]), int(mu[i].argmax()), int(correct[i]), hs[i, -1], msp(mu[i]),
           softmax_entropy(mu[i])) for i in range(len(test))])
    _tsv(out / "separability_by_layer.tsv", ("layer", "separability"), sep)
    vals = [s for _, s in sep]
    print("entropy separability (misclassified vs correct) by layer: "
          + ", ".join(f"{s:.3f}" for s in vals))
    print(f"nondecreasing over layers: {bool(np.all(np.diff(vals) >= 0))}")
    if ood_path is not None:
        ood = load_idx(*find_idx(ood_path), n_classes=256)  # labels unused; any byte value
        seps = ood_separability(model, test, ood)
        _tsv(out / "ood_separability.tsv", ("indicator", "separability"), sorted(seps.items()))
        for k, v in sorted(seps.items()):
            print(f"OOD separability {k}: {v:.3f}")
    return EXIT_OK


def attack_table(model: MnnModel, data: Dataset, eps_list, clip=None, chunk: int = 500):
    """Rows ``(eps, accuracy, median_entropy)`` of FGSM on ``data``."""
    rows = []
    for eps in eps_list:
        correct, hs = [], []
        for s in range(0, len(data), chunk):
            x, y = data.inputs[s:s + chunk], data.targets[s:s + chunk]
            adv = fgsm_attack(model, x, y, float(eps), clip)
            mu, cov = predict(model, adv)
            correct.append(mu.argmax(axis=1) == y)
            hs.append(entropies(cov))
        rows.append((float(eps), float(np.concatenate(correct).mean()), float(np.median(np.concatenate(hs)))))
    return rows


def cmd_attack(cfg: dict, defense: bool = False) -> int:
    out = out_dir(cfg, "attack")
    model = read_model(cfg)
    if defense:
        model = gradient_masking_defense(model)
    _, test = load_task_data(cfg)
    if not test.is_classification:
        raise UserError("attack needs a classification task")
    a = cfg["attack"]
    if a.get("n_samples"):
        test = test.subset(slice(0, int(a["n_samples"])))
    rows = attack_table(model, test, a["eps"], a.get("clip"))
    name = "attack_defense.tsv" if defense else "attack.tsv"
    _tsv(out / name, ("eps", "accuracy", "median_entropy"), rows)
    for eps, acc, h in rows:
        print(f"eps={eps:g}\taccuracy={acc:.4f}\tmedian_entropy={h:.4f}")
    return EXIT_OK


def cmd_simulate(cfg: dict) -> int:
    out = out_dir(cfg, "simulate")
    model = read_model(cfg)
    s = cfg["simulate"]
    if s.get("input") is not None:
        x = np.asarray(s["input"], dtype=float)
    else:
        x = _test_inputs(cfg, int(s["input_index"]) + 1)[-1]
    res = simulate_network(model, x, sde_config(cfg))
    rows = []
    for l in range(model.depth + 1):
        est = res.layer(l)
        for i in range(len(est.mean)):
            rows.append((l, "mean", i, i, est.mean[i], est.se_mean[i]))
        for i in range(len(est.mean)):
            for j in range(i, len(est.mean)):
                rows.append((l, "cov", i, j, est.cov[i, j], est.se_cov[i, j]))
    _tsv(out / "simulate.tsv", ("layer", "quantity", "i", "j", "estimate", "se"), rows)
    o = res.output
    print(f"samples per unit: {o.n_samples}; effective samples (output): {o.n_effective:.1f}")
    print("output mean: " + " ".join(f"{v:.4g}" for v in o.mean))
    print("output var:  " + " ".join(f"{v:.4g}" for v in np.diag(o.cov)))
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------

COMMANDS = ("train", "eval", "verify-ma", "verify-net", "uq-report", "attack", "simulate")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mnn", description="Moment neural networks")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML config merged over the shipped default")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--checkpoint", help="model file (default <out>/model.ckpt)")
        if name == "attack":
            s.add_argument("--defense", action="store_true",
                           help="zero the input and first hidden-layer noise before attacking")
        if name == "uq-report":
            s.add_argument("--ood", help="directory with an out-of-distribution IDX images/labels pair")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.out, args.checkpoint)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "verify-ma":
            return cmd_verify_ma(cfg)
        if args.command == "verify-net":
            return cmd_verify_net(cfg)
        if args.command == "uq-report":
            return cmd_uq_report(cfg, args.ood)
        if args.command == "attack":
            return cmd_attack(cfg, args.defense)
        return cmd_simulate(cfg)
    except ArithmeticError as e:
        print(f"mnn {args.command}: numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UserError, DataError, ValueError, FileNotFoundError, KeyError, TypeError) as e:
        print(f"mnn {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USER


def main(argv=None):
    sys.exit(run(argv))
