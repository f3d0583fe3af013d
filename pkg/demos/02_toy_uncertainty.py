"""Uncertainty near a decision boundary.

Points in the plane are labelled by whether their two coordinates share a
sign.  A ReLU moment network learns the rule; its output covariance, read as a
Gaussian entropy, should be larger for points close to the axes.

    python demos/02_toy_uncertainty.py [epochs]
"""
import sys

import numpy as np

from mnn.cli import build_model, load_config, load_task_data, shipped_config, train_config
from mnn.data import distance_to_axes
from mnn.smuc import train
from mnn.uncertainty import entropies, predict

cfg = load_config(shipped_config("toy2d"))
if len(sys.argv) > 1:
    cfg["train"]["epochs"] = int(sys.argv[1])
train_set, test_set = load_task_data(cfg)
model, log = train(build_model(cfg), train_set, train_config(cfg), test=test_set,
                   epoch_callback=lambda e, m, lg: print(f"epoch {e}: test accuracy {lg.last('test', 'accuracy'):.4f}"))

mu, cov = predict(model, test_set.inputs)
h = entropies(cov)
d = distance_to_axes(test_set.inputs)
print(f"\nPearson(entropy, distance to axes) = {np.corrcoef(h, d)[0, 1]:.3f}")
print("mean entropy by distance bin:")
edges = np.quantile(d, np.linspace(0, 1, 6))
for lo, hi in zip(edges[:-1], edges[1:]):
    sel = (d >= lo) & (d <= hi)
    print(f"  d in [{lo:.2f}, {hi:.2f}]: entropy {h[sel].mean():.3f}")
r = np.linalg.norm(test_set.inputs, axis=1)
print(f"Pearson(entropy, distance to origin) = {np.corrcoef(h, r)[0, 1]:.3f}  (input noise also spreads far points)")
