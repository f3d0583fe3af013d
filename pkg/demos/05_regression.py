"""Predictive uncertainty for tabular regression.

Standardizes a CSV table (last column is the target), trains a one-hidden-layer
ReLU moment network on the mean-squared error, chooses the input noise level on
a validation split and scores test log-likelihood.

    python demos/05_regression.py table.csv [epochs]
"""
import sys

from mnn.activations import ActivationKind
from mnn.data import load_csv_regression, standardize_fit_apply, train_test_split
from mnn.network import build_specs, init_params
from mnn.smuc import TrainConfig, train
from mnn.uncertainty import predict, regression_metrics

if len(sys.argv) < 2:
    sys.exit(__doc__)
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 500
table = load_csv_regression(sys.argv[1])
tr, te = train_test_split(table, 0.1, seed=0)
fit, val = train_test_split(tr, 0.1, seed=100)
fit, (val, te), stats = standardize_fit_apply(fit, [val, te])

print(f"{'sigma_in':>8} {'val LL':>8} {'test LL':>8} {'test LL (orig)':>15} {'test MSE (orig)':>16}")
for s1 in (0.02, 0.05, 0.1):
    m = init_params(build_specs([table.inputs.shape[1], 50, 1], ActivationKind.relu(), sigma=0.0), 0,
                    input_sigma=s1)
    m, _ = train(m, fit, TrainConfig(loss="mse", learning_rate=1e-3, epochs=epochs))
    v = regression_metrics(*predict(m, val.inputs), val.targets, jitter=True)
    mu, cov = predict(m, te.inputs)
    t = regression_metrics(mu, cov, te.targets, jitter=True)
    o = regression_metrics(mu, cov, te.targets, jitter=True, target_scale=stats.target_scale)
    print(f"{s1:8.2f} {v.log_likelihood:8.3f} {t.log_likelihood:8.3f} {o.log_likelihood:15.3f} {o.mse:16.3f}")
