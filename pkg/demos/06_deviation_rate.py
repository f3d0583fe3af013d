"""How fast a wrong input covariance is forgotten with depth.

Two copies of a deep Heaviside network agree on every mean and variance but
start from different input correlations.  The per-layer gap in covariance is
compared with the computed deviation rate r, which bounds its contraction.

    python demos/06_deviation_rate.py
"""
import numpy as np

from mnn.activations import ActivationKind
from mnn.network import build_specs, forward, init_params
from mnn.uncertainty import deviation_profile, infinity_norm, propagate_deviation

rng = np.random.default_rng(0)
model = init_params(build_specs([10] + [16] * 7 + [4], ActivationKind.heaviside()), seed=0)
A, B = rng.normal(size=(2, 10, 10))
c_true, c_other = A @ A.T / 10 + 0.1 * np.eye(10), B @ B.T / 10 + 0.1 * np.eye(10)
state = forward(model, rng.normal(size=10), input_cov=c_true)
profile = deviation_profile(state, model)

delta = c_true - c_other
print(f"{'layer':>5} {'|dC| in':>10} {'|dC| out':>10} {'ratio':>8} {'rate r':>8}")
for l, r in enumerate(profile.rates):
    nxt = propagate_deviation(state, model, l, delta)
    print(f"{l:5d} {infinity_norm(delta):10.3e} {infinity_norm(nxt):10.3e} "
          f"{infinity_norm(nxt) / infinity_norm(delta):8.4f} {r:8.4f}")
    delta = nxt
print("the measured ratio never exceeds r; r < 1 means the gap shrinks at that layer")
