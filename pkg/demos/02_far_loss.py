"""
The fluence-aware regression loss
=================================

Four terms: pixel MSE, an L1 penalty on finite-difference gradients, one
minus Pearson correlation, and the absolute error of the delivered energy
(map sum times pixel area). The last two can be computed per beam or over
the whole plan; this demo shows why the scope matters and checks every
analytic gradient against central differences.
"""

from __future__ import annotations

import numpy as np

from fluencelab.losses import (LossWeights, ScopeConfig, energy_loss, far_loss, gradcheck,
                               gradcheck_inputs)

rng = np.random.default_rng(1)
target = rng.uniform(0, 1, (3, 16, 16))
pred = np.clip(target + rng.normal(0, 0.1, target.shape), 0, None)

terms = far_loss(pred, target, LossWeights(), ScopeConfig(), pixel_area=6.25)
print("terms:", {k: round(v, 5) for k, v in terms.as_dict().items()})
print("per-beam energy deviations:", np.round(terms.energy_deviations, 3).tolist())

# Two beams that miss by +5 and -5 look perfect when energy is pooled over
# the plan; per-beam scoring keeps both errors.
p = np.zeros((2, 2, 2))
p[0, 0, 0], p[1, 0, 0] = 5.0, -5.0
t = np.zeros((2, 2, 2))
print("cancellation: beamwise", energy_loss(p, t, 1.0, "beamwise"), " global", energy_loss(p, t, 1.0, "global"))

# With the default weights the energy term dominates the gradient: each
# pixel receives delta * pixel_area / B while MSE gives 2 * error / (B H W).
for token in ("B/B", "G/G"):
    kw = dict(weights=LossWeights(), scope=ScopeConfig.from_token(token), pixel_area=6.25)
    p, t = gradcheck_inputs(0, **kw)
    for comp in ("mse", "grad", "corr", "energy", "far"):
        res = gradcheck(comp, p, t, **kw)
        print(f"{token} {comp:>6}: max relative error {res.max_rel_error:.2e}  {'PASS' if res.passed else 'FAIL'}")
