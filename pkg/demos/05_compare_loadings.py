"""Comparing loading matrices across studies.

The RV coefficient measures how similar two loading configurations are
regardless of rotation.  Column-wise Pearson correlations, thresholded
at 0.2, give an edge list that links specific factors of two studies.
"""

import numpy as np

from msfa import FactorDims, fit_msfa, generate_true_params, loading_correlations
from msfa import rv_coefficient, scenario, simulate_dataset

spec = scenario(3, P=30, seed=51)
truth = generate_true_params(spec)
data, _ = simulate_dataset(truth, spec.n, seed=52)
fit = fit_msfa(data, FactorDims.from_totals(spec.K, spec.T))

est = fit.params
print(f"RV(estimated Phi, true Phi) = {rv_coefficient(est.phi, truth.phi):.3f}")
print(f"RV(Lambda_1, Lambda_4)      = {rv_coefficient(est.lambdas[0], est.lambdas[3]):.3f}")

# an orthogonal rotation leaves RV unchanged
q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(spec.K, spec.K)))
print(f"RV after rotating Phi       = {rv_coefficient(est.phi @ q, truth.phi):.3f}")

corr, edges = loading_correlations(est.lambdas[0], est.lambdas[3], threshold=0.2)
print(f"{len(edges)} of {corr.size} study-1/study-4 factor pairs have |corr| >= 0.2")
for i, j, c in sorted(edges, key=lambda e: -abs(e[2]))[:5]:
    print(f"  study 1 factor {i + 1} ~ study 4 factor {j + 1}: {c:+.2f}")
