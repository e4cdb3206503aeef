"""Choosing the latent dimensions.

Selection runs in two steps.  Parallel analysis estimates each study's
total dimension T_s from its own correlation matrix.  Then the number K
of common factors is chosen by AIC, BIC and a sequence of likelihood
ratio tests over fits with J_s = T_s - K.

Note that a larger K means fewer free parameters here: one common column
replaces one specific column in every study.
"""

from msfa import horn_parallel_analysis, scenario, select_k
from msfa import generate_true_params, simulate_dataset

spec = scenario(2, P=20, seed=31)  # one common factor
data, _ = simulate_dataset(generate_true_params(spec), spec.n, seed=32)

T_hat = [horn_parallel_analysis(x, seed=s) for s, x in enumerate(data.studies)]
print("true T:", list(spec.T), " parallel analysis:", T_hat)

# use the true totals so the comparison of K is not confounded by T
report = select_k(data, spec.T, range(0, 4))
print(report.summary())
for note in report.notes:
    print("note:", note)
