"""Reading studies from CSV and saving results.

Studies are CSV files with a header row of variable names.  Under the
default "intersect" policy only variables present in every study are
kept, in the first study's order.  Fits are stored as JSON and re-checked
when loaded.
"""

import tempfile
from pathlib import Path

import numpy as np

from msfa import FactorDims, StudyDataset, fit_msfa
from msfa.io import ProjectConfig, load_fit, load_studies, save_dataset, save_fit

rng = np.random.default_rng(61)
out = Path(tempfile.mkdtemp(prefix="msfa_demo_"))

# two studies measuring overlapping gene panels
a = StudyDataset.from_arrays([rng.normal(size=(60, 7))],
                             ["g1", "g2", "g3", "g4", "g5", "g6", "g7"], center=False)
b = StudyDataset.from_arrays([rng.normal(size=(80, 7))],
                             ["g0", "g7", "g2", "g3", "g4", "g5", "g6"], center=False)
pa = save_dataset(a, out, prefix="panel_a")
pb = save_dataset(b, out, prefix="panel_b")

data = load_studies(ProjectConfig(pa + pb))
print("shared variables:", data.variable_names, " rows:", data.n)

fit = fit_msfa(data, FactorDims(1, (1, 1)))
save_fit(fit, out / "fit.json", data.variable_names)
back = load_fit(out / "fit.json")
print("reloaded fit identical:", np.array_equal(back.params.phi, fit.params.phi)
      and back.final_loglik == fit.final_loglik)
print("files in", out, ":", sorted(p.name for p in out.iterdir()))
