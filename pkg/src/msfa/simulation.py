"""Synthetic multi-study data from known MSFA parameters."""

from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .ecm import FitConfig
from .exceptions import FeasibilityError, MsfaError, PreconditionError
from .model import FactorDims, MsfaParams, StudyDataset, assemble_sigma, omega_mask

logger = logging.getLogger(__name__)

__all__ = [
    "ScenarioSpec",
    "SCENARIOS",
    "scenario",
    "replicate_seed",
    "generate_true_params",
    "simulate_dataset",
    "simulate_latent",
    "ScenarioTable",
    "run_scenario_study",
]

PAPER_N = (285, 140, 195, 578)
PAPER_T = (6, 7, 10, 9)
SCENARIOS = {1: 0, 2: 1, 3: 3}  # scenario id -> true K


@dataclass(frozen=True)
class ScenarioSpec:
    S: int = 4
    P: int = 100
    n: tuple = PAPER_N
    T: tuple = PAPER_T
    K: int = 0
    loading_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "n", tuple(int(v) for v in self.n))
        object.__setattr__(self, "T", tuple(int(v) for v in self.T))
        if len(self.n) != self.S or len(self.T) != self.S:
            raise PreconditionError("n and T need one entry per study")
        if self.K > min(self.T):
            raise FeasibilityError(f"K={self.K} exceeds min T_s={min(self.T)}")
        self.dims.check(self.P)
        if self.P >= min(self.n):
            raise FeasibilityError(f"P={self.P} must be below min n_s={min(self.n)}")

    @property
    def dims(self) -> FactorDims:
        return FactorDims.from_totals(self.K, self.T)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        return cls(**d)


def scenario(number: int, P: int = 100, loading_scale: float = 1.0, seed: int = 0) -> ScenarioSpec:
    """Preset with four studies of sizes 285/140/195/578 and totals 6/7/10/9.

    Scenarios 1, 2 and 3 have 0, 1 and 3 common factors.
    """
    if number not in SCENARIOS:
        raise PreconditionError(f"unknown scenario {number!r}; choose 1, 2 or 3")
    return ScenarioSpec(P=P, K=SCENARIOS[number], loading_scale=loading_scale, seed=seed)


def replicate_seed(seed: int, r: int) -> int:
    """64-bit seed for replicate ``r`` that depends only on ``(seed, r)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(r)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generate_true_params(spec: ScenarioSpec) -> MsfaParams:
    """Draw free loadings i.i.d. N(0, loading_scale^2) and psi ~ U[0.2, 1.2]."""
    rng = np.random.default_rng(spec.seed)
    P, K = spec.P, spec.K
    full = omega_mask(P, K, 0)
    phi = np.where(full, rng.standard_normal((P, K)) * spec.loading_scale, 0.0)
    lambdas, psis = [], []
    for j in spec.dims.J:
        mask = omega_mask(P, K, j)[:, K:]
        lambdas.append(np.where(mask, rng.standard_normal((P, j)) * spec.loading_scale, 0.0))
        psis.append(rng.uniform(0.2, 1.2, size=P))
    return MsfaParams(phi, tuple(lambdas), tuple(psis))


def simulate_dataset(params: MsfaParams, n, seed: int = 0, variable_names=None):
    """Draw ``n_s`` rows from ``N(0, Sigma_s)`` per study and center them.

    Sampling goes through the Cholesky factor of the assembled covariance.

    Returns
    -------
    data : StudyDataset
    raw_means : list of ndarray
        Column means removed from each study.
    """
    if len(n) != params.S:
        raise PreconditionError(f"need {params.S} sample sizes, got {len(n)}")
    bad = params.violations(psi_floor=np.finfo(float).tiny)
    if bad:
        raise PreconditionError("; ".join(bad))
    rng = np.random.default_rng(seed)
    mats = []
    for s, ns in enumerate(n):
        chol = np.linalg.cholesky(assemble_sigma(params, s))
        mats.append(rng.standard_normal((int(ns), params.P)) @ chol.T)
    data = StudyDataset.from_arrays(mats, variable_names=variable_names, center=True)
    return data, list(data.column_means)


def simulate_latent(params: MsfaParams, n, seed: int = 0):
    """Sample through the latent factors: ``x = Phi f + Lambda_s l + e``.

    Returns the uncentered matrices and the latent draws ``(f, l)`` per study.
    """
    rng = np.random.default_rng(seed)
    xs, fs, ls = [], [], []
    for s, ns in enumerate(n):
        f = rng.standard_normal((ns, params.K))
        l = rng.standard_normal((ns, params.lambdas[s].shape[1]))
        e = rng.standard_normal((ns, params.P)) * np.sqrt(params.psi[s])
        xs.append(f @ params.phi.T + l @ params.lambdas[s].T + e)
        fs.append(f)
        ls.append(l)
    return xs, fs, ls


@dataclass
class ScenarioTable:
    """Frequency of the chosen ``K`` per criterion across replicates."""

    candidate_k: list
    counts: dict  # criterion -> {K: count}
    n_replicates: int
    failures: list = field(default_factory=list)

    @property
    def n_failed(self) -> int:
        return len(self.failures)

    def row(self, criterion: str) -> list:
        return [self.counts[criterion].get(k, 0) for k in self.candidate_k]

    def to_csv(self) -> str:
        lines = ["method," + ",".join(f"K={k}" for k in self.candidate_k)]
        for crit in ("AIC", "BIC", "LRT"):
            lines.append(crit + "," + ",".join(str(c) for c in self.row(crit)))
        return "\n".join(lines) + "\n"


def _one_replicate(spec, r, k_range, config):
    from .selection import select_k

    rs = replicate_seed(spec.seed, r)
    rspec = ScenarioSpec(**{**spec.to_dict(), "seed": rs})
    params = generate_true_params(rspec)
    data, _ = simulate_dataset(params, spec.n, seed=rs + 1)
    report = select_k(data, spec.T, k_range, config)
    return report.chosen_k_aic, report.chosen_k_bic, report.chosen_k_lrt


def run_scenario_study(spec: ScenarioSpec, n_replicates: int, k_range,
                       config: FitConfig | None = None, workers: int = 1) -> ScenarioTable:
    """Repeat simulate-then-select and tally the chosen ``K``.

    Each replicate draws fresh parameters and data from
    ``replicate_seed(spec.seed, r)``.  Failed replicates are listed in
    ``failures`` and left out of the tallies.
    """
    if n_replicates < 1:
        raise PreconditionError("n_replicates must be >= 1")
    config = config or FitConfig()
    ks = sorted(set(int(k) for k in k_range))
    counts = {c: Counter() for c in ("AIC", "BIC", "LRT")}
    failures = []

    def work(r):
        try:
            return r, _one_replicate(spec, r, ks, config), None
        except MsfaError as exc:
            return r, None, str(exc)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(work, range(n_replicates)))
    else:
        results = [work(r) for r in range(n_replicates)]
    for r, chosen, err in results:
        if err is not None:
            logger.warning("replicate %d failed: %s", r, err)
            failures.append((r, err))
            continue
        for crit, k in zip(("AIC", "BIC", "LRT"), chosen):
            counts[crit][k] += 1
    return ScenarioTable(ks, {c: dict(v) for c, v in counts.items()}, n_replicates, failures)
