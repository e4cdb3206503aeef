"""Two-step choice of latent dimensions.

First the total dimension ``T_s`` of each study (parallel analysis), then
the number of common factors ``K`` by AIC, BIC and sequential likelihood
ratio tests, with ``J_s = T_s - K``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .ecm import FitConfig, fit_msfa
from .exceptions import FeasibilityError, PreconditionError
from .model import (
    FactorDims,
    FitResult,
    MsfaParams,
    StudyDataset,
    free_param_count,
    information_criteria_from,
)

logger = logging.getLogger(__name__)

__all__ = [
    "horn_parallel_analysis",
    "information_criteria",
    "lrt",
    "LrtResult",
    "SelectionReport",
    "select_k",
    "embed_smaller_k",
]

LRT_LEVEL = 0.05
TIE_TOL = 1e-9


def horn_parallel_analysis(study, n_random: int = 100, quantile: float = 0.95,
                           seed: int = 0, variable_names=None) -> int:
    """Number of factors retained by Horn's parallel analysis.

    Eigenvalues of the sample correlation matrix are compared, in order,
    with the ``quantile`` of the matching order statistic over ``n_random``
    standard-normal datasets of the same shape.  Counting stops at the first
    eigenvalue that does not exceed its reference quantile.

    Parameters
    ----------
    study : array-like, shape (n, P)
    n_random : int
    quantile : float
    seed : int

    Returns
    -------
    int
    """
    x = np.asarray(study, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 1:
        raise PreconditionError(f"need an (n >= 2, P >= 1) matrix, got shape {x.shape}")
    n, P = x.shape
    sd = x.std(axis=0)
    if np.any(sd == 0):
        j = int(np.flatnonzero(sd == 0)[0])
        name = variable_names[j] if variable_names is not None else f"column {j}"
        raise PreconditionError(f"zero variance in {name}")
    if P == 1:
        return 0
    observed = np.linalg.eigvalsh(np.corrcoef(x, rowvar=False))[::-1]
    rng = np.random.default_rng(seed)
    sims = np.empty((n_random, P))
    for r in range(n_random):
        z = rng.standard_normal((n, P))
        sims[r] = np.linalg.eigvalsh(np.corrcoef(z, rowvar=False))[::-1]
    ref = np.quantile(sims, quantile, axis=0)
    above = observed > ref
    return int(P if above.all() else np.argmin(above))


def information_criteria(fit: FitResult, data: StudyDataset) -> tuple:
    """``(AIC, BIC)`` of a fit, BIC using the total sample size."""
    q = free_param_count(fit.dims, data.P)
    return information_criteria_from(fit.final_loglik, q, data.n_total)


@dataclass(frozen=True)
class LrtResult:
    statistic: float
    df: int
    p_value: float


def lrt(fit_small: FitResult, fit_big: FitResult) -> LrtResult:
    """Likelihood ratio test between two fits with equal totals ``T_s``.

    ``fit_big`` has the larger ``K``.  Raising ``K`` at fixed ``T_s``
    removes parameters, so the fit with more free parameters serves as the
    alternative; ``df`` is the difference in free-parameter counts.
    """
    if fit_small.dims.T != fit_big.dims.T:
        raise PreconditionError(
            f"fits are not nested: T={fit_small.dims.T} vs T={fit_big.dims.T}"
        )
    if fit_small.params.P != fit_big.params.P:
        raise PreconditionError("fits have different numbers of variables")
    if fit_small.n_free_params >= fit_big.n_free_params:
        alt, null = fit_small, fit_big
    else:
        alt, null = fit_big, fit_small
    df = abs(fit_small.n_free_params - fit_big.n_free_params)
    stat = 2.0 * (alt.final_loglik - null.final_loglik)
    p = 1.0 if df == 0 else float(sps.chi2.sf(max(stat, 0.0), df))
    return LrtResult(float(stat), int(df), p)


def embed_smaller_k(params: MsfaParams) -> MsfaParams:
    """Express a ``K`` solution as a ``K - 1`` solution with equal likelihood.

    The last common column becomes the first specific column of every study.
    """
    K = params.K
    if K == 0:
        raise PreconditionError("no common factor to move")
    last = params.phi[:, K - 1 : K]
    lambdas = [np.hstack([last, lam]) for lam in params.lambdas]
    return MsfaParams(params.phi[:, : K - 1], tuple(lambdas), params.psi)


@dataclass
class SelectionReport:
    """Per-candidate summaries and the ``K`` chosen by each criterion.

    ``lrt`` maps ``K`` to the test of ``K`` against ``K - 1`` (the richer
    model is the alternative).
    """

    candidate_k: list
    T: tuple
    loglik: dict
    n_params: dict
    aic: dict
    bic: dict
    lrt: dict
    chosen_k_aic: int
    chosen_k_bic: int
    chosen_k_lrt: int
    notes: list = field(default_factory=list)
    fits: dict = field(default_factory=dict, repr=False, compare=False)

    def summary(self) -> str:
        lines = [f"{'K':>3} {'loglik':>14} {'q':>6} {'AIC':>14} {'BIC':>14} {'LRT p':>8}"]
        for k in self.candidate_k:
            t = self.lrt.get(k)
            p = f"{t.p_value:8.4f}" if t is not None else " " * 8
            lines.append(
                f"{k:>3} {self.loglik[k]:14.4f} {self.n_params[k]:6d} "
                f"{self.aic[k]:14.4f} {self.bic[k]:14.4f} {p}"
            )
        lines.append(f"AIC chooses K={self.chosen_k_aic}")
        lines.append(f"BIC chooses K={self.chosen_k_bic}")
        lines.append(f"LRT chooses K={self.chosen_k_lrt}")
        return "\n".join(lines)


def _argmin_smallest(values: dict) -> int:
    best = min(values.values())
    return min(k for k, v in values.items() if v <= best + TIE_TOL)


def select_k(data: StudyDataset, T, k_range, config: FitConfig | None = None,
             level: float = LRT_LEVEL) -> SelectionReport:
    """Fit every candidate ``K`` with ``J_s = T_s - K`` and compare.

    AIC and BIC pick the minimizing ``K`` (ties go to the smaller ``K``).
    Raising ``K`` removes parameters, so the LRT starts from the most
    parsimonious candidate (largest ``K``) and tests it against ``K - 1``;
    it stops at the first ``K`` the test does not reject and otherwise
    moves down.  If every test rejects, the smallest candidate is chosen.

    Consecutive fits are nested (``K + 1`` inside ``K``).  When the larger
    model fits worse than the smaller one, the smaller one is refitted from
    the embedding of the larger solution.
    """
    config = config or FitConfig()
    T = tuple(int(t) for t in T)
    if len(T) != data.S:
        raise PreconditionError(f"need {data.S} totals, got {len(T)}")
    notes = []
    ks = []
    for k in sorted(set(int(k) for k in k_range)):
        if k < 0 or k > min(T):
            notes.append(f"K={k} skipped: T_s - K < 0 for some study")
            continue
        try:
            FactorDims.from_totals(k, T).check(data.P)
        except FeasibilityError as exc:
            notes.append(f"K={k} skipped: {exc}")
            continue
        ks.append(k)
    if not ks:
        raise FeasibilityError("no feasible K in the candidate range")

    fits = {k: fit_msfa(data, FactorDims.from_totals(k, T), config) for k in ks}

    for k in reversed(ks):
        if k + 1 in fits and fits[k].final_loglik < fits[k + 1].final_loglik:
            start = embed_smaller_k(fits[k + 1].params)
            refit = fit_msfa(data, FactorDims.from_totals(k, T), config, init=start)
            notes.append(
                f"K={k} refitted from the K={k + 1} solution "
                f"(loglik {fits[k].final_loglik:.4f} -> {refit.final_loglik:.4f})"
            )
            if refit.final_loglik > fits[k].final_loglik:
                fits[k] = refit

    loglik = {k: f.final_loglik for k, f in fits.items()}
    n_params = {k: f.n_free_params for k, f in fits.items()}
    aic = {k: f.aic for k, f in fits.items()}
    bic = {k: f.bic for k, f in fits.items()}
    tests = {k: lrt(fits[k - 1], fits[k]) for k in ks if k - 1 in fits}

    # most parsimonious first: K is kept unless the richer K - 1 fits
    # significantly better
    chosen_lrt = ks[0]
    for k in reversed(ks):
        t = tests.get(k)
        if t is None or t.p_value >= level:
            chosen_lrt = k
            break
    notes.append(
        "lowering K raises the free-parameter count, so BIC's heavier "
        "penalty pushes it toward large K"
    )
    return SelectionReport(
        candidate_k=ks,
        T=T,
        loglik=loglik,
        n_params=n_params,
        aic=aic,
        bic=bic,
        lrt=tests,
        chosen_k_aic=_argmin_smallest(aic),
        chosen_k_bic=_argmin_smallest(bic),
        chosen_k_lrt=chosen_lrt,
        notes=notes,
        fits=fits,
    )
