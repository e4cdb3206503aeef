"""Cross-study analytics: factor scores, reconstruction, cross-validated
prediction error, RV coefficient and loading correlations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .ecm import FitConfig, fit_fa, fit_msfa
from .exceptions import NumericError, PreconditionError
from .model import FactorDims, MsfaParams, StudyDataset, assemble_sigma

__all__ = [
    "posterior_scores",
    "reconstruct",
    "CvReport",
    "cv_mse",
    "rv_coefficient",
    "loading_correlations",
    "AlignResult",
    "align_loadings",
]


def posterior_scores(params: MsfaParams, x, s: int = 0):
    """Conditional means ``E[f | x]`` and ``E[l | x]`` for study ``s``.

    ``x`` is a centered P-vector or an ``(n, P)`` matrix of rows; the
    returned arrays follow the same layout.
    """
    sigma = assemble_sigma(params, s)
    x = np.asarray(x, dtype=float)
    try:
        cf = linalg.cho_factor(sigma, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericError(f"covariance of study {s} is singular") from exc
    om = params.omega(s)
    z = linalg.cho_solve(cf, x.T).T @ om
    K = params.K
    return z[..., :K], z[..., K:]


def reconstruct(params: MsfaParams, scores, s: int = 0) -> np.ndarray:
    """``Phi f + Lambda_s l`` for score pairs from :func:`posterior_scores`.

    For a single-study FA fit (``K = 0``) this is ``Lambda l``.
    """
    f, l = scores
    f = np.asarray(f, dtype=float)
    l = np.asarray(l, dtype=float)
    if f.shape[-1] != params.K or l.shape[-1] != params.lambdas[s].shape[1]:
        raise PreconditionError(
            f"score sizes {f.shape[-1]}, {l.shape[-1]} do not match "
            f"K={params.K}, J={params.lambdas[s].shape[1]}"
        )
    return f @ params.phi.T + l @ params.lambdas[s].T


def _predict_sse(params, x, s):
    xhat = reconstruct(params, posterior_scores(params, x, s), s)
    return float(np.sum((x - xhat) ** 2))


@dataclass
class CvReport:
    """Held-out reconstruction error of MSFA and the two FA baselines.

    ``mse`` divides the summed squared error by the total number of
    held-out rows; ``per_study`` divides by each study's held-out count.
    """

    mse: dict
    per_study: dict
    n_test: list
    split: dict
    relative_diff: dict
    fa_merged_T: int
    dims: dict = field(default_factory=dict)

    def summary(self) -> str:
        lines = [f"{m:<12} MSE {v:.6f}" for m, v in self.mse.items()]
        for m, d in self.relative_diff.items():
            lines.append(f"MSFA vs {m}: {100 * d:+.3f}% (positive = MSFA smaller)")
        return "\n".join(lines)


def cv_mse(data: StudyDataset, dims: FactorDims, split_fraction: float = 0.8,
           n_folds: int = 1, config: FitConfig | None = None,
           fa_merged_T: int | None = None) -> CvReport:
    """Monte Carlo cross-validation of the reconstruction error.

    Each fold splits every study at random (``split_fraction`` for
    training), fits MSFA, a single FA on the stacked training studies
    (``fa_merged_T`` factors, default ``K + max J_s``) and a separate FA per
    study (``T_s`` factors).  Held-out rows are centered with the training
    means of their study and predicted from their own factor scores.
    Splits derive from ``config.seed`` and the fold index.
    """
    from .simulation import replicate_seed

    config = config or FitConfig()
    if not 0 < split_fraction < 1:
        raise PreconditionError("split_fraction must lie in (0, 1)")
    if n_folds < 1:
        raise PreconditionError("n_folds must be >= 1")
    if fa_merged_T is None:
        fa_merged_T = dims.K + max(dims.J)
    methods = ("MSFA", "FA-merged", "FA-separate")
    sse = {m: np.zeros(data.S) for m in methods}
    n_test = np.zeros(data.S, dtype=int)

    for fold in range(n_folds):
        rng = np.random.default_rng(replicate_seed(config.seed, fold))
        train, test = [], []
        for s, x in enumerate(data.studies):
            n = x.shape[0]
            n_tr = int(round(split_fraction * n))
            if n - n_tr < 1 or n_tr < 2:
                raise PreconditionError(f"study {s}: split leaves an empty train or test set")
            perm = rng.permutation(n)
            mu = x[perm[:n_tr]].mean(axis=0)
            train.append(x[perm[:n_tr]] - mu)
            test.append(x[perm[n_tr:]] - mu)
            n_test[s] += n - n_tr

        tr = StudyDataset.from_arrays(train, data.variable_names)
        msfa = fit_msfa(tr, dims, config).params
        merged = fit_fa(np.vstack(tr.studies), fa_merged_T, config).params
        for s, xt in enumerate(test):
            sse["MSFA"][s] += _predict_sse(msfa, xt, s)
            sse["FA-merged"][s] += _predict_sse(merged, xt, 0)
            sep = fit_fa(tr.studies[s], dims.T[s], config).params
            sse["FA-separate"][s] += _predict_sse(sep, xt, 0)

    total = int(n_test.sum())
    mse = {m: float(sse[m].sum() / total) for m in methods}
    per_study = {m: [float(v) for v in sse[m] / n_test] for m in methods}
    rel = {
        m: (mse[m] - mse["MSFA"]) / mse[m] if mse[m] > 0 else 0.0
        for m in ("FA-merged", "FA-separate")
    }
    return CvReport(
        mse=mse,
        per_study=per_study,
        n_test=[int(v) for v in n_test],
        split={"fraction": split_fraction, "n_folds": n_folds, "seed": config.seed},
        relative_diff=rel,
        fa_merged_T=int(fa_merged_T),
        dims={"K": dims.K, "J": list(dims.J)},
    )


def rv_coefficient(A, B) -> float:
    """RV coefficient ``tr(AA'BB') / sqrt(tr((AA')^2) tr((BB')^2))``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if B.ndim == 1:
        B = B[:, None]
    if A.shape[0] != B.shape[0]:
        raise PreconditionError("A and B need the same number of rows")
    # tr(AA'BB') = ||A'B||_F^2, tr((AA')^2) = ||A'A||_F^2
    num = np.sum((A.T @ B) ** 2)
    da = np.sum((A.T @ A) ** 2)
    db = np.sum((B.T @ B) ** 2)
    if da == 0 or db == 0:
        raise PreconditionError("RV coefficient is undefined for a zero matrix")
    return float(num / np.sqrt(da * db))


def _column_corr(La, Lb, names_a=None, names_b=None):
    La = np.asarray(La, dtype=float)
    Lb = np.asarray(Lb, dtype=float)
    if La.shape[0] != Lb.shape[0]:
        raise PreconditionError("loading matrices need the same number of rows")
    za = La - La.mean(axis=0)
    zb = Lb - Lb.mean(axis=0)
    na = np.sqrt(np.sum(za**2, axis=0))
    nb = np.sqrt(np.sum(zb**2, axis=0))
    for norms, names, tag in ((na, names_a, "a"), (nb, names_b, "b")):
        bad = np.flatnonzero(norms == 0)
        if bad.size:
            j = int(bad[0])
            label = names[j] if names is not None else f"{tag}[{j}]"
            raise PreconditionError(f"constant loading column {label}")
    return (za.T @ zb) / np.outer(na, nb)


def loading_correlations(La, Lb, threshold: float = 0.2):
    """Pearson correlations between every column of ``La`` and of ``Lb``.

    Returns
    -------
    corr : ndarray, shape (a, b)
    edges : list of (i, j, corr)
        Pairs with ``|corr| >= threshold``.
    """
    corr = _column_corr(La, Lb)
    ii, jj = np.nonzero(np.abs(corr) >= threshold)
    edges = [(int(i), int(j), float(corr[i, j])) for i, j in zip(ii, jj)]
    return corr, edges


@dataclass(frozen=True)
class AlignResult:
    """``aligned[:, i] = signs[i] * est[:, permutation[i]]`` matches ``ref[:, i]``."""

    permutation: np.ndarray
    signs: np.ndarray
    aligned: np.ndarray
    correlations: np.ndarray


def align_loadings(est, ref) -> AlignResult:
    """Match estimated loading columns to reference columns.

    Greedy on absolute Pearson correlation, largest first, then each
    matched column is sign-flipped to correlate positively.  ``est`` may
    carry extra columns; unmatched ones are dropped.
    """
    est = np.asarray(est, dtype=float)
    ref = np.asarray(ref, dtype=float)
    m = ref.shape[1]
    if est.shape[1] < m:
        raise PreconditionError(f"est has {est.shape[1]} columns, ref needs {m}")
    corr = _column_corr(ref, est)  # (m, m_est)
    absc = np.abs(corr)
    perm = np.full(m, -1)
    used_r, used_e = set(), set()
    order = np.argsort(-absc, axis=None, kind="stable")
    for flat in order:
        i, j = divmod(int(flat), absc.shape[1])
        if i in used_r or j in used_e:
            continue
        perm[i] = j
        used_r.add(i)
        used_e.add(j)
        if len(used_r) == m:
            break
    signs = np.sign(corr[np.arange(m), perm])
    signs[signs == 0] = 1.0
    aligned = est[:, perm] * signs
    return AlignResult(perm, signs, aligned, np.abs(corr[np.arange(m), perm]))
