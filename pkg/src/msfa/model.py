"""Core MSFA model: data containers, triangular masks, covariance assembly
and the Gaussian log-likelihood.

Study ``s`` has covariance ``Sigma_s = Phi Phi' + Lambda_s Lambda_s' + Psi_s``
where ``Phi`` (P x K) is shared by every study, ``Lambda_s`` (P x J_s) is
study specific and ``Psi_s`` is diagonal.  The stacked loading matrix
``Omega_s = [Phi, Lambda_s]`` is lower triangular: entry ``(p, c)`` is free
only when ``c <= p`` (0-based).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .exceptions import FeasibilityError, NumericError, PreconditionError

PSI_FLOOR = 1e-4

__all__ = [
    "PSI_FLOOR",
    "StudyDataset",
    "FactorDims",
    "FeasibilityReport",
    "MsfaParams",
    "FitResult",
    "phi_mask",
    "lambda_mask",
    "omega_mask",
    "assemble_sigma",
    "sample_covariance",
    "log_likelihood",
    "free_param_count",
    "validate_dims",
    "information_criteria_from",
]


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StudyDataset:
    """Multi-study data sharing one variable list.

    Use :meth:`from_arrays` to build one; the constructor only validates.

    Attributes
    ----------
    studies : tuple of ndarray
        One ``(n_s, P)`` matrix per study, rows are subjects.
    variable_names : tuple of str
    centered : bool
        Whether every column of every study sums to zero.
    column_means : tuple of ndarray
        Per-study means removed at centering time (zeros if never centered).
    column_scales : tuple of ndarray or None
        Per-study standard deviations divided out when standardizing.
    """

    studies: tuple
    variable_names: tuple
    centered: bool
    column_means: tuple
    column_scales: tuple | None = None

    def __post_init__(self):
        if len(self.studies) == 0:
            raise PreconditionError("at least one study is required")
        P = self.studies[0].shape[1]
        if len(self.variable_names) != P:
            raise PreconditionError(
                f"{len(self.variable_names)} variable names for {P} columns"
            )
        for s, x in enumerate(self.studies):
            if x.ndim != 2 or x.shape[1] != P:
                raise PreconditionError(
                    f"study {s} has shape {x.shape}, expected (n, {P})"
                )
            if x.shape[0] < 2:
                raise PreconditionError(f"study {s} has fewer than 2 rows")
            if not np.all(np.isfinite(x)):
                raise PreconditionError(f"study {s} contains non-finite values")
            if self.centered and not _is_centered(x):
                raise PreconditionError(f"study {s} is flagged centered but is not")

    @classmethod
    def from_arrays(
        cls,
        studies: Sequence,
        variable_names: Sequence[str] | None = None,
        center: bool = True,
        standardize: bool = False,
    ) -> "StudyDataset":
        """Build a dataset, optionally centering and standardizing each study.

        With ``center=False`` the matrices are stored untouched and the
        ``centered`` flag is set by inspecting the column sums.
        """
        mats = [np.array(x, dtype=float) for x in studies]
        if not mats:
            raise PreconditionError("at least one study is required")
        if any(m.ndim != 2 for m in mats):
            raise PreconditionError("every study must be a 2-D matrix")
        P = mats[0].shape[1]
        if variable_names is None:
            variable_names = [f"V{p + 1}" for p in range(P)]
        means, scales = [], []
        for i, m in enumerate(mats):
            mu = m.mean(axis=0) if center else np.zeros(m.shape[1])
            if center:
                m = m - mu
            if standardize:
                sd = m.std(axis=0)
                bad = np.flatnonzero(sd == 0)
                if bad.size:
                    raise PreconditionError(
                        f"study {i}: constant column {variable_names[bad[0]]!r}"
                    )
                m = m / sd
                scales.append(_frozen(sd))
            means.append(_frozen(mu))
            mats[i] = _frozen(m)
        centered = bool(center) or all(_is_centered(m) for m in mats)
        return cls(
            studies=tuple(mats),
            variable_names=tuple(str(v) for v in variable_names),
            centered=centered,
            column_means=tuple(means),
            column_scales=tuple(scales) if standardize else None,
        )

    @property
    def P(self) -> int:
        return self.studies[0].shape[1]

    @property
    def S(self) -> int:
        return len(self.studies)

    @property
    def n(self) -> tuple:
        return tuple(x.shape[0] for x in self.studies)

    @property
    def n_total(self) -> int:
        return int(sum(self.n))

    def covariances(self) -> list:
        return [sample_covariance(x) for x in self.studies]

    def stacked(self) -> np.ndarray:
        return np.vstack(self.studies)


def _is_centered(x: np.ndarray) -> bool:
    n = x.shape[0]
    tol = 1e-10 * n * max(1.0, float(np.max(np.abs(x), initial=0.0)))
    return bool(np.all(np.abs(x.sum(axis=0)) <= tol))


def sample_covariance(x: np.ndarray) -> np.ndarray:
    """``X'X / n`` of a centered matrix (maximum likelihood divisor)."""
    return x.T @ x / x.shape[0]


# ---------------------------------------------------------------------------
# dimensions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FactorDims:
    """Common dimension ``K`` and per-study specific dimensions ``J``."""

    K: int
    J: tuple

    def __post_init__(self):
        object.__setattr__(self, "J", tuple(int(j) for j in self.J))
        object.__setattr__(self, "K", int(self.K))
        if self.K < 0 or any(j < 0 for j in self.J):
            raise FeasibilityError(f"negative factor dimension in K={self.K}, J={self.J}")

    @classmethod
    def from_totals(cls, K: int, T: Sequence[int]) -> "FactorDims":
        J = [t - K for t in T]
        bad = [s for s, j in enumerate(J) if j < 0]
        if bad:
            raise FeasibilityError(f"T_s - K < 0 for study {bad[0]} (K={K}, T={list(T)})")
        return cls(K, tuple(J))

    @property
    def S(self) -> int:
        return len(self.J)

    @property
    def T(self) -> tuple:
        return tuple(self.K + j for j in self.J)

    def study_problems(self, P: int) -> list:
        """Per-study list of human readable violations (empty = feasible)."""
        out = []
        for s, t in enumerate(self.T):
            probs = []
            if t > P:
                probs.append(f"T_s={t} exceeds P={P}")
            lhs = P * t + P - t * (t - 1) // 2
            rhs = P * (P + 1) // 2
            if lhs > rhs:
                probs.append(f"parameter count {lhs} > {rhs} covariance entries")
            out.append(probs)
        return out

    def check(self, P: int) -> None:
        for s, probs in enumerate(self.study_problems(P)):
            if probs:
                raise FeasibilityError(f"study {s}: " + "; ".join(probs))


@dataclass(frozen=True)
class FeasibilityReport:
    passed: bool
    per_study: tuple
    reasons: tuple

    def __bool__(self):
        return self.passed


def validate_dims(dims: FactorDims, data: StudyDataset) -> FeasibilityReport:
    """Check the per-study counting inequality and ``P < min n_s``.

    Never raises; inspect ``passed`` and ``reasons``.
    """
    reasons = []
    P = data.P
    if dims.S != data.S:
        reasons.append(f"dims describe {dims.S} studies, data has {data.S}")
    per_study = []
    for s, probs in enumerate(dims.study_problems(P)):
        if s < data.S and P >= data.n[s]:
            probs = probs + [f"P >= n_s ({P} >= {data.n[s]})"]
        per_study.append(not probs)
        reasons.extend(f"study {s}: {p}" for p in probs)
    if P >= min(data.n):
        reasons.append("P ≥ min n_s")
    return FeasibilityReport(not reasons, tuple(per_study), tuple(reasons))


# ---------------------------------------------------------------------------
# masks and parameters
# ---------------------------------------------------------------------------


def omega_mask(P: int, K: int, J: int) -> np.ndarray:
    """Boolean mask of free entries of ``[Phi, Lambda_s]`` (True = free)."""
    rows = np.arange(P)[:, None]
    cols = np.arange(K + J)[None, :]
    return cols <= rows


def phi_mask(P: int, K: int) -> np.ndarray:
    return omega_mask(P, K, 0)


def lambda_mask(P: int, K: int, J: int) -> np.ndarray:
    return omega_mask(P, K, J)[:, K:]


@dataclass(frozen=True)
class MsfaParams:
    """Model parameters ``theta = (Phi, Lambda_1..S, psi_1..S)``.

    ``psi`` holds the diagonals of the uniqueness matrices.
    """

    phi: np.ndarray
    lambdas: tuple
    psi: tuple

    def __post_init__(self):
        object.__setattr__(self, "phi", _frozen(self.phi))
        object.__setattr__(self, "lambdas", tuple(_frozen(l) for l in self.lambdas))
        object.__setattr__(self, "psi", tuple(_frozen(p) for p in self.psi))
        if self.phi.ndim != 2:
            raise PreconditionError("phi must be a P x K matrix")
        P = self.phi.shape[0]
        if len(self.lambdas) != len(self.psi):
            raise PreconditionError("lambdas and psi must have one entry per study")
        for s, (lam, psi) in enumerate(zip(self.lambdas, self.psi)):
            if lam.ndim != 2 or lam.shape[0] != P:
                raise PreconditionError(f"lambda[{s}] has shape {lam.shape}, expected ({P}, J)")
            if psi.shape != (P,):
                raise PreconditionError(f"psi[{s}] has shape {psi.shape}, expected ({P},)")

    @property
    def P(self) -> int:
        return self.phi.shape[0]

    @property
    def K(self) -> int:
        return self.phi.shape[1]

    @property
    def S(self) -> int:
        return len(self.lambdas)

    @property
    def dims(self) -> FactorDims:
        return FactorDims(self.K, tuple(l.shape[1] for l in self.lambdas))

    def omega(self, s: int) -> np.ndarray:
        return np.hstack([self.phi, self.lambdas[s]])

    def replace(self, phi=None, lambdas=None, psi=None) -> "MsfaParams":
        return MsfaParams(
            self.phi if phi is None else phi,
            self.lambdas if lambdas is None else tuple(lambdas),
            self.psi if psi is None else tuple(psi),
        )

    def violations(self, psi_floor: float = PSI_FLOOR) -> list:
        """List of broken invariants (masks, psi floor, finiteness)."""
        out = []
        P, K = self.P, self.K
        if np.any(self.phi[~phi_mask(P, K)] != 0):
            out.append("phi has nonzero entries above the diagonal")
        for s, (lam, psi) in enumerate(zip(self.lambdas, self.psi)):
            if np.any(lam[~lambda_mask(P, K, lam.shape[1])] != 0):
                out.append(f"lambda[{s}] violates the block lower-triangular mask")
            if np.any(psi < psi_floor):
                out.append(f"psi[{s}] has entries below psi_floor={psi_floor}")
        arrays = [self.phi, *self.lambdas, *self.psi]
        if not all(np.all(np.isfinite(a)) for a in arrays):
            out.append("non-finite parameter values")
        return out

    def canonical_signs(self) -> "MsfaParams":
        """Flip columns so the largest-magnitude entry of each is positive."""
        def flip(m):
            if m.shape[1] == 0:
                return m
            idx = np.argmax(np.abs(m), axis=0)
            sign = np.sign(m[idx, np.arange(m.shape[1])])
            sign[sign == 0] = 1.0
            return m * sign

        return self.replace(phi=flip(self.phi), lambdas=[flip(l) for l in self.lambdas])


def _check_study(params: MsfaParams, s: int) -> None:
    if not isinstance(s, (int, np.integer)) or not 0 <= s < params.S:
        raise IndexError(f"study index {s} out of range for {params.S} studies")


def assemble_sigma(params: MsfaParams, s: int) -> np.ndarray:
    """Model covariance ``Phi Phi' + Lambda_s Lambda_s' + diag(psi_s)``."""
    _check_study(params, s)
    om = params.omega(s)
    sigma = om @ om.T
    sigma[np.diag_indices_from(sigma)] += params.psi[s]
    return sigma


def _check_compatible(params: MsfaParams, data: StudyDataset) -> None:
    if not data.centered:
        raise PreconditionError("data must be centered")
    if params.P != data.P or params.S != data.S:
        raise PreconditionError(
            f"params describe P={params.P}, S={params.S}; data has P={data.P}, S={data.S}"
        )


def _cholesky(sigma: np.ndarray, s: int):
    try:
        return linalg.cho_factor(sigma, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericError(f"covariance of study {s} is not positive definite") from exc


def study_loglik(sigma: np.ndarray, cov: np.ndarray, n: int, s: int = 0) -> float:
    """``-(n/2) (log|Sigma| + tr(Sigma^-1 C))`` for one study."""
    cf = _cholesky(sigma, s)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    tr = np.trace(linalg.cho_solve(cf, cov))
    return -0.5 * n * (logdet + tr)


def log_likelihood(params: MsfaParams, data: StudyDataset, covariances=None) -> float:
    """Multi-study log-likelihood without the ``2 pi`` constant.

    Adding ``-sum_s n_s P log(2 pi) / 2`` gives the full Gaussian density.
    """
    _check_compatible(params, data)
    covs = data.covariances() if covariances is None else covariances
    total = 0.0
    for s in range(data.S):
        total += study_loglik(assemble_sigma(params, s), covs[s], data.n[s], s)
    return float(total)


def free_param_count(dims: FactorDims, P: int) -> int:
    """Number of free parameters under the triangular constraints."""
    dims.check(P)
    K = dims.K
    q = P * K - K * (K - 1) // 2
    for j in dims.J:
        q += P * j - K * j - j * (j - 1) // 2
    return q + dims.S * P


def information_criteria_from(loglik: float, q: int, n_total: int) -> tuple:
    """``(AIC, BIC)`` with BIC sample size equal to the total observations."""
    return -2.0 * loglik + 2.0 * q, -2.0 * loglik + q * float(np.log(n_total))


# ---------------------------------------------------------------------------
# fit result
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitResult:
    """Output of an ECM fit.

    ``loglik_trace[0]`` is the log-likelihood at the starting point, so the
    trace has ``iterations + 1`` entries.
    """

    params: MsfaParams
    loglik_trace: np.ndarray
    iterations: int
    converged: bool
    final_loglik: float
    n_free_params: int
    aic: float
    bic: float
    n_total: int = 0
    regularized: tuple = ()
    config: dict = field(default_factory=dict)

    @property
    def dims(self) -> FactorDims:
        return self.params.dims
