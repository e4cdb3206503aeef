"""Maximum likelihood estimation of MSFA by Expectation Conditional
Maximization.

One iteration computes the posterior moments of the stacked latent vector
``z = (f, l)`` in every study, then runs three conditional maximizations of
the expected complete-data log-likelihood ``Q``: the common loadings, each
study-specific loading matrix, and each uniqueness vector.  Every CM step is
an exact row-wise maximizer over the free (lower-triangular) entries, so
``Q`` and therefore the observed log-likelihood never decrease.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg

from .exceptions import FeasibilityError, NumericError, PreconditionError
from .model import (
    PSI_FLOOR,
    FactorDims,
    FitResult,
    MsfaParams,
    StudyDataset,
    free_param_count,
    information_criteria_from,
    omega_mask,
    phi_mask,
)

logger = logging.getLogger(__name__)

__all__ = [
    "FitConfig",
    "EStepStats",
    "compute_estep_stats",
    "expected_complete_loglik",
    "cm_update_phi",
    "cm_update_lambda",
    "cm_update_psi",
    "init_params",
    "fit_msfa",
    "fit_fa",
    "run_ecm",
]

RIDGE = 1e-10
# uniquenesses below this share of the variable's variance count as collapsing
HEYWOOD_RATIO = 1e-2
# relative gain per cycle below which a collapsing uniqueness is tested
HEYWOOD_STALL = 1e-7


@dataclass(frozen=True)
class FitConfig:
    tol: float = 1e-8
    max_iter: int = 5000
    psi_floor: float = PSI_FLOOR
    seed: int = 0
    trace: bool = False  # log every iteration at DEBUG level
    accelerate: bool = True  # SQUAREM + parameter expansion around the ECM map

    def __post_init__(self):
        if not self.tol > 0:
            raise PreconditionError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise PreconditionError(f"max_iter must be >= 1, got {self.max_iter}")
        if not self.psi_floor > 0:
            raise PreconditionError("psi_floor must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EStepStats:
    """Posterior sufficient statistics of the stacked latent vector.

    ``S1[s] = sum_i x_is E[z_is | x_is]'`` is ``P x T_s`` and
    ``S2[s] = sum_i E[z_is z_is' | x_is]`` is ``T_s x T_s``; the first ``K``
    columns belong to the common factors.
    """

    S1: tuple
    S2: tuple
    K: int
    n: tuple

    def s1_f(self, s):
        return self.S1[s][:, : self.K]

    def s1_l(self, s):
        return self.S1[s][:, self.K :]

    def s2_ff(self, s):
        return self.S2[s][: self.K, : self.K]

    def s2_fl(self, s):
        return self.S2[s][: self.K, self.K :]

    def s2_ll(self, s):
        return self.S2[s][self.K :, self.K :]


def _study_ll(om, psi, nc, n, s):
    # straight from the Cholesky factor of Sigma: the Woodbury form of the
    # trace cancels badly once some psi approaches the floor
    sigma = om @ om.T
    sigma[np.diag_indices_from(sigma)] += psi
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"covariance of study {s} is not positive definite") from exc
    w = linalg.solve_triangular(chol, nc, lower=True, check_finite=False)
    w = linalg.solve_triangular(chol, w.T, lower=True, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (n * logdet + np.trace(w))


def _estep(params: MsfaParams, covs, n):
    """E-step statistics plus the log-likelihood at ``params``.

    The posterior moments go through the Woodbury identity in the latent
    dimension: ``M = I + Omega' Psi^-1 Omega``, ``delta = M^-1 Omega'
    Psi^-1`` and ``V = M^-1``.
    """
    S1, S2 = [], []
    ll = 0.0
    for s in range(params.S):
        om = params.omega(s)
        psi = params.psi[s]
        nc = n[s] * covs[s]
        b = om / psi[:, None]
        g = nc @ b
        m = b.T @ om
        m[np.diag_indices_from(m)] += 1.0
        try:
            chol = np.linalg.cholesky(m)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"covariance of study {s} is not positive definite") from exc
        minv = linalg.cho_solve((chol, True), np.eye(m.shape[0]), check_finite=False)
        if not np.all(np.isfinite(minv)):
            raise NumericError(f"covariance of study {s} is not positive definite")
        ll += _study_ll(om, psi, nc, n[s], s)
        s1 = g @ minv
        s2 = n[s] * minv + minv @ (b.T @ g) @ minv
        S1.append(s1)
        S2.append(0.5 * (s2 + s2.T))
    return EStepStats(tuple(S1), tuple(S2), params.K, tuple(n)), float(ll)


def compute_estep_stats(params: MsfaParams, data: StudyDataset) -> EStepStats:
    """Posterior first and second moment sums for every study.

    With ``delta = Omega' Sigma^-1`` and ``V = I - delta Omega`` the sums are
    ``S1 = n C delta'`` and ``S2 = n V + delta (n C) delta'``.
    """
    _check_data(params, data)
    return _estep(params, data.covariances(), data.n)[0]


def _check_data(params, data):
    if not data.centered:
        raise PreconditionError("data must be centered")
    if params.P != data.P or params.S != data.S:
        raise PreconditionError("parameter and data dimensions disagree")


def expected_complete_loglik(params: MsfaParams, stats: EStepStats, covs) -> float:
    """``Q`` up to terms that do not depend on the parameters."""
    total = 0.0
    for s in range(params.S):
        om = params.omega(s)
        n = stats.n[s]
        quad = n * np.diag(covs[s]) - 2.0 * np.sum(om * stats.S1[s], axis=1)
        quad = quad + np.sum((om @ stats.S2[s]) * om, axis=1)
        psi = params.psi[s]
        total += -0.5 * np.sum(n * np.log(psi) + quad / psi)
    return float(total)


def _masked_batch_solve(lhs, rhs, free, flags, label):
    """Solve ``lhs[p] x = rhs[p]`` over the free coordinates of each row.

    Fixed coordinates get identity rows/columns and a zero right-hand side,
    so every row is one batched solve and fixed entries come back as 0.
    ``lhs`` is ``(P, m, m)`` or a shared ``(m, m)``.
    """
    m = free.shape[1]
    ff = free[:, :, None] & free[:, None, :]
    a = np.where(ff, lhs, 0.0)
    idx = np.arange(m)
    a[:, idx, idx] += ~free
    b = np.where(free, rhs, 0.0)[:, :, None]
    try:
        x = np.linalg.solve(a, b)[:, :, 0]
        if not np.all(np.isfinite(x)):
            raise np.linalg.LinAlgError("non-finite solution")
    except np.linalg.LinAlgError:
        scale = np.trace(a, axis1=1, axis2=2) / m
        a = a + (RIDGE * np.maximum(scale, 1.0))[:, None, None] * np.eye(m)
        if flags is not None:
            flags.append(label)
        try:
            x = np.linalg.solve(a, b)[:, :, 0]
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"singular CM system in {label}") from exc
    return np.where(free, x, 0.0)


def cm_update_phi(stats: EStepStats, params: MsfaParams, flags=None) -> np.ndarray:
    """Row-wise maximizer of ``Q`` over the free entries of ``Phi``.

    Row ``p`` solves ``[sum_s A_ff / psi_sp] phi_p =
    sum_s (S1_f[p] - A_fl lambda_sp) / psi_sp``.
    """
    K, P = params.K, params.P
    if K == 0:
        return params.phi
    lhs = np.zeros((P, K, K))
    rhs = np.zeros((P, K))
    for s in range(params.S):
        w = 1.0 / params.psi[s]
        lhs += w[:, None, None] * stats.s2_ff(s)[None]
        r = stats.s1_f(s) - params.lambdas[s] @ stats.s2_fl(s).T
        rhs += w[:, None] * r
    return _masked_batch_solve(lhs, rhs, phi_mask(P, K), flags, "phi")


def cm_update_lambda(stats: EStepStats, params: MsfaParams, s: int, flags=None) -> np.ndarray:
    """Row-wise maximizer of ``Q`` over the free entries of ``Lambda_s``.

    The uniqueness of each row cancels, leaving ``A_ll lambda_p =
    S1_l[p] - A_lf phi_p``.
    """
    lam = params.lambdas[s]
    P, K, J = params.P, params.K, lam.shape[1]
    if J == 0:
        return lam
    a_ll = stats.s2_ll(s)
    rhs = stats.s1_l(s) - params.phi @ stats.s2_fl(s)
    free = omega_mask(P, K, J)[:, K:]
    return _masked_batch_solve(a_ll, rhs, free, flags, f"lambda[{s}]")


def cm_update_psi(stats: EStepStats, params: MsfaParams, cov, s: int,
                  psi_floor: float = PSI_FLOOR) -> np.ndarray:
    """Closed-form uniqueness update for study ``s``, clamped at ``psi_floor``.

    ``cov`` is the study's sample covariance (``X'X / n``) or the
    :class:`StudyDataset` itself.
    """
    if isinstance(cov, StudyDataset):
        cov = cov.covariances()[s]
    om = params.omega(s)
    n = stats.n[s]
    psi = (
        np.diag(cov)
        - 2.0 * np.sum(om * stats.S1[s], axis=1) / n
        + np.sum((om @ stats.S2[s]) * om, axis=1) / n
    )
    return np.maximum(psi, psi_floor)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _lower_rotate(load: np.ndarray, offset: int = 0) -> np.ndarray:
    """Rotate ``load`` (P x m) so rows ``offset..offset+m-1`` form a lower
    triangle, keeping ``load load'``."""
    m = load.shape[1]
    if m == 0:
        return load
    q, _ = np.linalg.qr(load[offset : offset + m].T)
    out = load @ q
    block = out[offset : offset + m]
    block[np.triu_indices(m, 1)] = 0.0
    return out


def _sign_fix(m: np.ndarray) -> np.ndarray:
    if m.shape[1] == 0:
        return m
    idx = np.argmax(np.abs(m), axis=0)
    sign = np.sign(m[idx, np.arange(m.shape[1])])
    sign[sign == 0] = 1.0
    return m * sign


def _fill_dead_columns(load, mask, scale, rng):
    dead = ~np.any(load != 0, axis=0)
    if np.any(dead):
        noise = 0.01 * scale * rng.standard_normal(load.shape)
        load = np.where(mask & dead[None, :], noise, load)
    return load


def _pca_fa_start(cov: np.ndarray, J: int, psi_floor: float):
    """Principal-factor starting point for a single-study FA."""
    P = cov.shape[0]
    if J == 0:
        return np.zeros((P, 0)), np.maximum(np.diag(cov).copy(), psi_floor)
    evals, evecs = np.linalg.eigh(cov)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    noise = evals[J:].mean() if J < P else 0.0
    load = evecs[:, :J] * np.sqrt(np.maximum(evals[:J] - noise, 1e-6 * evals[0]))
    load = _sign_fix(_lower_rotate(load))
    psi = np.diag(cov) - np.sum(load**2, axis=1)
    psi = np.maximum(psi, np.maximum(0.05 * np.diag(cov), psi_floor))
    return load, psi


def _study_fa(x: np.ndarray, J: int, config: FitConfig, rng):
    """Loosely converged single-study FA used only to seed the main fit."""
    data = StudyDataset.from_arrays([x], center=False)
    cov = data.covariances()[0]
    load, psi = _pca_fa_start(cov, J, config.psi_floor)
    scale = float(np.sqrt(np.mean(np.diag(cov))))
    load = _fill_dead_columns(load, omega_mask(x.shape[1], 0, J), scale, rng)
    start = MsfaParams(np.zeros((x.shape[1], 0)), (load,), (psi,))
    loose = FitConfig(tol=1e-4, max_iter=200, psi_floor=config.psi_floor, seed=config.seed,
                      accelerate=config.accelerate)
    params, *_ = run_ecm(data, start, loose)
    return params.lambdas[0], params.psi[0]


def init_params(data: StudyDataset, dims: FactorDims, seed: int = 0,
                config: FitConfig | None = None) -> MsfaParams:
    """Starting values: stacked PCA for ``Phi``, per-study FA for the rest.

    The first ``K`` principal directions of the row-stacked studies, scaled
    by ``singular value / sqrt(n)``, seed ``Phi``.  A separate FA with
    ``T_s`` factors in each study seeds ``psi_s``; ``Lambda_s`` takes the
    ``J_s`` leading directions of that fit's factor covariance after
    ``Phi Phi'`` is subtracted.  Entries outside the triangular masks are
    zeroed.  Deterministic given ``seed``.
    """
    config = config or FitConfig(seed=seed)
    _validate(data, dims)
    rng = np.random.default_rng(seed)
    P, K = data.P, dims.K
    scale = float(np.sqrt(np.mean([np.mean(np.diag(c)) for c in data.covariances()])))

    if K > 0:
        x = data.stacked()
        _, sv, vt = np.linalg.svd(x, full_matrices=False)
        phi = vt[:K].T * (sv[:K] / np.sqrt(x.shape[0]))
        phi = _sign_fix(phi)
        if K > 1:
            phi = _sign_fix(_lower_rotate(phi))
        phi = np.where(phi_mask(P, K), phi, 0.0)
        phi = _fill_dead_columns(phi, phi_mask(P, K), scale, rng)
    else:
        phi = np.zeros((P, 0))

    lambdas, psis = [], []
    for s, x in enumerate(data.studies):
        J = dims.J[s]
        load, psi = _study_fa(x, K + J, config, rng)
        # specific part: leading directions of the study's factor covariance
        # left over once the common start is taken out
        evals, evecs = np.linalg.eigh(load @ load.T - phi @ phi.T)
        evals, evecs = evals[::-1][:J], evecs[:, ::-1][:, :J]
        lam = evecs * np.sqrt(np.maximum(evals, 0.0))
        lam = _sign_fix(_lower_rotate(lam, offset=K))
        mask = omega_mask(P, K, J)[:, K:]
        lam = np.where(mask, lam, 0.0)
        lam = _fill_dead_columns(lam, mask, scale, rng)
        lambdas.append(lam)
        psis.append(np.maximum(psi, config.psi_floor))
    return MsfaParams(phi, tuple(lambdas), tuple(psis))


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def _validate(data: StudyDataset, dims: FactorDims) -> None:
    if not data.centered:
        raise PreconditionError("data must be centered")
    if dims.S != data.S:
        raise FeasibilityError(f"dims describe {dims.S} studies but data has {data.S}")
    dims.check(data.P)


def _expand_reduce(params: MsfaParams, stats: EStepStats) -> MsfaParams:
    """Parameter-expansion reduction after the CM steps.

    The latent covariance is re-estimated block-diagonally (one block for
    the common factors shared by all studies, one per study) and folded
    back into the loadings through its lower Cholesky factor, which keeps
    both triangular masks intact.
    """
    K, S = params.K, params.S
    phi = params.phi
    try:
        if K:
            a_ff = sum(stats.s2_ff(s) for s in range(S)) / sum(stats.n)
            phi = phi @ np.linalg.cholesky(a_ff)
        lams = []
        for s in range(S):
            lam = params.lambdas[s]
            if lam.shape[1]:
                lam = lam @ np.linalg.cholesky(stats.s2_ll(s) / stats.n[s])
            lams.append(lam)
    except np.linalg.LinAlgError:
        return params
    return params.replace(phi=phi, lambdas=lams)


def _ecm_step(params, stats, covs, n, config, flags):
    phi = cm_update_phi(stats, params, flags)
    params = params.replace(phi=phi)
    lams = [cm_update_lambda(stats, params, s, flags) for s in range(params.S)]
    params = params.replace(lambdas=lams)
    psis = [cm_update_psi(stats, params, covs[s], s, config.psi_floor)
            for s in range(params.S)]
    params = params.replace(psi=psis)
    if config.accelerate:
        params = _expand_reduce(params, stats)
    stats, ll = _estep(params, covs, n)
    return params, stats, ll


def _to_vector(params: MsfaParams) -> np.ndarray:
    return np.concatenate([params.phi.ravel(), *(l.ravel() for l in params.lambdas),
                           *params.psi])


def _from_vector(v: np.ndarray, like: MsfaParams, psi_floor: float) -> MsfaParams:
    pos = like.phi.size
    phi = v[:pos].reshape(like.phi.shape)
    lams = []
    for lam in like.lambdas:
        lams.append(v[pos : pos + lam.size].reshape(lam.shape))
        pos += lam.size
    psis = []
    for _ in range(like.S):
        psis.append(np.maximum(v[pos : pos + like.P], psi_floor))
        pos += like.P
    return MsfaParams(phi, tuple(lams), tuple(psis))


def _squarem_cycle(params, stats, ll, covs, n, config, flags):
    """Two ECM steps plus a squared extrapolation that is kept only when it
    beats the plain double step."""
    p1, s1, l1 = _ecm_step(params, stats, covs, n, config, flags)
    p2, s2, l2 = _ecm_step(p1, s1, covs, n, config, flags)
    best = (p2, s2, l2)
    t0, t1, t2 = _to_vector(params), _to_vector(p1), _to_vector(p2)
    r = t1 - t0
    v = t2 - t1 - r
    nv = np.linalg.norm(v)
    if nv == 0 or not np.isfinite(nv):
        return best
    alpha = min(-np.linalg.norm(r) / nv, -1.0)
    for _ in range(3):
        if alpha >= -1.0:
            break
        trial = _from_vector(t0 - 2.0 * alpha * r + alpha**2 * v, params, config.psi_floor)
        try:
            st, _ = _estep(trial, covs, n)
            p3, s3, l3 = _ecm_step(trial, st, covs, n, config, None)
        except NumericError:
            p3 = None
        if p3 is not None and l3 >= l2:
            return p3, s3, l3
        alpha = (alpha - 1.0) / 2.0
    return best


def _heywood_jump(params, stats, ll, covs, n, config):
    """Try moving collapsing uniquenesses straight onto the floor.

    EM approaches a maximum on the psi boundary at a sublinear rate.
    Entries below ``HEYWOOD_RATIO`` of their variable's variance are set to
    the floor and one ECM step is taken; the move is kept only if it does
    not lower the log-likelihood.
    """
    psis, hit = [], False
    for s, psi in enumerate(params.psi):
        low = (psi < HEYWOOD_RATIO * np.diag(covs[s])) & (psi > config.psi_floor)
        hit = hit or bool(low.any())
        psis.append(np.where(low, config.psi_floor, psi))
    if not hit:
        return params, stats, ll
    trial = params.replace(psi=psis)
    try:
        st, _ = _estep(trial, covs, n)
        p, st, l = _ecm_step(trial, st, covs, n, config, None)
    except NumericError:
        return params, stats, ll
    if l >= ll:
        return p, st, l
    return params, stats, ll


def run_ecm(data: StudyDataset, params: MsfaParams, config: FitConfig, covs=None):
    """ECM iterations from ``params``.

    With ``config.accelerate`` each iteration is a SQUAREM cycle of
    parameter-expanded ECM steps; once the relative gain of a cycle drops
    below ``max(tol, HEYWOOD_STALL)`` a guarded jump of collapsing
    uniquenesses to the floor is tried.
    Without acceleration each iteration is one plain ECM step.
    Either way the recorded log-likelihood never decreases.

    Returns ``(params, trace, iterations, converged, regularized)``.
    """
    covs = data.covariances() if covs is None else covs
    n = data.n
    flags = []
    stats, ll = _estep(params, covs, n)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        before = len(flags)
        try:
            if config.accelerate:
                params, stats, ll = _squarem_cycle(params, stats, ll, covs, n, config, flags)
            else:
                params, stats, ll = _ecm_step(params, stats, covs, n, config, flags)
        except NumericError as exc:
            raise NumericError(f"iteration {it}: {exc}") from exc
        if len(flags) > before:
            flags[before:] = [(it, f) for f in flags[before:]]
        prev = trace[-1]
        if config.accelerate and (ll - prev) / (1.0 + abs(prev)) < max(config.tol, HEYWOOD_STALL):
            # stalled: a uniqueness may be crawling to the floor
            params, stats, ll = _heywood_jump(params, stats, ll, covs, n, config)
        trace.append(ll)
        if config.trace:
            logger.debug("iter %d loglik %.10f", it, ll)
        if (ll - prev) / (1.0 + abs(prev)) < config.tol:
            converged = True
            break
    return params, np.asarray(trace), it, converged, tuple(flags)


def _result(data, params, trace, it, converged, flags, config) -> FitResult:
    params = params.canonical_signs()
    q = free_param_count(params.dims, data.P)
    ll = float(trace[-1])
    aic, bic = information_criteria_from(ll, q, data.n_total)
    trace = np.asarray(trace, dtype=float)
    trace.setflags(write=False)
    return FitResult(
        params=params,
        loglik_trace=trace,
        iterations=it,
        converged=converged,
        final_loglik=ll,
        n_free_params=q,
        aic=aic,
        bic=bic,
        n_total=data.n_total,
        regularized=flags,
        config=config.to_dict(),
    )


def fit_msfa(data: StudyDataset, dims: FactorDims, config: FitConfig | None = None,
             init: MsfaParams | None = None) -> FitResult:
    """Fit the multi-study factor model by ECM.

    Parameters
    ----------
    data : StudyDataset
        Centered studies.
    dims : FactorDims
        Common dimension ``K`` and specific dimensions ``J_s``.
    config : FitConfig, optional
    init : MsfaParams, optional
        Starting point; defaults to :func:`init_params`.

    Returns
    -------
    FitResult
        Parameters with canonical column signs, the log-likelihood trace
        (starting value first) and AIC/BIC.
    """
    config = config or FitConfig()
    _validate(data, dims)
    if init is None:
        init = init_params(data, dims, config.seed, config)
    elif init.dims != dims:
        raise PreconditionError(f"init has dims {init.dims}, expected {dims}")
    params, trace, it, converged, flags = run_ecm(data, init, config)
    if not converged:
        logger.info("ECM stopped after %d iterations without converging", it)
    return _result(data, params, trace, it, converged, flags, config)


def fit_fa(study, T: int, config: FitConfig | None = None) -> FitResult:
    """Single-study factor analysis with a lower-triangular loading matrix.

    The study is centered and fitted as an MSFA model with one study, no
    common factors and ``T`` specific factors.
    """
    data = study if isinstance(study, StudyDataset) else StudyDataset.from_arrays([study])
    if data.S != 1:
        raise PreconditionError("fit_fa expects a single study")
    return fit_msfa(data, FactorDims(0, (T,)), config)
