"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -s`` or
``python tests/test_acceptance.py``.  Criteria 4 to 6 run desk-scale
simulation studies and take several minutes.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest
from scipy.stats import ortho_group

from msfa.ecm import FitConfig, compute_estep_stats, fit_fa, fit_msfa
from msfa.evaluation import align_loadings, cv_mse, rv_coefficient
from msfa.io import fit_from_dict, fit_to_dict, load_fit, save_fit
from msfa.model import (
    FactorDims,
    StudyDataset,
    free_param_count,
    information_criteria_from,
    omega_mask,
)
from msfa.simulation import (
    PAPER_T,
    generate_true_params,
    replicate_seed,
    run_scenario_study,
    scenario,
    simulate_dataset,
)

from conftest import random_dataset, random_params
from oracles import fd_gradient, joint_conditioning_stats

DESK_P = 40
SCENARIO_K = {1: 0, 2: 1, 3: 3}


def _report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {number}: {'PASS' if ok else 'FAIL'}  {detail}")


def _random_dims(r, P, S, max_k=3, max_j=3):
    while True:
        dims = FactorDims(int(r.integers(0, max_k + 1)),
                          tuple(int(j) for j in r.integers(0, max_j + 1, S)))
        if not any(dims.study_problems(P)):
            return dims


# 1 -------------------------------------------------------------------------


def test_criterion_1_monotone_ecm(capsys):
    start = time.perf_counter()
    worst, bad = 0.0, 0
    for i in range(200):
        r = np.random.default_rng(replicate_seed(101, i))
        P = int(r.integers(10, 41))
        S = int(r.integers(2, 5))
        dims = _random_dims(r, P, S)
        truth = random_params(r, P, dims.K, dims.J, psi_range=(0.2, 1.2), scale=1.0)
        n = tuple(int(v) for v in r.integers(P + 10, 3 * P + 40, S))
        data = random_dataset(r, truth, n)
        cfg = FitConfig(seed=i, max_iter=60, accelerate=bool(i % 2 == 0))
        trace = fit_msfa(data, dims, cfg).loglik_trace
        drop = float(np.max(trace[:-1] - trace[1:], initial=0.0))
        worst = max(worst, drop)
        bad += drop > 1e-8
    elapsed = time.perf_counter() - start
    ok = bad == 0 and elapsed < 300
    _report(capsys, 1, ok, f"200 fits, {bad} traces decrease by > 1e-8 "
            f"(largest drop {worst:.2e}), {elapsed:.0f} s (< 300 s)")
    assert ok


# 2 -------------------------------------------------------------------------


def test_criterion_2_estep_oracle(capsys):
    worst = 0.0
    for i in range(50):
        r = np.random.default_rng(replicate_seed(202, i))
        P = int(r.integers(2, 9))
        S = int(r.integers(1, 4))
        dims = _random_dims(r, P, S, max_k=2, max_j=2)
        params = random_params(r, P, dims.K, dims.J, psi_range=(0.2, 1.5), scale=1.0)
        data = StudyDataset.from_arrays(
            [r.normal(size=(int(r.integers(P + 2, 60)), P)) for _ in range(S)])
        stats = compute_estep_stats(params, data)
        for s, x in enumerate(data.studies):
            S1, S2 = joint_conditioning_stats(params, x, s)
            for got, ref in ((stats.S1[s], S1), (stats.S2[s], S2)):
                if ref.size:
                    err = np.max(np.abs(got - ref)) / max(1.0, np.max(np.abs(ref)))
                    worst = max(worst, err)
    ok = worst <= 1e-8
    _report(capsys, 2, ok, f"50 instances, largest scaled deviation {worst:.2e} (<= 1e-8)")
    assert ok


# 3 -------------------------------------------------------------------------


def _active_psi(params, floor):
    """Free-vector positions of psi entries sitting on the floor constraint."""
    P, K = params.P, params.K
    offset = int(omega_mask(P, K, 0).sum())
    offset += sum(int(omega_mask(P, K, l.shape[1])[:, K:].sum()) for l in params.lambdas)
    idx = []
    for s, psi in enumerate(params.psi):
        idx += [offset + s * P + p for p in np.flatnonzero(psi <= floor * (1 + 1e-9))]
    return np.array(idx, dtype=int)


def test_criterion_3_stationarity(capsys):
    cfg = FitConfig(tol=1e-14, max_iter=20000)
    worst, fails, n_fit = 0.0, 0, 0
    not_converged = 0
    for i in range(20):
        r = np.random.default_rng(replicate_seed(303, i))
        P = int(r.integers(8, 17))
        S = int(r.integers(2, 4))
        dims = _random_dims(r, P, S, max_k=2, max_j=2)
        truth = random_params(r, P, dims.K, dims.J, psi_range=(0.3, 1.0), scale=1.0)
        data = random_dataset(r, truth, tuple(int(v) for v in r.integers(400, 1001, S)))
        fit = fit_msfa(data, dims, cfg)
        n_fit += 1
        not_converged += not fit.converged
        g = fd_gradient(fit.params, data)
        g[_active_psi(fit.params, cfg.psi_floor)] = 0.0
        ratio = np.max(np.abs(g)) / (1e-3 * (1 + abs(fit.final_loglik) / data.n_total))
        worst = max(worst, ratio)
        fails += ratio > 1
    ok = fails == 0 and not_converged == 0
    _report(capsys, 3, ok, f"{n_fit} fits, {not_converged} unconverged, {fails} with "
            f"gradient above bound (worst gradient/bound {worst:.3f})")
    assert ok


# 4 -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def scenario_tables():
    start = time.perf_counter()
    tables = {}
    for number in (1, 2, 3):
        spec = scenario(number, P=DESK_P, seed=2024 + number)
        tables[number] = run_scenario_study(spec, 20, list(range(6)))
    return tables, time.perf_counter() - start


def test_criterion_4_table_replication(capsys, scenario_tables):
    tables, elapsed = scenario_tables
    parts, ok = [], elapsed < 1800
    for number, table in tables.items():
        K = SCENARIO_K[number]
        k_idx = table.candidate_k.index(K)
        valid = table.n_replicates - table.n_failed
        aic = table.row("AIC")[k_idx]
        lrt = table.row("LRT")[k_idx]
        ok &= table.n_failed == 0 and aic >= 0.9 * valid and lrt >= 0.8 * valid
        parts.append(f"S{number}(K={K}) AIC {aic}/{valid} LRT {lrt}/{valid} "
                     f"BIC {table.row('BIC')}")
    _report(capsys, 4, ok, "; ".join(parts) + f"; {elapsed:.0f} s (< 1800 s)")
    assert ok


# 5 -------------------------------------------------------------------------


def test_criterion_5_loading_recovery(capsys):
    spec = scenario(3, P=DESK_P, seed=505)
    truth = generate_true_params(spec)
    dims = FactorDims.from_totals(spec.K, spec.T)
    merged_T = dims.K + max(dims.J)
    corrs, msfa_est, fa_est = [], [], []
    for r in range(20):
        data, _ = simulate_dataset(truth, spec.n, seed=replicate_seed(spec.seed, r))
        cfg = FitConfig(seed=r)
        phi = fit_msfa(data, dims, cfg).params.phi
        a = align_loadings(phi, truth.phi)
        corrs.extend(a.correlations)
        msfa_est.append(a.aligned)
        merged = fit_fa(np.vstack(data.studies), merged_T, cfg).params.lambdas[0]
        fa_est.append(align_loadings(merged, truth.phi).aligned)
    free = omega_mask(DESK_P, spec.K, 0)
    sd_msfa = np.std(msfa_est, axis=0, ddof=1)[free]
    sd_fa = np.std(fa_est, axis=0, ddof=1)[free]
    median = float(np.median(corrs))
    share = float(np.mean(sd_msfa <= sd_fa))
    ok = median >= 0.95 and share >= 0.7
    _report(capsys, 5, ok, f"median aligned |corr| {median:.4f} (>= 0.95); MSFA spread <= "
            f"merged-FA spread for {100 * share:.1f}% of {free.sum()} entries (>= 70%)")
    assert ok


# 6 -------------------------------------------------------------------------


def test_criterion_6_cv_direction(capsys):
    wins, diffs = 0, []
    for r in range(20):
        spec = scenario(3, P=DESK_P, seed=replicate_seed(606, r))
        data, _ = simulate_dataset(generate_true_params(spec), spec.n, seed=spec.seed + 1)
        rep = cv_mse(data, FactorDims.from_totals(spec.K, spec.T), 0.8, 1, FitConfig(seed=r))
        wins += rep.mse["MSFA"] <= rep.mse["FA-merged"]
        diffs.append(rep.relative_diff["FA-merged"])
    ok = wins >= 16
    _report(capsys, 6, ok, f"MSFA MSE <= FA-merged in {wins}/20 runs (>= 16); "
            f"median relative gain {100 * np.median(diffs):.2f}%")
    assert ok


# 7 -------------------------------------------------------------------------


def _mask_enumeration(K, J, P):
    count = 0
    for j in J:
        for p in range(P):
            count += sum(1 for c in range(j) if K + c <= p) + 1
    return count + sum(1 for p in range(P) for c in range(K) if c <= p)


def test_criterion_7_exact_formulas(capsys, small_problem, tmp_path):
    checks = {}
    aic, bic = information_criteria_from(-1000.0, 10, 100)
    checks["AIC/BIC"] = aic == 2020.0 and abs(bic - (2000.0 + 10 * math.log(100))) < 1e-9
    dims = FactorDims.from_totals(3, PAPER_T)
    checks["q=2592"] = free_param_count(dims, 100) == _mask_enumeration(3, dims.J, 100) == 2592
    r = np.random.default_rng(707)
    A, B = r.normal(size=(30, 4)), r.normal(size=(30, 3))
    rv = rv_coefficient(A, B)
    checks["RV(A,A)=1"] = abs(rv_coefficient(A, A) - 1) < 1e-12
    checks["RV invariance"] = (
        abs(rv_coefficient(-3.0 * A, B) - rv) < 1e-10
        and abs(rv_coefficient(A @ ortho_group.rvs(4, random_state=1),
                               B @ ortho_group.rvs(3, random_state=2)) - rv) < 1e-10
    )
    _, data = small_problem
    fit = fit_msfa(data, FactorDims(1, (1, 2)), FitConfig(max_iter=25))
    save_fit(fit, tmp_path / "fit.json")
    back = load_fit(tmp_path / "fit.json")
    mem = fit_from_dict(json.loads(json.dumps(fit_to_dict(fit))))
    checks["round-trip"] = all(
        np.array_equal(a, b)
        for f in (back, mem)
        for a, b in itertools.chain(
            [(fit.params.phi, f.params.phi), (fit.loglik_trace, f.loglik_trace)],
            zip(fit.params.lambdas, f.params.lambdas),
            zip(fit.params.psi, f.params.psi),
        )
    ) and back.aic == fit.aic and back.final_loglik == fit.final_loglik
    ok = all(checks.values())
    _report(capsys, 7, ok, ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok


# 8 -------------------------------------------------------------------------


def test_criterion_8_degenerate_equivalence(capsys):
    same = 0
    for i in range(10):
        r = np.random.default_rng(replicate_seed(808, i))
        P = int(r.integers(4, 13))
        T = int(r.integers(1, 4))
        truth = random_params(r, P, 0, (T,), scale=1.0)
        x = random_dataset(r, truth, (int(r.integers(P + 20, 200)),)).studies[0]
        cfg = FitConfig(seed=i)
        a = fit_fa(x, T, cfg)
        b = fit_msfa(StudyDataset.from_arrays([x]), FactorDims(0, (T,)), cfg)
        same += (
            np.array_equal(a.loglik_trace, b.loglik_trace)
            and np.array_equal(a.params.lambdas[0], b.params.lambdas[0])
            and np.array_equal(a.params.psi[0], b.params.psi[0])
            and a.iterations == b.iterations
        )
    ok = same == 10
    _report(capsys, 8, ok, f"{same}/10 instances bit-for-bit identical")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
