import json

import numpy as np
import pytest

from msfa.ecm import FitConfig, fit_msfa
from msfa.evaluation import cv_mse
from msfa.exceptions import FormatError, PreconditionError
from msfa.io import (
    ProjectConfig,
    load_cv_report,
    load_fit,
    load_scenario_table,
    load_selection,
    load_studies,
    output_dir,
    params_from_dict,
    params_to_dict,
    read_study_csv,
    save_cv_report,
    save_dataset,
    save_edges,
    save_fit,
    save_scenario_table,
    save_selection,
)
from msfa.model import FactorDims, StudyDataset
from msfa.selection import select_k
from msfa.simulation import ScenarioTable


def _write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


def _assert_fit_equal(a, b):
    np.testing.assert_array_equal(a.params.phi, b.params.phi)
    for x, y in zip(a.params.lambdas, b.params.lambdas):
        np.testing.assert_array_equal(x, y)
    for x, y in zip(a.params.psi, b.params.psi):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(a.loglik_trace, b.loglik_trace)
    for f in ("iterations", "converged", "final_loglik", "n_free_params", "aic", "bic",
              "n_total", "regularized", "config"):
        assert getattr(a, f) == getattr(b, f), f


@pytest.fixture
def fitted(small_problem):
    _, data = small_problem
    return data, fit_msfa(data, FactorDims(1, (1, 2)), FitConfig(max_iter=30))


# --- CSV ---------------------------------------------------------------------


def test_identical_headers(tmp_path):
    a = _write_csv(tmp_path / "a.csv", ["x", "y"], [[1, 2], [3, 5], [4, 4]])
    b = _write_csv(tmp_path / "b.csv", ["x", "y"], [[0, 1], [2, 2], [1, 0]])
    data = load_studies(ProjectConfig([a, b]))
    assert data.variable_names == ("x", "y") and data.P == 2
    np.testing.assert_allclose(data.column_means[0], [8 / 3, 11 / 3])


def test_intersect_policy(tmp_path):
    a = _write_csv(tmp_path / "a.csv", ["a", "c", "b"], [[1, 2, 3]] * 2 + [[0, 0, 1]] * 2)
    b = _write_csv(tmp_path / "b.csv", ["d", "b", "c"], [[1, 2, 3]] * 2 + [[0, 1, 0]] * 2)
    data = load_studies(ProjectConfig([a, b]))
    assert data.variable_names == ("c", "b")
    np.testing.assert_array_equal(data.studies[1][:, 0], [1.5, 1.5, -1.5, -1.5])
    with pytest.raises(FormatError):
        load_studies(ProjectConfig([a, b], variable_policy="require-equal"))


def test_empty_intersection(tmp_path):
    a = _write_csv(tmp_path / "a.csv", ["a"], [[1], [2], [3]])
    b = _write_csv(tmp_path / "b.csv", ["b"], [[1], [2], [3]])
    with pytest.raises(FormatError, match="no variable"):
        load_studies(ProjectConfig([a, b]))


def test_duplicate_names(tmp_path):
    a = _write_csv(tmp_path / "a.csv", ["a", "a"], [[1, 2], [3, 4]])
    with pytest.raises(FormatError, match="duplicate"):
        read_study_csv(a)


def test_non_numeric_cell_located(tmp_path):
    a = _write_csv(tmp_path / "a.csv", ["g1", "g2"], [[1, 2], [3, "abc"], [5, 6]])
    with pytest.raises(FormatError) as err:
        read_study_csv(a)
    assert "row 3" in str(err.value) and "g2" in str(err.value)


def test_missing_value_rejected(tmp_path):
    a = _write_csv(tmp_path / "a.csv", ["g1", "g2"], [[1, 2], [3, ""], [5, 6]])
    with pytest.raises(FormatError):
        read_study_csv(a)


def test_small_study_rejected(tmp_path):
    a = _write_csv(tmp_path / "a.csv", ["a", "b", "c"], [[1, 2, 3], [2, 3, 1], [0, 1, 1]])
    with pytest.raises(PreconditionError, match="n_s=3"):
        load_studies(ProjectConfig([a]))
    assert load_studies(ProjectConfig([a], validate_n=False)).n == (3,)


def test_dataset_round_trip(tmp_path, rng):
    raw = [rng.normal(size=(12, 4)) * 1e3 + 7, rng.normal(size=(9, 4)) / 3]
    data = StudyDataset.from_arrays(raw, ["a", "b", "c", "d"], center=False)
    paths = save_dataset(data, tmp_path)
    back = load_studies(ProjectConfig(paths, center=False))
    assert back.variable_names == data.variable_names
    for x, y in zip(data.studies, back.studies):
        np.testing.assert_array_equal(x, y)


def test_standardize(tmp_path, rng):
    a = _write_csv(tmp_path / "a.csv", ["a", "b"], rng.normal(size=(10, 2)).tolist())
    data = load_studies(ProjectConfig([a], standardize=True))
    np.testing.assert_allclose(data.studies[0].std(axis=0), 1.0)


def test_project_config(tmp_path):
    with pytest.raises(PreconditionError):
        ProjectConfig([])
    with pytest.raises(PreconditionError):
        ProjectConfig(["a.csv"], split_fraction=1.5)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"study_paths": ["a.csv"], "K": 2, "fit": {"tol": 1e-6}}))
    cfg = ProjectConfig.from_json(p)
    assert cfg.K == 2 and cfg.fit.tol == 1e-6
    p.write_text(json.dumps({"study_paths": ["a.csv"], "bogus": 1}))
    with pytest.raises(FormatError, match="bogus"):
        ProjectConfig.from_json(p)


# --- JSON artifacts --------------------------------------------------------------


def test_fit_round_trip(tmp_path, fitted):
    data, fit = fitted
    path = tmp_path / "fit.json"
    save_fit(fit, path, data.variable_names)
    _assert_fit_equal(fit, load_fit(path))
    assert json.loads(path.read_text())["variable_names"] == list(data.variable_names)


def test_k0_fit_keeps_empty_phi(tmp_path, small_problem):
    _, data = small_problem
    fit = fit_msfa(data, FactorDims(0, (1, 1)), FitConfig(max_iter=5))
    save_fit(fit, tmp_path / "fit.json")
    doc = json.loads((tmp_path / "fit.json").read_text())
    assert doc["phi"] == {"shape": [8, 0], "data": []}
    assert load_fit(tmp_path / "fit.json").params.phi.shape == (8, 0)


def test_tampered_psi_rejected(tmp_path, fitted):
    _, fit = fitted
    path = tmp_path / "fit.json"
    save_fit(fit, path)
    doc = json.loads(path.read_text())
    doc["psi"][0][3] = -0.5
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="invariant violated"):
        load_fit(path)


def test_tampered_mask_rejected(tmp_path, fitted):
    _, fit = fitted
    path = tmp_path / "fit.json"
    save_fit(fit, path)
    doc = json.loads(path.read_text())
    doc["lambdas"][1]["data"][1] = 0.3  # row 0 of a study block is structurally zero
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="invariant violated"):
        load_fit(path)


def test_version_and_kind_checked(tmp_path, fitted):
    _, fit = fitted
    path = tmp_path / "fit.json"
    save_fit(fit, path)
    doc = json.loads(path.read_text())
    doc["format_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="format_version"):
        load_fit(path)
    doc["format_version"] = 1
    doc["format"] = "msfa-cv"
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="msfa-fit"):
        load_fit(path)
    path.write_text("{not json")
    with pytest.raises(FormatError, match="invalid JSON"):
        load_fit(path)


def test_params_dict_round_trip(small_problem):
    params, _ = small_problem
    back = params_from_dict(json.loads(json.dumps(params_to_dict(params))))
    np.testing.assert_array_equal(back.phi, params.phi)
    np.testing.assert_array_equal(back.lambdas[1], params.lambdas[1])
    np.testing.assert_array_equal(back.psi[0], params.psi[0])


def test_selection_round_trip(tmp_path, small_problem):
    _, data = small_problem
    rep = select_k(data, (2, 3), [0, 1], FitConfig(max_iter=20))
    save_selection(rep, tmp_path / "selection.json")
    assert load_selection(tmp_path / "selection.json") == rep


def test_cv_round_trip(tmp_path, small_problem):
    _, data = small_problem
    rep = cv_mse(data, FactorDims(1, (1, 2)), config=FitConfig(max_iter=10))
    save_cv_report(rep, tmp_path / "cv.json")
    assert load_cv_report(tmp_path / "cv.json") == rep


def test_scenario_table_round_trip(tmp_path):
    table = ScenarioTable([1, 2, 3], {"AIC": {2: 4}, "BIC": {1: 3, 2: 1}, "LRT": {3: 4}},
                          5, [(2, "failed")])
    save_scenario_table(table, tmp_path / "t.csv")
    back = load_scenario_table(tmp_path / "t.csv")
    assert back.candidate_k == [1, 2, 3] and back.n_replicates == 5 and back.n_failed == 1
    for crit in ("AIC", "BIC", "LRT"):
        assert back.row(crit) == table.row(crit)
    (tmp_path / "bad.csv").write_text(table.to_csv())
    with pytest.raises(FormatError):
        load_scenario_table(tmp_path / "bad.csv")


def test_edges_file(tmp_path):
    save_edges([(0, 1, -0.25)], tmp_path / "e.csv", ["p", "q"], ["r", "s"])
    assert (tmp_path / "e.csv").read_text().splitlines() == ["a,b,corr,abs_corr", "p,s,-0.25,0.25"]


def test_output_dir(monkeypatch):
    monkeypatch.delenv("MSFA_OUT", raising=False)
    assert str(output_dir()) == "msfa_out"
    monkeypatch.setenv("MSFA_OUT", "/tmp/elsewhere")
    assert str(output_dir()) == "/tmp/elsewhere"
    assert str(output_dir("given")) == "given"
