"""Reading study CSV files and persisting fits and reports as JSON.

CSV files are comma separated UTF-8 with a mandatory header row of
variable names; every other cell must be a number.  JSON artifacts carry a
``format`` tag and a ``format_version``; matrices are stored as
``{"shape": [rows, cols], "data": [row-major values]}`` so empty matrices
keep their shape.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ecm import FitConfig
from .evaluation import CvReport
from .exceptions import FormatError, PreconditionError
from .model import FitResult, MsfaParams, StudyDataset, free_param_count
from .selection import LrtResult, SelectionReport
from .simulation import ScenarioTable

FORMAT_VERSION = 1

FIT_FILE = "fit.json"
SELECTION_FILE = "selection.json"
CV_FILE = "cv_report.json"
SCENARIO_TABLE_FILE = "scenario_table.csv"
EDGES_FILE = "loading_edges.csv"

__all__ = [
    "ProjectConfig",
    "load_studies",
    "read_study_csv",
    "save_dataset",
    "save_fit",
    "load_fit",
    "fit_to_dict",
    "fit_from_dict",
    "params_to_dict",
    "params_from_dict",
    "save_selection",
    "load_selection",
    "save_cv_report",
    "load_cv_report",
    "save_scenario_table",
    "load_scenario_table",
    "save_edges",
]


@dataclass
class ProjectConfig:
    """Inputs and settings for a command-line run.

    ``variable_policy`` is ``"intersect"`` (keep variables present in every
    study, in the first study's order) or ``"require-equal"``.
    """

    study_paths: list
    variable_policy: str = "intersect"
    center: bool = True
    standardize: bool = False
    validate_n: bool = True
    K: int | None = None
    J: list | None = None
    T: list | None = None
    k_range: list | None = None
    auto_t: bool = False
    split_fraction: float = 0.8
    n_folds: int = 1
    fit: FitConfig = field(default_factory=FitConfig)
    output_dir: str = "msfa_out"

    def __post_init__(self):
        if isinstance(self.fit, dict):
            self.fit = FitConfig(**self.fit)
        if not self.study_paths:
            raise PreconditionError("at least one study path is required")
        if self.variable_policy not in ("intersect", "require-equal"):
            raise PreconditionError(f"unknown variable policy {self.variable_policy!r}")
        if not 0 < self.split_fraction < 1:
            raise PreconditionError("split_fraction must lie in (0, 1)")

    @classmethod
    def from_json(cls, path) -> "ProjectConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise FormatError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fit"] = self.fit.to_dict()
        return d


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def read_study_csv(path):
    """Return ``(variable_names, matrix)`` from one study file."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            dup = next(h for h in header if header.count(h) > 1)
            raise FormatError(f"{path}: duplicate variable name {dup!r}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
            vals = []
            for col, cell in zip(header, row):
                try:
                    v = float(cell)
                except ValueError:
                    raise FormatError(
                        f"{path}: non-numeric cell {cell!r} at row {lineno}, column {col!r}"
                    ) from None
                if not math.isfinite(v):
                    raise FormatError(f"{path}: missing/non-finite value at row {lineno}, column {col!r}")
                vals.append(v)
            rows.append(vals)
    return header, np.array(rows, dtype=float).reshape(len(rows), len(header))


def load_studies(config: ProjectConfig) -> StudyDataset:
    """Read every study, reconcile variable names, center/standardize."""
    headers, mats = [], []
    for p in config.study_paths:
        h, m = read_study_csv(p)
        headers.append(h)
        mats.append(m)
    if config.variable_policy == "require-equal":
        for p, h in zip(config.study_paths, headers):
            if h != headers[0]:
                raise FormatError(f"{p}: header differs from {config.study_paths[0]}")
        names = headers[0]
    else:
        common = set(headers[0]).intersection(*headers[1:])
        names = [h for h in headers[0] if h in common]
        if not names:
            raise FormatError("no variable is shared by all studies")
    selected = []
    for h, m in zip(headers, mats):
        pos = {name: i for i, name in enumerate(h)}
        selected.append(m[:, [pos[name] for name in names]])
    if config.validate_n:
        for p, m in zip(config.study_paths, selected):
            if m.shape[0] <= len(names):
                raise PreconditionError(
                    f"{p}: n_s={m.shape[0]} must exceed the number of variables P={len(names)}"
                )
    return StudyDataset.from_arrays(
        selected, names, center=config.center, standardize=config.standardize
    )


def save_dataset(data: StudyDataset, directory, prefix: str = "study") -> list:
    """Write one CSV per study; values use 17 significant digits."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for s, x in enumerate(data.studies):
        path = directory / f"{prefix}_{s + 1}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(",".join(data.variable_names) + "\n")
            for row in x:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
        paths.append(str(path))
    return paths


# ---------------------------------------------------------------------------
# JSON helpers
# ---------------------------------------------------------------------------


def _mat(a) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _unmat(d) -> np.ndarray:
    try:
        return np.array(d["data"], dtype=float).reshape(d["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed matrix entry: {exc}") from exc


def _write_json(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, allow_nan=False)
        fh.write("\n")


def _read_json(path, kind):
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if obj.get("format") != kind:
        raise FormatError(f"{path}: expected a {kind!r} document, got {obj.get('format')!r}")
    if obj.get("format_version") != FORMAT_VERSION:
        raise FormatError(
            f"{path}: format_version {obj.get('format_version')!r} unsupported "
            f"(expected {FORMAT_VERSION})"
        )
    return obj


def params_to_dict(params: MsfaParams) -> dict:
    return {
        "phi": _mat(params.phi),
        "lambdas": [_mat(l) for l in params.lambdas],
        "psi": [[float(v) for v in p] for p in params.psi],
    }


def params_from_dict(d: dict) -> MsfaParams:
    try:
        return MsfaParams(
            _unmat(d["phi"]),
            tuple(_unmat(l) for l in d["lambdas"]),
            tuple(np.array(p, dtype=float) for p in d["psi"]),
        )
    except KeyError as exc:
        raise FormatError(f"missing parameter field {exc}") from exc


# ---------------------------------------------------------------------------
# fits
# ---------------------------------------------------------------------------


def fit_to_dict(fit: FitResult, variable_names=None) -> dict:
    d = {
        "format": "msfa-fit",
        "format_version": FORMAT_VERSION,
        "dims": {"K": fit.dims.K, "J": list(fit.dims.J), "P": fit.params.P},
        **params_to_dict(fit.params),
        "loglik_trace": [float(v) for v in fit.loglik_trace],
        "iterations": int(fit.iterations),
        "converged": bool(fit.converged),
        "final_loglik": float(fit.final_loglik),
        "n_free_params": int(fit.n_free_params),
        "aic": float(fit.aic),
        "bic": float(fit.bic),
        "n_total": int(fit.n_total),
        "regularized": [[int(i), str(b)] for i, b in fit.regularized],
        "config": dict(fit.config),
    }
    if variable_names is not None:
        d["variable_names"] = list(variable_names)
    return d


def fit_from_dict(d: dict) -> FitResult:
    try:
        params = params_from_dict(d)
        dims = d["dims"]
        if params.K != dims["K"] or [l.shape[1] for l in params.lambdas] != list(dims["J"]):
            raise FormatError("stored dims disagree with the loading shapes")
        floor = float(d.get("config", {}).get("psi_floor", 0.0)) or np.finfo(float).tiny
        bad = params.violations(psi_floor=floor)
        if bad:
            raise FormatError("invariant violated: " + "; ".join(bad))
        q = free_param_count(params.dims, params.P)
        if q != d["n_free_params"]:
            raise FormatError(f"n_free_params {d['n_free_params']} != {q}")
        trace = np.array(d["loglik_trace"], dtype=float)
        trace.setflags(write=False)
        return FitResult(
            params=params,
            loglik_trace=trace,
            iterations=int(d["iterations"]),
            converged=bool(d["converged"]),
            final_loglik=float(d["final_loglik"]),
            n_free_params=q,
            aic=float(d["aic"]),
            bic=float(d["bic"]),
            n_total=int(d["n_total"]),
            regularized=tuple((int(i), str(b)) for i, b in d.get("regularized", [])),
            config=dict(d.get("config", {})),
        )
    except KeyError as exc:
        raise FormatError(f"missing field {exc}") from exc


def save_fit(fit: FitResult, path, variable_names=None) -> None:
    _write_json(fit_to_dict(fit, variable_names), path)


def load_fit(path) -> FitResult:
    """Read a fit and re-check its invariants (masks, psi floor, counts)."""
    return fit_from_dict(_read_json(path, "msfa-fit"))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _int_keys(d):
    return {int(k): v for k, v in d.items()}


def save_selection(report: SelectionReport, path) -> None:
    obj = {
        "format": "msfa-selection",
        "format_version": FORMAT_VERSION,
        "candidate_k": list(report.candidate_k),
        "T": list(report.T),
        "loglik": {str(k): v for k, v in report.loglik.items()},
        "n_params": {str(k): v for k, v in report.n_params.items()},
        "aic": {str(k): v for k, v in report.aic.items()},
        "bic": {str(k): v for k, v in report.bic.items()},
        "lrt": {str(k): asdict(t) for k, t in report.lrt.items()},
        "chosen_k_aic": report.chosen_k_aic,
        "chosen_k_bic": report.chosen_k_bic,
        "chosen_k_lrt": report.chosen_k_lrt,
        "notes": list(report.notes),
    }
    _write_json(obj, path)


def load_selection(path) -> SelectionReport:
    d = _read_json(path, "msfa-selection")
    return SelectionReport(
        candidate_k=list(d["candidate_k"]),
        T=tuple(d["T"]),
        loglik=_int_keys(d["loglik"]),
        n_params=_int_keys(d["n_params"]),
        aic=_int_keys(d["aic"]),
        bic=_int_keys(d["bic"]),
        lrt={int(k): LrtResult(**v) for k, v in d["lrt"].items()},
        chosen_k_aic=d["chosen_k_aic"],
        chosen_k_bic=d["chosen_k_bic"],
        chosen_k_lrt=d["chosen_k_lrt"],
        notes=list(d["notes"]),
    )


def save_cv_report(report: CvReport, path) -> None:
    _write_json({"format": "msfa-cv", "format_version": FORMAT_VERSION, **asdict(report)}, path)


def load_cv_report(path) -> CvReport:
    d = _read_json(path, "msfa-cv")
    d.pop("format")
    d.pop("format_version")
    return CvReport(**d)


def save_scenario_table(table: ScenarioTable, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = table.to_csv()
    text += f"# replicates={table.n_replicates},failed={table.n_failed}\n"
    path.write_text(text, encoding="utf-8")


def load_scenario_table(path) -> ScenarioTable:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    ks = [int(h.split("=")[1]) for h in header[1:]]
    counts, n_rep, n_failed = {}, None, 0
    for line in lines[1:]:
        if line.startswith("#"):
            meta = dict(kv.split("=") for kv in line[1:].strip().split(","))
            n_rep, n_failed = int(meta["replicates"]), int(meta["failed"])
            continue
        cells = line.split(",")
        counts[cells[0]] = {k: int(c) for k, c in zip(ks, cells[1:]) if int(c)}
    if n_rep is None:
        raise FormatError(f"{path}: missing replicate count line")
    failures = [(-1, "recorded failure")] * n_failed
    return ScenarioTable(ks, counts, n_rep, failures)


def save_edges(edges, path, labels_a=None, labels_b=None) -> None:
    """Loading-correlation edge list as ``a,b,corr,abs_corr`` rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["a", "b", "corr", "abs_corr"])
        for i, j, c in edges:
            a = labels_a[i] if labels_a else i
            b = labels_b[j] if labels_b else j
            w.writerow([a, b, f"{c:.17g}", f"{abs(c):.17g}"])


def output_dir(explicit=None) -> Path:
    """``explicit`` if given, else ``$MSFA_OUT``, else ``./msfa_out``."""
    return Path(explicit or os.environ.get("MSFA_OUT") or "msfa_out")
