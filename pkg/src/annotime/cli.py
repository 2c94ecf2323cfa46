"""Command-line entry point: ``annotime <command> [options]``.

Every command accepts ``--config file.json`` (validated, unknown keys
rejected); explicit flags override config values.  Each run writes a
resolved config next to its outputs, and directory-producing commands also
write a ``manifest.json`` with SHA-256 hashes of every artifact.  Logs are
JSON lines on stderr.

Exit codes: 0 success, 1 computational or data failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from importlib import resources
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import __version__
from .data_model import CohortData, ingest_cohort, write_text_atomic

log = logging.getLogger("annotime")

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# configuration schema
# ---------------------------------------------------------------------------

class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Block):
    encounters: Optional[str] = None
    patients: Optional[str] = None
    n_channels: Optional[int] = Field(None, ge=1)
    horizon: Optional[float] = Field(None, gt=0)


class FpcaConfig(_Block):
    pve: float = Field(0.9, gt=0, le=1)
    h_mu: Optional[float] = Field(None, gt=0)
    h_g: Optional[float] = Field(None, gt=0)
    grid_size: int = Field(101, ge=21)
    fit_on: Literal["pooled", "unlabeled"] = "pooled"


class FeaturesConfig(_Block):
    features: list[Literal["log_first_arrival", "log_peak", "logit_ratio", "first_score", "log_count"]] = [
        "log_first_arrival", "log_peak", "logit_ratio"]
    pca_within_group: bool = False
    group_pve: float = Field(0.9, gt=0, le=1)
    standardize_baseline: bool = False
    drop_constant: bool = True


class FitConfig(_Block):
    n_knots: int = Field(9, ge=0)
    order: int = Field(4, ge=1)
    knot_scheme: Literal["percentile", "uniform"] = "percentile"
    horizon: Optional[float] = Field(None, gt=0)
    method: Literal["profile", "joint"] = "profile"
    quadrature_nodes: int = Field(7, ge=1)


class SelectConfig(_Block):
    criterion: Literal["bic", "aic", "cv"] = "bic"
    n_lambda: int = Field(50, ge=1)
    min_ratio: float = Field(1e-4, gt=0, lt=1)
    lambdas: Optional[list[float]] = None
    cv_folds: int = Field(5, ge=2)
    cv_loss: Literal["loglik", "ape"] = "loglik"


class EvaluateConfig(_Block):
    grid_points: int = Field(51, ge=1)
    curves: Literal["all", "best", "none"] = "all"
    cv_folds: int = Field(0, ge=0)
    use_selection: bool = True


class SimulateConfig(_Block):
    family: Literal["gaussian", "gamma"] = "gaussian"
    correlation: Literal["independent", "ar0.5"] = "independent"
    censoring: Literal[30, 70] = 30
    alpha_c: Optional[float] = None
    n: int = Field(400, ge=1)
    N: int = Field(3600, ge=0)
    q: int = Field(10, ge=1)
    k2: Optional[list[float]] = None
    theta2: Optional[list[float]] = None
    true_beta: Optional[list[float]] = None
    reps: int = Field(50, ge=1)
    n_valid: int = Field(5000, ge=2)
    fix_hyperparameters: bool = False
    arms: list[Literal["true/full", "true/select", "estimated/full", "estimated/select"]] = [
        "true/full", "true/select", "estimated/full", "estimated/select"]
    data_only: bool = False


class RunConfig(_Block):
    schema_version: Literal[1] = SCHEMA_VERSION
    seed: int = 0
    out: Optional[str] = None
    data: DataConfig = DataConfig()
    fpca: FpcaConfig = FpcaConfig()
    features: FeaturesConfig = FeaturesConfig()
    fit: FitConfig = FitConfig()
    select: SelectConfig = SelectConfig()
    evaluate: EvaluateConfig = EvaluateConfig()
    simulate: SimulateConfig = SimulateConfig()


class UsageError(Exception):
    """Bad invocation or configuration (exit code 2)."""


# ---------------------------------------------------------------------------
# logging and I/O helpers
# ---------------------------------------------------------------------------

class _JsonFormatter(logging.Formatter):
    def format(self, record):
        entry = {"level": record.levelname.lower(), "logger": record.name, "message": record.getMessage()}
        extra = getattr(record, "fields", None)
        if extra:
            entry.update(extra)
        return json.dumps(entry, default=str)


def _setup_logging(level: str):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    root = logging.getLogger("annotime")
    root.handlers[:] = [handler]
    root.setLevel(getattr(logging, level.upper()))
    root.propagate = False


def _log_to(out_dir: Path):
    """Also write JSON logs to ``run.log.jsonl`` in a run directory (not hashed)."""
    handler = logging.FileHandler(out_dir / "run.log.jsonl", mode="w", encoding="utf-8")
    handler.setFormatter(_JsonFormatter())
    logging.getLogger("annotime").addHandler(handler)


@contextmanager
def _timed(step: str):
    t0 = time.perf_counter()
    log.info("start %s", step, extra={"fields": {"event": "start", "step": step}})
    yield
    dt = time.perf_counter() - t0
    log.info("done %s", step, extra={"fields": {"event": "done", "step": step, "seconds": round(dt, 4)}})


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _clean(o):
    """Replace non-finite floats by None so the JSON stays standard."""
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, np.ndarray):
        return _clean(o.tolist())
    if isinstance(o, (np.floating, float)):
        v = float(o)
        return v if np.isfinite(v) else None
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return o


def _dump(path, obj):
    write_text_atomic(path, json.dumps(_clean(obj), indent=2, sort_keys=True, default=_json_default) + "\n")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, files):
    entries = []
    for f in sorted(files):
        p = out_dir / f
        entries.append({"file": f, "bytes": p.stat().st_size, "sha256": _sha256(p)})
    _dump(out_dir / "manifest.json", {"command": command, "version": __version__, "files": entries})


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError("config file must contain a JSON object")
    base = Path(path).resolve().parent
    # relative data paths are taken relative to the config file
    data = raw.get("data")
    if isinstance(data, dict):
        for key in ("encounters", "patients"):
            if isinstance(data.get(key), str) and not os.path.isabs(data[key]):
                data[key] = str(base / data[key])
    return raw


def _resolve(args, overrides: dict) -> RunConfig:
    raw = _load_config(getattr(args, "config", None))
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"config key {p!r} must be an object")
        node[leaf] = value
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise UsageError("invalid configuration:\n" + str(exc)) from None


def _resolved_dump(cfg: RunConfig) -> dict:
    d = cfg.model_dump()
    for key in ("encounters", "patients"):
        if d["data"][key] is not None:
            d["data"][key] = str(Path(d["data"][key]).resolve())
    return d


def _require(value, flag):
    if value is None:
        raise UsageError(f"missing required option {flag}")
    return value


def _cohort(cfg: RunConfig) -> CohortData:
    enc = _require(cfg.data.encounters, "--encounters")
    pat = _require(cfg.data.patients, "--patients")
    with _timed("ingest"):
        return ingest_cohort(enc, pat, n_channels=cfg.data.n_channels, horizon=cfg.data.horizon)


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------

def _stage_fpca(cfg: RunConfig, cohort):
    from .fpca import KernelConfig, fit_fpca

    with _timed("fpca"):
        kc = KernelConfig(cfg.fpca.h_mu, cfg.fpca.h_g, cfg.fpca.grid_size)
        return fit_fpca(cohort, kc, pve=cfg.fpca.pve, fit_on=cfg.fpca.fit_on)


def _stage_features(cfg: RunConfig, cohort, model):
    from .fpca import build_feature_matrix

    with _timed("features"):
        fc = cfg.features
        return build_feature_matrix(cohort, model, tuple(fc.features), fc.pca_within_group, fc.group_pve,
                                    fc.standardize_baseline, fc.drop_constant)


def _labeled_design(cohort, fm):
    if cohort.n == 0:
        raise ValueError("the cohort has no labeled patients")
    ids = [p.id for p in cohort.labeled]
    known = set(fm.ids)
    missing = [i for i in ids if i not in known]
    if missing:
        raise ValueError(f"feature matrix has no row for labeled patient {missing[0]!r}")
    Z = fm.rows(ids)
    X = np.array([p.event_time for p in cohort.labeled])
    D = np.array([p.event_indicator for p in cohort.labeled])
    C = np.array([p.censor_time for p in cohort.labeled])
    return Z, X, D, C


def _po_data(cfg: RunConfig, cohort, fm):
    from .po_model import PoData
    from .spline import QuadratureRule, place_knots

    Z, X, D, C = _labeled_design(cohort, fm)
    horizon = cfg.fit.horizon or cfg.data.horizon or float(max(p.censor_time for p in cohort.patients))
    basis = place_knots(X, cfg.fit.n_knots, cfg.fit.knot_scheme, horizon=horizon, order=cfg.fit.order)
    return PoData(Z, X, D, basis, QuadratureRule(cfg.fit.quadrature_nodes), censor_times=C)


def _stage_fit(cfg: RunConfig, cohort, fm):
    from .po_model import fit_profile

    data = _po_data(cfg, cohort, fm)
    with _timed("fit"):
        fit = fit_profile(data, method=cfg.fit.method)
    if not fit.converged:
        raise ArithmeticError(f"PO fit did not converge (max gradient {fit.max_gradient:.3g})")
    fit.meta.update({
        "knot_scheme": cfg.fit.knot_scheme,
        "columns": list(fm.columns),
        "groups": fm.groups,
        "group_names": fm.group_names,
        "standardize_baseline": bool(fm.diagnostics.get("standardize_baseline", False)),
        "n_labeled": data.n,
        "n_events": int(data.delta.sum()),
    })
    return fit, data


def _stage_select(cfg: RunConfig, fit, data, groups):
    from .selection import tune_lambda

    sc = cfg.select
    with _timed("select"):
        return tune_lambda(fit, data, groups, criterion=sc.criterion, lambdas=sc.lambdas,
                           n_lambda=sc.n_lambda, min_ratio=sc.min_ratio, cv_folds=sc.cv_folds,
                           cv_loss=sc.cv_loss, seed=cfg.seed)


def _stage_evaluate(cfg: RunConfig, fit, data, cohort, fm, selection=None):
    from .evaluation import cross_validate, cutoff_search, default_cutoff_grid
    from .po_model import predict

    ec = cfg.evaluate
    grid = default_cutoff_grid(ec.grid_points)
    with _timed("evaluate"):
        if ec.cv_folds >= 2:
            Z, X, D, C = _labeled_design(cohort, fm)
            crit = cfg.select.criterion if (selection is not None and ec.use_selection) else None
            report = cross_validate(Z, X, D, C, k=ec.cv_folds, seed=cfg.seed, n_knots=cfg.fit.n_knots,
                                    order=cfg.fit.order, knot_scheme=cfg.fit.knot_scheme,
                                    horizon=data.basis.horizon, groups=fm.groups,
                                    criterion=None if crit == "cv" else crit, grid=grid, curves=ec.curves)
            report.meta["mode"] = f"{ec.cv_folds}-fold cross-validation"
        else:
            used = fit
            if selection is not None and ec.use_selection:
                used = fit.with_params(selection.beta, selection.gamma)
            pred = predict(used, data.Z, data.C)
            report = cutoff_search(pred.pi_C, pred.T_hat, data.C, data.X, data.delta, grid=grid, curves=ec.curves)
            report.meta["mode"] = "in-sample (labeled training data)"
        report.meta["selection_applied"] = bool(selection is not None and ec.use_selection)
    return report


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _side_config(out: Path, cfg: RunConfig):
    _dump(out.with_name(out.stem + ".config.json"), _resolved_dump(cfg))


def cmd_fpca(args) -> int:
    cfg = _resolve(args, {
        "data.encounters": args.encounters, "data.patients": args.patients, "data.n_channels": args.n_channels,
        "fpca.pve": args.pve, "fpca.h_mu": args.h_mu, "fpca.h_g": args.h_g, "fpca.grid_size": args.grid_size,
        "fpca.fit_on": args.fit_on, "out": args.out,
    })
    out = Path(_require(cfg.out, "--out"))
    cohort = _cohort(cfg)
    model = _stage_fpca(cfg, cohort)
    _dump(out, model.to_dict(include_covariance=args.include_covariance))
    _side_config(out, cfg)
    return 0


def cmd_features(args) -> int:
    from .fpca import FpcaModel

    cfg = _resolve(args, {
        "data.encounters": args.encounters, "data.patients": args.patients, "data.n_channels": args.n_channels,
        "features.features": args.features, "features.pca_within_group": args.pca_within_group,
        "features.group_pve": args.group_pve, "features.standardize_baseline": args.standardize_baseline,
        "features.drop_constant": args.drop_constant, "out": args.out,
    })
    out = Path(_require(cfg.out, "--out"))
    cohort = _cohort(cfg)
    with open(args.model, encoding="utf-8") as fh:
        model = FpcaModel.from_dict(json.load(fh))
    if model.q != cohort.q:
        raise ValueError(f"FPCA model has {model.q} channels but the cohort has {cohort.q}")
    fm = _stage_features(cfg, cohort, model)
    fm.to_csv(out)
    _side_config(out, cfg)
    return 0


def _load_features(path):
    from .fpca import FeatureMatrix

    return FeatureMatrix.from_csv(path)


def cmd_fit(args) -> int:
    cfg = _resolve(args, {
        "data.encounters": args.encounters, "data.patients": args.patients, "data.n_channels": args.n_channels,
        "fit.n_knots": args.knots, "fit.order": args.order, "fit.knot_scheme": args.knot_scheme,
        "fit.horizon": args.horizon, "fit.method": args.method, "out": args.out,
    })
    out = Path(_require(cfg.out, "--out"))
    cohort = _cohort(cfg)
    fm = _load_features(args.features)
    fit, _ = _stage_fit(cfg, cohort, fm)
    _dump(out, fit.to_dict())
    _side_config(out, cfg)
    return 0


def _load_fit(path):
    from .po_model import PoFit

    with open(path, encoding="utf-8") as fh:
        return PoFit.from_dict(json.load(fh))


def _data_for_fit(cfg, cohort, fm, fit):
    from .po_model import PoData
    from .spline import QuadratureRule

    Z, X, D, C = _labeled_design(cohort, fm)
    if Z.shape[1] != fit.beta.size:
        raise ValueError(f"feature matrix has {Z.shape[1]} columns but the fit has {fit.beta.size}")
    return PoData(Z, X, D, fit.basis, QuadratureRule(cfg.fit.quadrature_nodes), censor_times=C)


def cmd_select(args) -> int:
    cfg = _resolve(args, {
        "data.encounters": args.encounters, "data.patients": args.patients, "data.n_channels": args.n_channels,
        "select.criterion": args.criterion, "select.n_lambda": args.n_lambda, "select.min_ratio": args.min_ratio,
        "select.cv_folds": args.cv_folds, "select.cv_loss": args.cv_loss, "seed": args.seed, "out": args.out,
    })
    out = Path(_require(cfg.out, "--out"))
    cohort = _cohort(cfg)
    fm = _load_features(args.features)
    fit = _load_fit(args.fit)
    data = _data_for_fit(cfg, cohort, fm, fit)
    sel = _stage_select(cfg, fit, data, fm.groups)
    _dump(out, sel.to_dict())
    _side_config(out, cfg)
    return 0


def cmd_evaluate(args) -> int:
    from .selection import SelectionResult

    cfg = _resolve(args, {
        "data.encounters": args.encounters, "data.patients": args.patients, "data.n_channels": args.n_channels,
        "evaluate.grid_points": args.grid_points, "evaluate.curves": args.curves,
        "evaluate.cv_folds": args.cv_folds, "seed": args.seed, "out": args.out,
    })
    out = Path(_require(cfg.out, "--out"))
    cohort = _cohort(cfg)
    fm = _load_features(args.features)
    fit = _load_fit(args.fit)
    data = _data_for_fit(cfg, cohort, fm, fit)
    sel = None
    if args.selection:
        with open(args.selection, encoding="utf-8") as fh:
            sd = json.load(fh)
        sel = SelectionResult(np.concatenate([sd["gamma"], sd["beta"]]), len(sd["gamma"]), sd["active_groups"],
                              sd["chosen_lambda"], sd["criterion"])
    report = _stage_evaluate(cfg, fit, data, cohort, fm, sel)
    _dump(out, report.to_dict())
    _side_config(out, cfg)
    return 0


def _demo_config() -> str:
    return str(resources.files("annotime") / "demo" / "demo.json")


def cmd_pipeline(args) -> int:
    if args.demo and args.config:
        raise UsageError("--demo and --config are mutually exclusive")
    if args.demo:
        args.config = _demo_config()
    cfg = _resolve(args, {
        "data.encounters": args.encounters, "data.patients": args.patients, "seed": args.seed, "out": args.out,
    })
    out = Path(_require(cfg.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    _log_to(out)
    cohort = _cohort(cfg)
    model = _stage_fpca(cfg, cohort)
    _dump(out / "model.json", model.to_dict())
    fm = _stage_features(cfg, cohort, model)
    fm.to_csv(out / "features.csv")
    fit, data = _stage_fit(cfg, cohort, fm)
    _dump(out / "fit.json", fit.to_dict())
    sel = _stage_select(cfg, fit, data, fm.groups)
    _dump(out / "selection.json", sel.to_dict())
    report = _stage_evaluate(cfg, fit, data, cohort, fm, sel)
    _dump(out / "report.json", report.to_dict())
    _dump(out / "resolved_config.json", _resolved_dump(cfg))
    files = ["model.json", "features.csv", "fit.json", "selection.json", "report.json", "resolved_config.json"]
    _write_manifest(out, "pipeline", files)
    return 0


def _sim_config(cfg: RunConfig):
    from .simulation import K2, THETA2, SimConfig

    s = cfg.simulate
    k2 = tuple(s.k2) if s.k2 is not None else K2[: s.q]
    theta2 = tuple(s.theta2) if s.theta2 is not None else THETA2[: s.q]
    try:
        return SimConfig(n=s.n, N=s.N, q=s.q, family=s.family, correlation=s.correlation, censoring=s.censoring,
                         alpha_c=s.alpha_c, true_beta=tuple(s.true_beta) if s.true_beta else None,
                         k2=k2, theta2=theta2, n_valid=s.n_valid, fix_hyperparameters=s.fix_hyperparameters,
                         seed=cfg.seed)
    except ValueError as exc:
        raise UsageError(f"invalid simulation settings: {exc}") from None


def cmd_simulate(args) -> int:
    from .data_model import export_cohort
    from .simulation import _rep_rng, _table_csv, replicates_csv, run_replication_study, simulate_cohort

    cfg = _resolve(args, {
        "simulate.family": args.family, "simulate.correlation": args.correlation,
        "simulate.censoring": args.censoring, "simulate.alpha_c": args.alpha_c, "simulate.n": args.n,
        "simulate.N": args.N, "simulate.q": args.q, "simulate.reps": args.reps, "simulate.n_valid": args.n_valid,
        "simulate.fix_hyperparameters": args.fix_hyperparameters, "simulate.data_only": args.data_only,
        "seed": args.seed, "out": args.out,
    })
    out = Path(_require(cfg.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    _log_to(out)
    sim = _sim_config(cfg)
    if cfg.simulate.data_only:
        with _timed("simulate-cohort"):
            sc = simulate_cohort(sim, _rep_rng(sim.seed, 0))
        export_cohort(sc.cohort, out / "encounters.csv", out / "patients.csv")
        t = sc.truth
        rows = [{"patient_id": p.id, "T": float(t.T[i]), "C": float(t.C[i]), "X": float(t.X[i]),
                 "delta": int(t.delta[i]),
                 **{f"z_{k + 1}": float(t.Z[i, k]) for k in range(t.Z.shape[1])}}
                for i, p in enumerate(sc.cohort.patients)]
        write_text_atomic(out / "truth.csv", _table_csv(rows))
        _dump(out / "hyperparameters.json", sc.hyper.to_dict())
        _dump(out / "resolved_config.json", _resolved_dump(cfg))
        _write_manifest(out, "simulate", ["encounters.csv", "patients.csv", "truth.csv",
                                          "hyperparameters.json", "resolved_config.json"])
        return 0
    arms = [(a.split("/")[0], a.split("/")[1] == "select") for a in cfg.simulate.arms]
    with _timed("replication-study"):
        study = run_replication_study(sim, cfg.simulate.reps, arms, workers=args.workers)
    write_text_atomic(out / "replicates.csv", replicates_csv(study))
    write_text_atomic(out / "table1_coefficients.csv", _table_csv(study.coefficient_table()))
    write_text_atomic(out / "table2_accuracy.csv", _table_csv(study.accuracy_table()))
    _dump(out / "summary.json", study.summary())
    _dump(out / "resolved_config.json", _resolved_dump(cfg))
    _write_manifest(out, "simulate", ["replicates.csv", "table1_coefficients.csv", "table2_accuracy.csv",
                                      "summary.json", "resolved_config.json"])
    fails = study.failures()
    if fails:
        log.warning("some replications failed", extra={"fields": {"failures": fails}})
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _data_args(p, required_model=False):
    p.add_argument("--encounters", help="long-format encounters CSV (patient_id, channel_id, time)")
    p.add_argument("--patients", help="patients CSV (patient_id, censor_time, event_time, event_indicator, u_*)")
    p.add_argument("--n-channels", type=int, help="number of channels q (default: largest channel_id)")


def _bool_flag(p, name, help_text):
    p.add_argument(f"--{name}", dest=name.replace("-", "_"), action=argparse.BooleanOptionalAction,
                   default=None, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="annotime", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"annotime {__version__}")
    parser.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])
    parser.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="worker processes for replication studies (default: all cores)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("fpca", help="fit the per-channel FPCA model")
    fsub = p.add_subparsers(dest="action", required=True, metavar="action")
    p = fsub.add_parser("fit", help="fit and save model.json")
    p.add_argument("--config")
    _data_args(p)
    p.add_argument("--pve", type=float)
    p.add_argument("--h-mu", type=float)
    p.add_argument("--h-g", type=float)
    p.add_argument("--grid-size", type=int)
    p.add_argument("--fit-on", choices=["pooled", "unlabeled"])
    p.add_argument("--include-covariance", action="store_true", help="store covariance surfaces in the model")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fpca)

    p = sub.add_parser("features", help="derive the feature matrix from a fitted FPCA model")
    p.add_argument("--config")
    _data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--features", nargs="+",
                   choices=["log_first_arrival", "log_peak", "logit_ratio", "first_score", "log_count"])
    _bool_flag(p, "pca-within-group", "compress each channel group by PCA")
    p.add_argument("--group-pve", type=float)
    _bool_flag(p, "standardize-baseline", "center and scale baseline covariates")
    _bool_flag(p, "drop-constant", "drop channel columns that are constant")
    p.add_argument("--out")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("fit", help="fit the B-spline PO model on labeled patients")
    p.add_argument("--config")
    _data_args(p)
    p.add_argument("--features", required=True)
    p.add_argument("--knots", type=int)
    p.add_argument("--order", type=int)
    p.add_argument("--knot-scheme", choices=["percentile", "uniform"])
    p.add_argument("--horizon", type=float)
    p.add_argument("--method", choices=["profile", "joint"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="adaptive group-lasso selection along a penalty path")
    p.add_argument("--config")
    _data_args(p)
    p.add_argument("--features", required=True)
    p.add_argument("--fit", required=True)
    p.add_argument("--criterion", choices=["bic", "aic", "cv"])
    p.add_argument("--n-lambda", type=int)
    p.add_argument("--min-ratio", type=float)
    p.add_argument("--cv-folds", type=int)
    p.add_argument("--cv-loss", choices=["loglik", "ape"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("evaluate", help="annotation accuracy over a cutoff grid")
    p.add_argument("--config")
    _data_args(p)
    p.add_argument("--features", required=True)
    p.add_argument("--fit", required=True)
    p.add_argument("--selection")
    p.add_argument("--grid-points", type=int)
    p.add_argument("--curves", choices=["all", "best", "none"])
    p.add_argument("--cv-folds", type=int, help="K >= 2 for cross-validated accuracy, 0 for in-sample")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="ingest, FPCA, features, fit, select and evaluate in one run")
    p.add_argument("--config")
    p.add_argument("--demo", action="store_true", help="use the bundled toy cohort and config")
    p.add_argument("--encounters")
    p.add_argument("--patients")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("simulate", help="simulated cohorts and replication studies")
    p.add_argument("--config")
    p.add_argument("--family", choices=["gaussian", "gamma"])
    p.add_argument("--correlation", choices=["independent", "ar0.5"])
    p.add_argument("--censoring", type=int, choices=[30, 70])
    p.add_argument("--alpha-c", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--N", type=int)
    p.add_argument("--q", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--n-valid", type=int)
    _bool_flag(p, "fix-hyperparameters", "draw channel hyperparameters once for all replications")
    _bool_flag(p, "data-only", "write one simulated cohort as CSV instead of running a study")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: --help / --version exit 0, errors exit 2
        return int(exc.code or 0)
    _setup_logging(args.log_level)
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        log.error("usage error", extra={"fields": {"event": "error", "kind": "usage", "detail": str(exc)}})
        return 2
    except (ValueError, ArithmeticError, OSError, RuntimeError, np.linalg.LinAlgError) as exc:
        log.error("run failed", extra={"fields": {"event": "error", "kind": type(exc).__name__,
                                                  "detail": str(exc), "command": args.command}})
        return 1
    else:
        log.info("finished", extra={"fields": {"event": "finished", "command": args.command,
                                               "seconds": round(time.perf_counter() - t0, 4)}})
        return code
    finally:
        logger = logging.getLogger("annotime")
        for h in list(logger.handlers):
            if isinstance(h, logging.FileHandler):
                h.close()
                logger.removeHandler(h)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
