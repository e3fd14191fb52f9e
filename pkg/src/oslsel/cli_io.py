"""Command-line entry points, CSV/JSON loaders, and result serialization."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from oslsel import __version__
from oslsel.classify import CostMatrix, classify_testset, report
from oslsel.drm_core import (
    BasisSpec,
    OslsDataset,
    OslsError,
    SolverError,
    Theta,
    ValidationError,
    posterior,
)
from oslsel.em_estimator import EmConfig, fit
from oslsel.inference import ProfileInference, assumption_diagnostics
from oslsel.sim_harness import (
    ScenarioSpec,
    reference_scenario,
    run_figure2,
    run_rate_study,
    run_table1,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SOLVER = 3


# ---------------------------------------------------------------------------
# loaders
# ---------------------------------------------------------------------------


class Standardizer:
    """Per-column centering and scaling, persisted so the test-time
    transform matches the one fitted on training data."""

    def __init__(self, mean: np.ndarray, scale: np.ndarray):
        self.mean = np.asarray(mean, dtype=float)
        self.scale = np.asarray(scale, dtype=float)

    @staticmethod
    def fit(x: np.ndarray, columns: list) -> "Standardizer":
        mean = x.mean(axis=0)
        scale = x.std(axis=0, ddof=0)
        dead = np.nonzero(scale == 0.0)[0]
        if dead.size:
            names = ", ".join(columns[i] for i in dead)
            raise ValidationError(f"zero-variance column(s) under standardization: {names}")
        return Standardizer(mean, scale)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "Standardizer":
        return Standardizer(np.asarray(d["mean"]), np.asarray(d["scale"]))


def _read_csv(path: str) -> tuple[list, list]:
    try:
        with open(path, newline="", encoding="utf-8") as handle:
            rows = list(csv.reader(handle))
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise ValidationError(f"{path} is empty")
    return rows[0], rows[1:]


def _parse_matrix(path: str, header: list, rows: list, columns: list) -> np.ndarray:
    idx = [header.index(c) for c in columns]
    out = np.empty((len(rows), len(idx)))
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ValidationError(f"{path} row {i + 2}: expected {len(header)} cells, got {len(row)}")
        for j, col in enumerate(idx):
            try:
                out[i, j] = float(row[col])
            except ValueError as exc:
                raise ValidationError(
                    f"{path} row {i + 2}, column '{header[col]}': non-numeric cell {row[col]!r}"
                ) from exc
    return out


def load_labeled_csv(
    path: str,
    label_column: str,
    label_map: dict | None = None,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Feature matrix plus integer labels remapped to 0..K-1.

    Labels are remapped in sorted order of their original integer codes;
    pass a previously returned ``label_map`` to reuse a fixed mapping.
    Returns (features, labels, mapping original->code).
    """
    header, rows = _read_csv(path)
    if label_column not in header:
        raise ValidationError(f"{path}: missing label column '{label_column}'")
    feature_cols = [c for c in header if c != label_column]
    if not feature_cols:
        raise ValidationError(f"{path}: no feature columns besides the label")
    x = _parse_matrix(path, header, rows, feature_cols)
    raw_labels = _parse_matrix(path, header, rows, [label_column]).ravel()
    raw = raw_labels.astype(int)
    if np.any(raw != raw_labels):
        raise ValidationError(f"{path}: label column '{label_column}' must be integer-coded")
    if label_map is None:
        label_map = {int(v): i for i, v in enumerate(sorted(set(raw.tolist())))}
    unseen = set(raw.tolist()) - set(label_map)
    if unseen:
        raise ValidationError(f"{path}: labels {sorted(unseen)} not in the recorded mapping")
    y = np.array([label_map[int(v)] for v in raw], dtype=int)
    return x, y, label_map


def load_features_csv(path: str) -> np.ndarray:
    """Unlabeled feature matrix from a headed CSV."""
    header, rows = _read_csv(path)
    return _parse_matrix(path, header, rows, header)


def load_cost_csv(path: str) -> CostMatrix:
    header, rows = _read_csv(path)
    return CostMatrix(_parse_matrix(path, header, rows, header))


def split_holdout_novel(
    x: np.ndarray,
    y: np.ndarray,
    novel_label: int,
    train_fraction: float = 0.5,
    seed: int = 0,
) -> tuple[OslsDataset, np.ndarray]:
    """Carve an open-set problem out of a fully labeled table.

    Rows of ``novel_label`` all go to the test block; each remaining
    class contributes ``train_fraction`` of its rows (shuffled by seed)
    to training and the rest to the test block. Known classes are
    re-coded to 0..K-1 in sorted original order, the novel class to K.
    Returns the dataset plus the hidden test-block truth labels.
    """
    y = np.asarray(y, dtype=int).ravel()
    known = sorted(set(y.tolist()) - {novel_label})
    if not known:
        raise ValidationError("no known classes left after removing the novel label")
    recode = {orig: i for i, orig in enumerate(known)}
    recode[novel_label] = len(known)
    rng = np.random.Generator(np.random.Philox(key=[seed, 0]))
    train_idx, test_idx = [], []
    for orig in known:
        idx = np.nonzero(y == orig)[0]
        perm = idx[rng.permutation(idx.size)]
        cut = int(round(train_fraction * idx.size))
        train_idx.append(perm[:cut])
        test_idx.append(perm[cut:])
    test_idx.append(np.nonzero(y == novel_label)[0])
    train_idx = np.concatenate(train_idx)
    test_idx = np.concatenate(test_idx)
    dataset = OslsDataset(
        train_x=x[train_idx],
        train_y=np.array([recode[v] for v in y[train_idx]], dtype=int),
        test_x=x[test_idx],
        k_known=len(known),
    )
    truth = np.array([recode[v] for v in y[test_idx]], dtype=int)
    return dataset, truth


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as handle:
        handle.write(text)
    os.replace(tmp, path)


def _json_text(obj) -> str:
    # repr-based floats round-trip exactly; sorted keys keep bytes stable
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def theta_to_dict(theta: Theta) -> dict:
    return {
        "gamma": theta.gamma.tolist(),
        "pi": theta.pi.tolist(),
        "k_known": theta.k_known,
    }


def theta_from_dict(d: dict) -> Theta:
    return Theta(gamma=np.asarray(d["gamma"], dtype=float), pi=np.asarray(d["pi"], dtype=float))


def _config_hash(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def write_manifest(out_dir: str, command: str, config: dict, files: list, started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "config_hash": _config_hash(config),
        "files": sorted(files),
        "package_version": __version__,
        "numpy_version": np.__version__,
        # excluded from the hash and from byte-level comparisons
        "excluded": {"wall_seconds": round(time.time() - started, 3)},
    }
    _atomic_write(os.path.join(out_dir, "manifest.json"), _json_text(manifest))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _basis_from_args(args, d: int) -> BasisSpec:
    if args.basis == "identity":
        return BasisSpec.identity(d)
    if args.basis.startswith("poly"):
        return BasisSpec.polynomial(d, degree=int(args.basis[4:] or 2))
    raise ValidationError(f"unknown basis '{args.basis}'")


def _em_config(args) -> EmConfig:
    return EmConfig(
        tol=args.tol,
        max_iter=args.max_iter,
        n_starts=args.n_starts,
        seed=args.seed,
    )


def _load_problem(args) -> tuple[OslsDataset, BasisSpec, dict, Standardizer | None]:
    train_x, train_y, mapping = load_labeled_csv(args.train, args.label)
    test_x = load_features_csv(args.test)
    scaler = None
    if args.standardize:
        scaler = Standardizer.fit(train_x, [f"x{j}" for j in range(train_x.shape[1])])
        train_x, test_x = scaler.apply(train_x), scaler.apply(test_x)
    # novel class index is one past the trained classes
    dataset = OslsDataset(train_x, train_y, test_x, k_known=len(mapping))
    basis = _basis_from_args(args, train_x.shape[1])
    return dataset, basis, {int(k): v for k, v in mapping.items()}, scaler


def cmd_fit(args) -> int:
    started = time.time()
    dataset, basis, mapping, scaler = _load_problem(args)
    solution = fit(dataset, basis, _em_config(args))
    os.makedirs(args.out, exist_ok=True)
    payload = {
        "theta": theta_to_dict(solution.theta),
        "pi0": solution.pi0,
        "log_el": solution.log_el,
        "diagnostics": solution.diagnostics,
        "label_mapping": mapping,
        "standardizer": scaler.to_dict() if scaler else None,
        "basis": args.basis,
    }
    _atomic_write(os.path.join(args.out, "theta.json"), _json_text(payload))
    weight_lines = ["index,p"] + [f"{i},{v:.17g}" for i, v in enumerate(solution.p)]
    _atomic_write(os.path.join(args.out, "weights.csv"), "\n".join(weight_lines) + "\n")
    write_manifest(
        args.out,
        "fit",
        {"args": _public_args(args)},
        ["theta.json", "weights.csv"],
        started,
    )
    print(json.dumps({"log_el": solution.log_el, "pi": solution.theta.pi.tolist(), "pi0": solution.pi0}))
    return EXIT_OK


def cmd_ci(args) -> int:
    started = time.time()
    dataset, basis, mapping, _ = _load_problem(args)
    prof = ProfileInference(dataset, basis, _em_config(args))
    ks = [int(v) for v in args.k.split(",")]
    intervals = []
    curves = ["k,value,r"]
    for k in ks:
        ci = prof.confidence_interval(k, args.level)
        intervals.append(
            {
                "k": k,
                "level": ci.level,
                "lower": ci.lower,
                "upper": ci.upper,
                "mele": ci.mele_value,
                "boundary_lower": ci.boundary_lower,
                "boundary_upper": ci.boundary_upper,
            }
        )
        if args.curve_points > 0:
            grid = np.linspace(max(ci.lower - 0.05, 0.0), min(ci.upper + 0.05, 1.0), args.curve_points)
            curve = prof.elr_curve(k, grid)
            curves += [f"{k},{v:.17g},{r:.17g}" for v, r in zip(curve.values, curve.r_values)]
    os.makedirs(args.out, exist_ok=True)
    _atomic_write(
        os.path.join(args.out, "intervals.json"),
        _json_text({"intervals": intervals, "mele": theta_to_dict(prof.mele), "label_mapping": mapping}),
    )
    files = ["intervals.json"]
    if args.curve_points > 0:
        _atomic_write(os.path.join(args.out, "elr_curve.csv"), "\n".join(curves) + "\n")
        files.append("elr_curve.csv")
    write_manifest(args.out, "ci", {"args": _public_args(args)}, files, started)
    print(json.dumps({"intervals": intervals}))
    return EXIT_OK


def cmd_classify(args) -> int:
    started = time.time()
    dataset, basis, mapping, scaler = _load_problem(args)
    solution = fit(dataset, basis, _em_config(args))
    cost = load_cost_csv(args.cost) if args.cost else CostMatrix.uniform(dataset.k_known)
    labels = classify_testset(solution, dataset, cost)
    os.makedirs(args.out, exist_ok=True)
    label_lines = ["index,label"] + [f"{i},{v}" for i, v in enumerate(labels)]
    _atomic_write(os.path.join(args.out, "labels.csv"), "\n".join(label_lines) + "\n")
    files = ["labels.csv"]
    summary = {"counts": np.bincount(labels, minlength=dataset.k_known + 1).tolist()}
    if args.truth:
        header, rows = _read_csv(args.truth)
        truth = _parse_matrix(args.truth, header, rows, header).ravel().astype(int)
        rep = report(labels, truth, cost)
        summary["accuracy"] = rep.accuracy
        summary["cost"] = rep.cost
        summary["confusion"] = rep.confusion.tolist()
        _atomic_write(os.path.join(args.out, "report.json"), _json_text(summary))
        files.append("report.json")
    write_manifest(args.out, "classify", {"args": _public_args(args)}, files, started)
    print(json.dumps(summary))
    return EXIT_OK


def _scenario_from_file(path: str) -> tuple[ScenarioSpec, dict]:
    try:
        with open(path, encoding="utf-8") as handle:
            raw = json.load(handle)
    except OSError as exc:
        raise ValidationError(f"cannot read scenario {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"scenario {path} is not valid JSON: {exc}") from exc
    extra = {
        "mode": raw.pop("mode", "table1"),
        "pi3_grid": raw.pop("pi3_grid", None),
        "totals": raw.pop("totals", None),
    }
    if "reference" in raw:
        ref = raw.pop("reference")
        spec = reference_scenario(**ref, **raw)
    else:
        raw["means"] = np.asarray(raw["means"], dtype=float)
        raw["pi"] = np.asarray(raw["pi"], dtype=float)
        raw["train_fractions"] = np.asarray(raw["train_fractions"], dtype=float)
        if raw.get("chol") is not None:
            raw["chol"] = np.asarray(raw["chol"], dtype=float)
        spec = ScenarioSpec(**raw)
    return spec, extra


def cmd_simulate(args) -> int:
    started = time.time()
    spec, extra = _scenario_from_file(args.scenario)
    if args.reps:
        from dataclasses import replace as _replace

        spec = _replace(spec, replications=args.reps)
    os.makedirs(args.out, exist_ok=True)
    files = []
    mode = extra["mode"]
    label = args.label or mode
    if mode == "table1":
        table = run_table1(spec, n_jobs=args.jobs)
        _atomic_write(os.path.join(args.out, "metrics.csv"), table.to_csv_text(label))
        files.append("metrics.csv")
        print(json.dumps({"rb": table.rb.tolist(), "rmse": table.rmse.tolist(), "cp": table.cp.tolist(), "n_failed": table.n_failed}))
    elif mode == "figure2":
        grid = np.asarray(extra["pi3_grid"] or [0.05, 0.15, 0.25, 0.35, 0.45, 0.55], dtype=float)
        curve = run_figure2(spec, grid, n_jobs=args.jobs)
        _atomic_write(os.path.join(args.out, "accuracy_curve.csv"), curve.to_csv_text(label))
        files.append("accuracy_curve.csv")
        print(json.dumps({"pi3": curve.pi3_grid.tolist(), "accuracy": curve.accuracy.tolist()}))
    elif mode == "rate":
        totals = tuple(extra["totals"] or (600, 1200, 2400, 4800))
        study = run_rate_study(spec, totals=totals, replications=spec.replications, n_jobs=args.jobs)
        _atomic_write(os.path.join(args.out, "rate.csv"), study.to_csv_text(label))
        files.append("rate.csv")
        print(json.dumps({"slope": study.slope, "mean_distance": study.mean_distance.tolist()}))
    else:
        raise ValidationError(f"unknown simulate mode '{mode}'")
    write_manifest(args.out, "simulate", {"scenario_file": args.scenario, "reps": args.reps, "mode": mode}, files, started)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    dataset, basis, _, _ = _load_problem(args)
    rep = assumption_diagnostics(dataset, basis, config=_em_config(args))
    payload = {
        "min_eigenvalue": rep.min_eigenvalue,
        "beta_distances": {f"{k}-{l}": v for (k, l), v in rep.beta_distances.items()},
        "eigenvalue_flagged": rep.eigenvalue_flagged,
        "beta_flagged": rep.beta_flagged,
        "flagged": rep.flagged,
    }
    print(json.dumps(payload))
    return EXIT_OK


def _public_args(args) -> dict:
    skip = {"func"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


# ---------------------------------------------------------------------------
# parser & entry point
# ---------------------------------------------------------------------------


def _add_common_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train", required=True, help="labeled training CSV")
    p.add_argument("--test", required=True, help="unlabeled test CSV")
    p.add_argument("--label", required=True, help="label column name")
    p.add_argument("--basis", default="identity", help="identity or polyD")
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--max-iter", dest="max_iter", type=int, default=2000)
    p.add_argument("--n-starts", dest="n_starts", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oslsel", description="Mixture-proportion estimation with a novel class")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="estimate tilts and mixture proportions")
    _add_common_model_flags(p_fit)
    p_fit.add_argument("--out", required=True)
    p_fit.set_defaults(func=cmd_fit)

    p_ci = sub.add_parser("ci", help="likelihood-ratio confidence intervals")
    _add_common_model_flags(p_ci)
    p_ci.add_argument("--k", default="1", help="comma-separated component ids (0 = baseline)")
    p_ci.add_argument("--level", type=float, default=0.95)
    p_ci.add_argument("--curve-points", dest="curve_points", type=int, default=0)
    p_ci.add_argument("--out", required=True)
    p_ci.set_defaults(func=cmd_ci)

    p_cl = sub.add_parser("classify", help="label the test block")
    _add_common_model_flags(p_cl)
    p_cl.add_argument("--cost", default=None, help="cost matrix CSV (default uniform)")
    p_cl.add_argument("--truth", default=None, help="optional single-column truth CSV")
    p_cl.add_argument("--out", required=True)
    p_cl.set_defaults(func=cmd_classify)

    p_sim = sub.add_parser("simulate", help="run a scenario file")
    p_sim.add_argument("--scenario", required=True)
    p_sim.add_argument("--reps", type=int, default=None)
    p_sim.add_argument("--jobs", type=int, default=None)
    p_sim.add_argument("--label", default=None, help="scenario label for CSV rows")
    p_sim.add_argument("--out", required=True)
    p_sim.set_defaults(func=cmd_simulate)

    p_diag = sub.add_parser("diagnose", help="identifiability diagnostics")
    _add_common_model_flags(p_diag)
    p_diag.set_defaults(func=cmd_diagnose)

    return parser


def main(argv: list | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        _emit_error("validation", exc)
        return EXIT_VALIDATION
    except SolverError as exc:
        _emit_error("solver", exc)
        return EXIT_SOLVER
    except OslsError as exc:
        _emit_error("validation", exc)
        return EXIT_VALIDATION


def _emit_error(kind: str, exc: Exception) -> None:
    payload = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
