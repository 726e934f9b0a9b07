"""Command-line pipeline: prep, fit, residuals, indices, tails, score, simulate, uah, decode.

Every output file gets a sibling ``<output>.manifest.json`` that records the
command, inputs with SHA-256 digests, outputs, seed, tool version and wall
time.  Exit codes: 0 ok, 2 input error, 3 non-convergence, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .anomaly import DEFAULT_THRESHOLD, driver_tails, residuals_frame, trip_indices
from .em import FitConfig, NoTrainingDataError, fit
from .inference import ZeroLikelihoodError, viterbi_batch
from .model import CTHMM
from .prep import RESPONSES, InputFormatError, read_segments_csv, read_trips_csv, segment_frame, segments_to_frame
from .scoring import DesignError, cross_validate, driver_design, fit_logistic, window_metrics
from .simulate import SimConfig, group_trips, simulate

log = logging.getLogger("cthmm_telematics")

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED, EXIT_NUMERIC = 0, 2, 3, 4
JOBS_ENV = "CTHMM_JOBS"
CONFIG_SECTION = "cthmm"


class InputError(Exception):
    """Bad user input that should map to exit code 2."""


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _digests(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_file():
            out[str(p)] = sha256(p)
        elif p.is_dir():
            out[str(p)] = "directory"
    return out


class Run:
    """Collects outputs of one command and writes their manifests."""

    def __init__(self, args, inputs):
        self.args = args
        self.inputs = [str(p) for p in inputs if p is not None]
        self.outputs: list[str] = []
        self.start = time.perf_counter()
        self.extra: dict = {}

    def write_text(self, path, text: str):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, path)
        self.outputs.append(str(path))

    def write_csv(self, path, frame: pd.DataFrame):
        self.write_text(path, frame.to_csv(index=False, lineterminator="\n"))

    def finish(self, status: str = "ok"):
        manifest = {
            "command": self.args.command,
            "argv": sys.argv[1:],
            "config": self.args.config,
            "inputs": _digests(self.inputs),
            "outputs": _digests(self.outputs),
            "seed": getattr(self.args, "seed", None),
            "version": __version__,
            "status": status,
            "wall_time_s": round(time.perf_counter() - self.start, 3),
            **self.extra,
        }
        for out in self.outputs:
            Path(out + ".manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _read_model(path) -> CTHMM:
    try:
        return CTHMM.from_json(Path(path).read_text())
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise InputError(f"cannot read model {path}: {exc}") from exc


def _read_csv(path, required=()) -> pd.DataFrame:
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise InputFormatError(f"{path} is missing column(s): {', '.join(missing)}")
    return df


def _jobs(args) -> int:
    if args.jobs is not None:
        return max(1, args.jobs)
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


# --- commands -------------------------------------------------------------------


def cmd_prep(args) -> int:
    run = Run(args, [args.input])
    df = read_trips_csv(args.input)
    trips, counts = segment_frame(df, args.mode)
    log.info("prep: %s", counts)
    run.extra["counts"] = counts
    run.write_csv(args.output, segments_to_frame(trips))
    run.finish()
    return EXIT_OK


def cmd_fit(args) -> int:
    run = Run(args, [args.input])
    trips = read_segments_csv(args.input, "train")
    data = [s for trip in trips for s in trip.sub_intervals]
    families = tuple(f.strip() for f in args.families.split(","))
    config = FitConfig(
        n_states=args.states,
        families=families,
        decoding=args.decoding,
        max_iters=args.max_iters,
        rel_tol=args.tol,
        restarts=args.restarts,
        seed=args.seed,
    )

    def progress(it, ll):
        print(f"iteration {it}  log-likelihood {ll:.10g}", file=sys.stderr, flush=True)

    model = fit(data, config, progress if args.verbose else None)
    run.write_text(args.output, model.to_json())
    converged = bool(model.diagnostics.get("converged"))
    run.extra["converged"] = converged
    run.finish("ok" if converged else "not_converged")
    if not converged:
        log.error("EM did not converge within %d iterations; model written and flagged", args.max_iters)
        return EXIT_NONCONVERGED
    return EXIT_OK


def _residual_chunk(payload):
    model_json, trips, threshold = payload
    return residuals_frame(CTHMM.from_json(model_json), trips, threshold)


def cmd_residuals(args) -> int:
    run = Run(args, [args.model, args.input])
    model = _read_model(args.model)
    trips = read_segments_csv(args.input, "eval")
    trips.sort(key=lambda tr: (str(tr.driver_id), tr.trip_id))
    jobs = _jobs(args)
    if jobs > 1 and len(trips) > 1:
        chunks = [trips[i::jobs] for i in range(jobs)]
        text = model.to_json()
        with ProcessPoolExecutor(jobs) as pool:
            parts = list(pool.map(_residual_chunk, [(text, c, args.threshold) for c in chunks if c]))
        frame = pd.concat(parts, ignore_index=True)
        order = {tr.trip_id: i for i, tr in enumerate(trips)}
        frame["_o"] = frame["trip_id"].map(order)
        frame = frame.sort_values("_o", kind="stable").drop(columns="_o").reset_index(drop=True)
    else:
        frame = residuals_frame(model, trips, args.threshold)
    run.write_csv(args.output, frame)
    run.finish()
    return EXIT_OK


def _dims_in(frame: pd.DataFrame) -> list[str]:
    return list(dict.fromkeys(frame["dim"].astype(str)))


def cmd_indices(args) -> int:
    run = Run(args, [args.input, args.drivers])
    res = _read_csv(args.input, ["trip_id", "sub_id", "t", "dim", "u", "z", "outlier"])
    drivers = {}
    if args.drivers:
        seg = _read_csv(args.drivers, ["trip_id", "driver_id"])
        drivers = dict(zip(seg["trip_id"], seg["driver_id"]))
    out = trip_indices(res, _dims_in(res), args.threshold, drivers)
    run.write_csv(args.output, out)
    run.finish()
    return EXIT_OK


def cmd_tails(args) -> int:
    run = Run(args, [args.input])
    idx = _read_csv(args.input, ["driver_id", "trip_id", "n_resid"])
    dims = [c[2:] for c in idx.columns if c.startswith("A_")]
    if not dims:
        raise InputFormatError(f"{args.input} has no A_<dim> columns")
    out = driver_tails(idx, dims)
    run.write_csv(args.output, out)
    run.finish()
    return EXIT_OK


def cmd_score(args) -> int:
    run = Run(args, [args.input, args.labels])
    table = _read_csv(args.input)
    labels = _read_csv(args.labels, ["label"])
    key = "driver_id" if "dim" in table.columns else "trip_id"
    if key not in labels.columns:
        raise InputFormatError(f"{args.labels} is missing column: {key}")
    offset = None
    if key == "driver_id":
        X, offset = driver_design(table, args.covariate_set, args.offset_scale)
        X = X.reset_index()
    else:
        prefix = "An_" if args.normalized else "A_"
        cols = [c for c in table.columns if c.startswith(prefix)]
        X = table[[key, *cols]]
    merged = X.merge(labels, on=key, how="inner", validate="one_to_one")
    if offset is not None:
        offset = pd.Series(offset, index=X[key]).reindex(merged[key]).to_numpy()
    covs = [c for c in X.columns if c != key]
    Xm = merged[covs].to_numpy(dtype=float)
    y = merged["label"].to_numpy(dtype=int)
    fitted = fit_logistic(Xm, y, offset, names=covs)
    run.write_csv(args.output, fitted.summary())
    metrics = {"converged": fitted.converged, "separated": fitted.separated}
    groups = merged[args.group_column].to_numpy() if args.group_column in merged.columns else None
    if args.folds > 1:
        cv = cross_validate(Xm, y, groups, offset, k=args.folds, seed=args.seed)
        metrics.update(cv_mean_auc=cv.mean_auc, cv_fold_aucs=cv.fold_aucs, cv_skipped_folds=cv.skipped)
        print(f"cv mean ROC-AUC {cv.mean_auc:.4f} over {len(cv.fold_aucs)} folds")
    if "window_id" in merged.columns:
        wm = window_metrics(fitted.linear_predictor(Xm, offset), y, merged["window_id"])
        metrics.update(window_mean_auc=wm.mean_auc, window_median_auc=wm.median_auc, window_accuracy=wm.accuracy)
        print(f"window AUC mean {wm.mean_auc:.4f} median {wm.median_auc:.4f} accuracy {wm.accuracy:.4f}")
    run.extra["metrics"] = metrics
    run.finish()
    return EXIT_OK


def cmd_simulate(args) -> int:
    run = Run(args, [args.model])
    model = _read_model(args.model)
    contamination = {}
    for item in args.contaminate.split(",") if args.contaminate else []:
        dim, scale, shift = item.split(":")
        contamination[int(dim)] = (float(scale), float(shift))
    config = SimConfig(
        model=model,
        n_sub_intervals=args.sub_intervals,
        n_obs=args.obs,
        n_obs_jitter=args.obs_jitter,
        gap_rate=args.gap_rate,
        fixed_gap=args.fixed_gap,
        subs_per_trip=args.subs_per_trip,
        n_drivers=args.drivers,
        contamination_fraction=args.contamination_fraction,
        contamination=contamination or {1: (3.0, 0.0)},
        seed=args.seed,
    )
    subs, truth = simulate(config)
    dims = RESPONSES if model.n_dims == len(RESPONSES) else model.dims
    run.write_csv(args.output, segments_to_frame(group_trips(subs), dims))
    if args.truth:
        run.write_csv(args.truth, truth.frame(subs))
    run.finish()
    return EXIT_OK


def cmd_uah(args) -> int:
    from .uah import find_trips, load_trip

    run = Run(args, [args.root])
    found = find_trips(args.root)
    if args.drivers_only:
        keep = {d.strip().upper() for d in args.drivers_only.split(",")}
        found = [tr for tr in found if tr.driver in keep]
    if not found:
        raise InputFormatError(f"no UAH-DriveSet trip folders under {args.root}")
    series, meta = [], []
    for i, tr in enumerate(found):
        series.append(load_trip(tr, i))
        meta.append({"trip_id": i, "driver_id": tr.driver, "trip": tr.label, "aggressive": int(tr.aggressive), "folder": tr.path.name})
    run.write_csv(args.output, segments_to_frame(series))
    if args.trips:
        run.write_csv(args.trips, pd.DataFrame(meta))
    run.finish()
    return EXIT_OK


def cmd_decode(args) -> int:
    run = Run(args, [args.model, args.input])
    model = _read_model(args.model)
    trips = read_segments_csv(args.input, "eval")
    subs = [s for tr in trips for s in tr.sub_intervals]
    paths = viterbi_batch(model, subs) if subs else []
    parts = [
        pd.DataFrame({"trip_id": s.trip_id, "sub_id": s.sub_id, "t": s.t, "state": p.states})
        for s, p in zip(subs, paths)
    ]
    frame = pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(columns=["trip_id", "sub_id", "t", "state"])
    run.write_csv(args.output, frame)
    run.finish()
    return EXIT_OK


# --- argument parsing ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style file whose [cthmm] and [<command>] keys set option defaults")
    common.add_argument("--jobs", type=int, default=None, help=f"worker processes (default ${JOBS_ENV} or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cthmm", description="CTHMM telematics anomaly toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", parents=[common], help="derive accelerations and segment trips")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--mode", choices=["train", "eval"], default="train")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("fit", parents=[common], help="fit a CTHMM by EM")
    p.add_argument("input", help="segmented CSV")
    p.add_argument("-o", "--output", required=True, help="model JSON")
    p.add_argument("--states", type=int, required=True)
    p.add_argument("--families", default="gamma,normal,normal")
    p.add_argument("--decoding", choices=["soft", "hard"], default="soft")
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=5000)
    p.add_argument("--tol", type=float, default=1e-8, help="relative log-likelihood change for convergence")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("residuals", parents=[common], help="forecast pseudo-residuals")
    p.add_argument("model")
    p.add_argument("input", help="segmented CSV (eval mode)")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.set_defaults(func=cmd_residuals)

    p = sub.add_parser("indices", parents=[common], help="trip anomaly indices")
    p.add_argument("input", help="residuals CSV")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--threshold", type=float, default=None, help="re-flag outliers at this |z| (default: stored flags)")
    p.add_argument("--drivers", help="CSV with trip_id,driver_id columns (e.g. the segmented CSV)")
    p.set_defaults(func=cmd_indices)

    p = sub.add_parser("tails", parents=[common], help="driver-level tail statistics")
    p.add_argument("input", help="indices CSV")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_tails)

    p = sub.add_parser("score", parents=[common], help="logistic GLM, cross-validated ROC-AUC")
    p.add_argument("input", help="indices CSV (trip level) or tails CSV (driver level)")
    p.add_argument("--labels", required=True, help="CSV with trip_id or driver_id and label")
    p.add_argument("-o", "--output", required=True, help="fit summary CSV")
    p.add_argument("--normalized", action="store_true", help="use normalized trip indices")
    p.add_argument("--covariate-set", type=int, choices=[1, 2, 3], default=2)
    p.add_argument("--offset-scale", choices=["log", "raw"], default="log")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--group-column", default="group_id")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("simulate", parents=[common], help="draw data from a model")
    p.add_argument("model")
    p.add_argument("-o", "--output", required=True, help="segmented CSV")
    p.add_argument("--truth", help="truth CSV trip_id,sub_id,contaminated")
    p.add_argument("--sub-intervals", type=int, default=100)
    p.add_argument("--obs", type=int, default=100)
    p.add_argument("--obs-jitter", type=int, default=0)
    p.add_argument("--gap-rate", type=float, default=1.0)
    p.add_argument("--fixed-gap", type=float, default=None)
    p.add_argument("--subs-per-trip", type=int, default=1)
    p.add_argument("--drivers", type=int, default=1)
    p.add_argument("--contamination-fraction", type=float, default=0.0)
    p.add_argument("--contaminate", default="", help="dim:scale:shift[,...], default 1:3:0")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("uah", parents=[common], help="convert a UAH-DriveSet folder tree")
    p.add_argument("root")
    p.add_argument("-o", "--output", required=True, help="segmented CSV")
    p.add_argument("--trips", help="trip metadata CSV")
    p.add_argument("--drivers-only", help="comma-separated driver codes, e.g. D1,D2")
    p.set_defaults(func=cmd_uah)

    p = sub.add_parser("decode", parents=[common], help="Viterbi state paths")
    p.add_argument("model")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_decode)
    return parser


def _as_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise InputError(f"not a boolean: {text!r}")


def apply_config(parser: argparse.ArgumentParser, argv) -> None:
    """Turn config-file keys into option defaults so explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    pre.add_argument("command", nargs="?")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    cp = configparser.ConfigParser()
    if not cp.read(known.config):
        raise InputError(f"cannot read config file {known.config}")
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sp = subparsers.choices.get(known.command)
    if sp is None:
        return
    values = {}
    for section in (CONFIG_SECTION, known.command):
        if cp.has_section(section):
            values.update(cp.items(section))
    actions = {a.dest: a for a in sp._actions}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None or not action.option_strings:
            raise InputError(f"config key {key!r} is not an option of '{known.command}'")
        if action.nargs == 0:
            value = _as_bool(raw)
        else:
            value = action.type(raw) if action.type else raw
        action.required = False
        sp.set_defaults(**{dest: value})


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        apply_config(parser, argv)
    except (InputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        with np.errstate(over="ignore", under="ignore"):
            return args.func(args)
    except (ZeroLikelihoodError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, InputFormatError, NoTrainingDataError, DesignError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, KeyError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
