"""Command line interface.

Exit codes: 0 success, 2 invalid parameters, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__, stages
from .config import (
    RunManifest,
    derive_seed,
    file_digest,
    get_bool,
    get_float,
    get_floats,
    get_int,
    get_ints,
    resolve_config,
)
from .exceptions import DataError, InvalidParameterError, NumericalError
from .synth import SynthConfig

log = logging.getLogger("nmfrisk")

EXIT_OK, EXIT_PARAM, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a comma-separated number list") from None


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a comma-separated integer list") from None


@contextmanager
def _threads(n: int):
    if n and n > 0:
        with threadpool_limits(limits=n):
            yield
    else:
        yield


# -- single-stage commands ----------------------------------------------------


def cmd_synth(a):
    values = {k: v for k, v in vars(a).items() if k in SynthConfig.__dataclass_fields__ and v is not None}
    return stages.synth(a.out, SynthConfig(**values))


def cmd_ingest(a):
    return stages.ingest(a.events, a.labels, a.out)


def cmd_filter(a):
    return stages.filter_rows(a.input, a.out, a.min_nnz, a.label)


def cmd_split(a):
    return stages.split(a.input, a.n_validation, a.seed, a.out_train, a.out_validation)


def cmd_sweep(a):
    paths, result = stages.nmf_sweep(a.input, a.k_min, a.k_max, a.seed, a.out, a.max_iter, a.tol, a.n_seeds)
    if result is not None:
        flag = "" if result.distinct else " (no distinct elbow)"
        print(f"elbow k={result.k}{flag}")
    return paths


def cmd_rwc(a):
    return stages.rwc(a.input, a.k, a.runs, a.seed, a.out, a.max_iter, a.tol, a.factors_dir)


def cmd_select(a):
    return stages.select(a.rwc, a.out)


def cmd_prevalence(a):
    return stages.prevalence_stage(a.diagnosed, a.undiagnosed, a.selected, a.out)


def cmd_kld(a):
    return stages.kld(a.prevalence, a.out, a.epsilon)


def cmd_score(a):
    return stages.score(a.input, a.selected, a.kld, a.reference, a.out, a.percentile_bounds)


def cmd_validate(a):
    return stages.validate(
        a.out, a.train_scores, a.validation_scores, a.undiagnosed_scores, a.train,
        a.undiagnosed, a.selected, a.thresholds, a.repeats, a.folds, a.seed,
        a.jaccard_k, a.high_band, a.low_band,
    )


# -- pipeline -----------------------------------------------------------------


def _check_static(cfg) -> None:
    """Parameter checks that need no data; run before anything is written."""
    if cfg["k"] != "auto" and get_int(cfg, "k") < 1:
        raise InvalidParameterError("k must be >= 1 or 'auto'")
    for key in ("runs", "repeats", "sweep_seeds"):
        if get_int(cfg, key) < 1:
            raise InvalidParameterError(f"{key} must be >= 1")
    if get_int(cfg, "folds") < 2:
        raise InvalidParameterError("folds must be >= 2")
    if get_int(cfg, "min_nnz") < 0 or get_int(cfg, "max_iter") < 1 or get_float(cfg, "tol") < 0:
        raise InvalidParameterError("min_nnz, max_iter and tol must be non-negative (max_iter >= 1)")
    if not get_float(cfg, "epsilon") > 0:
        raise InvalidParameterError("epsilon must be positive")
    lo, hi = get_floats(cfg, "percentile_bounds")
    if not 0 <= lo <= hi <= 100:
        raise InvalidParameterError("percentile_bounds must satisfy 0 <= low <= high <= 100")
    if any(not 0 <= t <= 1 for t in get_floats(cfg, "thresholds")):
        raise InvalidParameterError("thresholds must lie in [0, 1]")
    if cfg["prevalence_cohort"] not in ("all", "filtered"):
        raise InvalidParameterError("prevalence_cohort must be 'all' or 'filtered'")
    get_ints(cfg, "jaccard_k")
    if get_bool(cfg, "synth"):
        _synth_config(cfg).validate()
    elif not cfg["events"] or not cfg["labels"]:
        raise InvalidParameterError("config needs either synth = true or both events and labels")


def _synth_config(cfg) -> SynthConfig:
    values = {k[len("synth."):]: v for k, v in cfg.items() if k.startswith("synth.")}
    values.setdefault("seed", str(derive_seed(get_int(cfg, "seed"), "synth")))
    return SynthConfig.from_mapping(values)


def run_pipeline(cfg: dict[str, str], out_dir, subcommand: str = "pipeline") -> RunManifest:
    """Run every stage into ``out_dir`` and write ``manifest.json``.

    On invalid parameters everything written so far is removed and the
    exception propagates. Other failures leave partial outputs and a manifest
    marked incomplete, then propagate.
    """
    start = time.monotonic()
    out = Path(out_dir)
    seed = get_int(cfg, "seed")
    seeds = {"master": seed, **{s: derive_seed(seed, s) for s in ("split", "sweep", "rwc", "validate")}}
    manifest = RunManifest(__version__, subcommand, dict(sorted(cfg.items())), seeds)
    written: list[Path] = []
    stage = "config"
    created_dir = not out.exists()

    def track(paths):
        written.extend(Path(p) for p in paths)

    try:
        _check_static(cfg)
        out.mkdir(parents=True, exist_ok=True)
        if get_bool(cfg, "synth"):
            stage = "synth"
            sc = _synth_config(cfg)
            manifest.seeds["synth"] = sc.seed
            track(stages.synth(out / "synth", sc))
            cohort = out / "synth" / "cohort"
        else:
            stage = "ingest"
            for key in ("events", "labels"):
                manifest.inputs[key] = file_digest(cfg[key])
            track(stages.ingest(cfg["events"], cfg["labels"], out / "cohort"))
            cohort = out / "cohort"

        stage = "filter"
        track(stages.filter_rows(cohort, out / "diagnosed_all", 0, "diagnosed"))
        track(stages.filter_rows(cohort, out / "undiagnosed", 0, "undiagnosed"))
        track(stages.filter_rows(cohort, out / "diagnosed", get_int(cfg, "min_nnz"), "diagnosed"))

        stage = "split"
        from .cohort import load_cohort

        n_diag = load_cohort(out / "diagnosed").n_patients
        if cfg["n_validation"]:
            n_val = get_int(cfg, "n_validation")
        else:
            n_val = int(round(get_float(cfg, "validation_fraction") * n_diag))
        track(stages.split(out / "diagnosed", n_val, seeds["split"], out / "train", out / "validation"))

        max_iter, tol = get_int(cfg, "max_iter"), get_float(cfg, "tol")
        if cfg["k"] == "auto":
            stage = "nmf-sweep"
            paths, result = stages.nmf_sweep(out / "train", get_int(cfg, "k_min"), get_int(cfg, "k_max"),
                                             seeds["sweep"], out / "error_curve.tsv", max_iter, tol,
                                             get_int(cfg, "sweep_seeds"))
            track(paths)
            if result is None:
                raise InvalidParameterError("k = auto needs k_max - k_min >= 2")
            k = result.k
        else:
            k = get_int(cfg, "k")
        manifest.config["k_resolved"] = str(k)

        stage = "rwc"
        track(stages.rwc(out / "train", k, get_int(cfg, "runs"), seeds["rwc"], out / "rwc.tsv", max_iter, tol))
        stage = "select"
        track(stages.select(out / "rwc.tsv", out / "selected.tsv"))
        stage = "prevalence"
        source = out / ("diagnosed_all" if cfg["prevalence_cohort"] == "all" else "diagnosed")
        track(stages.prevalence_stage(source, out / "undiagnosed", out / "selected.tsv", out / "prevalence.tsv"))
        stage = "kld"
        track(stages.kld(out / "prevalence.tsv", out / "kld.tsv", get_float(cfg, "epsilon")))
        stage = "score"
        bounds = get_floats(cfg, "percentile_bounds")
        for name in ("train", "validation", "undiagnosed"):
            track(stages.score(out / name, out / "selected.tsv", out / "kld.tsv", out / "train",
                               out / f"scores_{name}.tsv", bounds))
        stage = "validate"
        has_val = n_val > 0
        track(stages.validate(
            out / "validation_reports", out / "scores_train.tsv",
            out / "scores_validation.tsv" if has_val else None, out / "scores_undiagnosed.tsv",
            out / "train", out / "undiagnosed", out / "selected.tsv",
            get_floats(cfg, "thresholds"), get_int(cfg, "repeats"), get_int(cfg, "folds"),
            seeds["validate"], get_ints(cfg, "jaccard_k"), get_float(cfg, "high_band"),
            get_float(cfg, "low_band"),
        ))
        manifest.status = "complete"
    except InvalidParameterError as exc:
        exc.stage = stage
        for p in written:
            p.unlink(missing_ok=True)
        _remove_empty_dirs(out, remove_root=created_dir)
        raise
    except Exception as exc:
        exc.stage = stage
        manifest.failed_stage = stage
        manifest.message = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        if out.exists() and (manifest.status == "complete" or manifest.failed_stage):
            manifest.outputs = {
                str(p.relative_to(out)): file_digest(p) for p in sorted(set(written)) if p.exists()
            }
            manifest.duration_seconds = round(time.monotonic() - start, 3)
            manifest.write(out / "manifest.json")
    return manifest


def _remove_empty_dirs(root: Path, remove_root: bool) -> None:
    if not root.exists():
        return
    for d in sorted((p for p in root.rglob("*") if p.is_dir()), key=lambda p: len(p.parts), reverse=True):
        if not any(d.iterdir()):
            d.rmdir()
    if remove_root and not any(root.iterdir()):
        root.rmdir()


def cmd_pipeline(a):
    overrides = dict(a.set or [])
    if a.from_manifest:
        previous = RunManifest.read(a.from_manifest)
        cfg = dict(previous.config)
        cfg.pop("k_resolved", None)
        cfg.update(overrides)
        cfg = resolve_config(overrides=cfg, environ={})
    else:
        cfg = resolve_config(a.config, overrides)
    with _threads(get_int(cfg, "threads")):
        manifest = run_pipeline(cfg, a.out)
    print(f"pipeline complete: {len(manifest.outputs)} artifacts in {a.out}")
    return []


def _key_value(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError("expected key=value")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nmfrisk", description="NMF-based risk stratification pipeline")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=0, help="BLAS thread limit (0 = library default)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def fit_flags(sp):
        sp.add_argument("--max-iter", type=int, default=200)
        sp.add_argument("--tol", type=float, default=1e-4)

    s = sub.add_parser("synth", help="generate a synthetic cohort with planted structure")
    s.add_argument("--out", required=True, help="output directory")
    for name, f in SynthConfig.__dataclass_fields__.items():
        s.add_argument(f"--{name.replace('_', '-')}", dest=name, type=int if f.type == "int" else float)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="build a cohort from event and label TSV files")
    s.add_argument("--events", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--out", required=True, help="output cohort prefix")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("filter", help="keep rows with enough distinct covariates")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--min-nnz", type=int, default=5)
    s.add_argument("--label", choices=sorted(stages.LABELS), default=None)
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("split", help="seeded train/validation split")
    s.add_argument("--input", required=True)
    s.add_argument("--n-validation", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-train", required=True)
    s.add_argument("--out-validation", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("nmf-sweep", help="reconstruction error for a range of k, with elbow")
    s.add_argument("--input", required=True)
    s.add_argument("--k-min", type=int, default=2)
    s.add_argument("--k-max", type=int, default=15)
    s.add_argument("--n-seeds", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    fit_flags(s)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("rwc", help="ensemble rank-weighted coefficients")
    s.add_argument("--input", required=True)
    s.add_argument("--k", type=int, default=9)
    s.add_argument("--runs", type=int, default=40)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--factors-dir", default=None, help="also write every run's W/H container here")
    fit_flags(s)
    s.set_defaults(func=cmd_rwc)

    s = sub.add_parser("select", help="covariates with RWC >= mean positive RWC")
    s.add_argument("--rwc", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("prevalence", help="prevalence of selected covariates in both groups")
    s.add_argument("--diagnosed", required=True)
    s.add_argument("--undiagnosed", required=True)
    s.add_argument("--selected", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prevalence)

    s = sub.add_parser("kld", help="smoothed KL divergence from a prevalence table")
    s.add_argument("--prevalence", required=True)
    s.add_argument("--epsilon", type=float, default=1e-8)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_kld)

    s = sub.add_parser("score", help="risk profiles for a cohort")
    s.add_argument("--input", required=True)
    s.add_argument("--selected", required=True)
    s.add_argument("--kld", required=True)
    s.add_argument("--reference", required=True, help="cohort prefix of the reference (training) cohort")
    s.add_argument("--percentile-bounds", type=_floats, default=(50.0, 90.0))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("validate", help="score summaries, Jaccard curves, label-quality experiment")
    s.add_argument("--train-scores", required=True)
    s.add_argument("--validation-scores", default=None)
    s.add_argument("--undiagnosed-scores", required=True)
    s.add_argument("--train", required=True)
    s.add_argument("--undiagnosed", required=True)
    s.add_argument("--selected", required=True)
    s.add_argument("--thresholds", type=_floats, default=(0.1, 0.5, 1.0))
    s.add_argument("--repeats", type=int, default=10)
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--jaccard-k", type=_ints, default=(10, 25, 50, 100))
    s.add_argument("--high-band", type=float, default=0.9)
    s.add_argument("--low-band", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("pipeline", help="run every stage from a config file")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--config")
    src.add_argument("--from-manifest", help="re-run with the configuration recorded in a manifest")
    s.add_argument("--set", type=_key_value, action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads(args.threads):
            paths = args.func(args)
        for path in paths or []:
            log.info("wrote %s", path)
        return EXIT_OK
    except InvalidParameterError as exc:
        return _fail(args, exc, "invalid-parameter", EXIT_PARAM)
    except (DataError, OSError) as exc:
        return _fail(args, exc, "data-error", EXIT_DATA)
    except (NumericalError, ArithmeticError) as exc:
        return _fail(args, exc, "numerical-failure", EXIT_NUMERIC)


def _fail(args, exc, kind: str, code: int) -> int:
    where = args.command
    if getattr(exc, "stage", None):
        where += f" [stage {exc.stage}]"
    print(f"nmfrisk {where}: {kind}: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
