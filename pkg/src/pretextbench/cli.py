"""Command-line entry point: ``pretextbench <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import (
    CheckpointError,
    ConfigError,
    DecodeError,
    EmptyInputError,
    NumericAbort,
    SamplingError,
    TooShortError,
    UndefinedMetricError,
)
from .manifest import DatasetManifest
from .probe import LIMITED_PERCENTAGES, LIMITED_REPEATS, ProbeSchedule
from .synth import SynthSpec, synth_dataset

log = logging.getLogger("pretextbench")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# flag name -> (section, key) in the run config
_RUN_FLAGS = {
    "objective": ("objective", "kind"),
    "temperature": ("objective", "temperature"),
    "ema_momentum": ("objective", "ema_momentum"),
    "center_momentum": ("objective", "center_momentum"),
    "teacher_temp": ("objective", "teacher_temp"),
    "student_temp": ("objective", "student_temp"),
    "n_prototypes": ("objective", "n_prototypes"),
    "bt_lambda": ("objective", "bt_lambda"),
    "vicreg_gamma": ("objective", "vicreg_gamma"),
    "manifest": ("data", "manifest"),
    "split": ("data", "split"),
    "epochs": ("schedule", "epochs"),
    "steps_per_epoch": ("schedule", "steps_per_epoch"),
    "batch_pairs": ("schedule", "batch_pairs"),
    "lr": ("optimizer", "lr"),
    "time_pool": ("encoder", "time_pool"),
    "encoder_seed": ("encoder", "seed"),
    "seed": (None, "seed"),
    "output_dir": (None, "output_dir"),
    "keep_epoch_checkpoints": (None, "keep_epoch_checkpoints"),
}


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path}: {e}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"config file {path}: top level must be an object")
    return d


def build_run_config(args: argparse.Namespace):
    """Config file first, then every flag that was given on the command line."""
    from .train import RunConfig

    d = _read_config(args.config)
    for flag, (section, key) in _RUN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if section is None:
            d[key] = value
        else:
            d.setdefault(section, {})[key] = value
    if args.no_predictor:
        d.setdefault("objective", {})["use_predictor"] = False
    if args.no_centering:
        d.setdefault("objective", {})["use_centering"] = False
    cfg = RunConfig.from_dict(d)
    cfg.validate()
    return cfg


def _load_manifest(path) -> DatasetManifest:
    if path is None:
        raise ConfigError("--manifest is required")
    return DatasetManifest.load(path)


def cmd_synth(args) -> int:
    spec = SynthSpec(
        n_tracks=args.n_tracks, n_classes=args.n_classes, duration=args.duration, seed=args.seed,
        nuisance_level=args.nuisance_level,
    )
    m = synth_dataset(spec, args.output_dir)
    print(f"wrote {len(m.entries)} tracks to {Path(args.output_dir) / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .train import pretrain

    cfg = build_run_config(args)
    result = pretrain(cfg)
    print(f"last checkpoint: {result.last_checkpoint}")
    return EXIT_OK


def _schedule(args) -> ProbeSchedule:
    s = ProbeSchedule()
    if args.probe_epochs is not None:
        s.epochs = args.probe_epochs
    return s


def cmd_probe(args) -> int:
    from .pipeline import probe_checkpoint

    m = _load_manifest(args.manifest)
    report = probe_checkpoint(
        args.checkpoint, m, args.output_dir, args.bootstrap_n, args.bootstrap_frac, args.seed,
        _schedule(args), args.cache_dir, args.label,
    )
    b = report.bootstrap
    print(
        f"ROC-AUC {report.roc_macro:.4f} (bootstrap {b['mean_roc']:.4f} ± {b['std_roc']:.4f})  "
        f"mAP {report.map_macro:.4f} (bootstrap {b['mean_map']:.4f} ± {b['std_map']:.4f})"
    )
    return EXIT_OK


def cmd_limited(args) -> int:
    from .pipeline import limited_checkpoint

    m = _load_manifest(args.manifest)
    reports = limited_checkpoint(
        args.checkpoint, m, args.output_dir, args.percentages, args.repeats, args.bootstrap_n,
        args.bootstrap_frac, args.seed, _schedule(args), args.cache_dir, args.label,
    )
    print(f"wrote {len(reports)} cells to {Path(args.output_dir) / 'limited.csv'}")
    return EXIT_OK


def cmd_compare(args) -> int:
    from .pipeline import collect_reports, compare_reports, format_table, write_compare_csv

    reports = collect_reports(args.report_dir)
    if not reports:
        log.error("no valid reports under %s", args.report_dir)
        return EXIT_DATA
    rows = compare_reports(reports)
    out = Path(args.output_dir or args.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_compare_csv(rows, out / "compare.csv")
    table = format_table(rows)
    (out / "compare.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def _add_probe_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--bootstrap-n", type=int, default=50)
    p.add_argument("--bootstrap-frac", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probe-epochs", type=int, default=None, help="override the 25-epoch probe schedule")
    p.add_argument("--cache-dir", default=None, help="embedding cache (default: <output-dir>/cache)")
    p.add_argument("--label", default=None, help="objective name recorded in the report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pretextbench", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train an encoder with one pretext objective")
    p.add_argument("--config", default=None, help="JSON run config; flags override it")
    p.add_argument("--objective", choices=["contrastive", "byol", "clustering", "barlow_twins", "vicreg"])
    for flag in ("temperature", "ema_momentum", "center_momentum", "teacher_temp", "student_temp",
                 "bt_lambda", "vicreg_gamma", "lr"):
        p.add_argument("--" + flag.replace("_", "-"), type=float, default=None)
    for flag in ("n_prototypes", "epochs", "steps_per_epoch", "batch_pairs", "time_pool", "encoder_seed",
                 "seed", "keep_epoch_checkpoints"):
        p.add_argument("--" + flag.replace("_", "-"), type=int, default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", default=None)
    p.add_argument("--output-dir", default=None)
    p.add_argument("--no-predictor", action="store_true", help="BYOL without the prediction head")
    p.add_argument("--no-centering", action="store_true", help="clustering without teacher centering")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear probe on frozen track embeddings")
    _add_probe_flags(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("limited", help="limited-data probe campaign")
    _add_probe_flags(p)
    p.add_argument("--percentages", type=float, nargs="+", default=list(LIMITED_PERCENTAGES))
    p.add_argument("--repeats", type=int, default=LIMITED_REPEATS)
    p.set_defaults(func=cmd_limited)

    p = sub.add_parser("compare", help="rank objectives from probe reports")
    p.add_argument("report_dir")
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("synth-data", help="render the synthetic tagging dataset")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--n-tracks", type=int, default=SynthSpec.n_tracks)
    p.add_argument("--n-classes", type=int, default=SynthSpec.n_classes)
    p.add_argument("--duration", type=float, default=SynthSpec.duration)
    p.add_argument("--seed", type=int, default=SynthSpec.seed)
    p.add_argument("--nuisance-level", type=float, default=SynthSpec.nuisance_level)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    if getattr(args, "cache_dir", None) is None and hasattr(args, "cache_dir"):
        args.cache_dir = str(Path(args.output_dir) / "cache")
    try:
        return args.func(args)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except (DecodeError, TooShortError, EmptyInputError, SamplingError, CheckpointError, FileNotFoundError,
            UndefinedMetricError) as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except NumericAbort as e:
        log.error("numeric abort: %s", e)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
