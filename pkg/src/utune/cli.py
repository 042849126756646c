"""``utune`` command line: verification, parameter counts, training, grids and statistics.

Exit codes: 0 all checks passed, 1 a verification failed, 2 the run
configuration was invalid. A JSON report is written to ``--out`` in every case.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from . import tensor as tn
from .backbone import PRESETS, Backbone, BackboneConfig, forward_classify, freeze_backbone
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .composer import (ConfigError, TunerKind, UTuningConfig, compose, count_trainable_params, default_config,
                       enumerate_ablation_grid)
from .training import (FrozenParameterError, Schedule, ShiftSpec, SyntheticTask, TaskData, TrainingDivergedError,
                       finetune_petl, generate_dataset, linear_probe, pretrain_backbone)
from .verify import (DEFAULT_TOLERANCES, EQUIVALENCE_TYPES, Report, compare_stats, count_params_report,
                     deep_prompt_sweep, grad_check_suite, layer_statistics, verify_equivalence, write_stats_csv)

COMMANDS = ("verify-equivalence", "grad-check", "count-params", "pretrain", "train", "run-grid", "export-stats")
EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class RunConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Validated settings shared by every command."""

    command: str
    seed: int = 0
    precision: str = "f64"
    out: str = "runs"
    backbone: str = "desk"
    tuning: Optional[str] = None
    tolerances: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise RunConfigError(f"command: unknown {self.command!r}; expected one of {list(COMMANDS)}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise RunConfigError(f"seed: must be a non-negative integer, got {self.seed!r}")
        if self.precision not in ("f32", "f64"):
            raise RunConfigError(f"precision: expected f32 or f64, got {self.precision!r}")
        for k, v in self.tolerances.items():
            if k not in DEFAULT_TOLERANCES:
                raise RunConfigError(f"tolerances.{k}: unknown tolerance; expected one of {sorted(DEFAULT_TOLERANCES)}")
            if not isinstance(v, (int, float)) or v <= 0:
                raise RunConfigError(f"tolerances.{k}: must be a positive number, got {v!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise RunConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise RunConfigError(f"{unknown[0]}: unknown key; expected a subset of {sorted(known)}")
        return cls(**d)

    def backbone_config(self) -> BackboneConfig:
        if self.backbone in PRESETS:
            return PRESETS[self.backbone]
        path = Path(self.backbone)
        if not path.is_file():
            raise RunConfigError(f"backbone: {self.backbone!r} is neither a preset {sorted(PRESETS)} nor a file")
        try:
            return BackboneConfig.from_dict(json.loads(path.read_text()))
        except (ValueError, TypeError) as exc:
            raise RunConfigError(f"backbone: {path}: {exc}") from None

    def tuning_config(self, default: Optional[UTuningConfig] = None) -> Optional[UTuningConfig]:
        if self.tuning is None:
            return default
        path = Path(self.tuning)
        if not path.is_file():
            raise RunConfigError(f"config: file {self.tuning!r} not found")
        cfg = UTuningConfig.load(path)
        return cfg if cfg.name else UTuningConfig(cfg.specs, cfg.layer_range, path.stem)


# ------------------------------------------------------------------ parser


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    g.add_argument("--precision", choices=("f32", "f64"), default=None, help="float precision (default f64)")
    g.add_argument("--out", default=None, help="output directory (default ./runs)")
    g.add_argument("--config", default=None, metavar="FILE", help="tuning config JSON ({layer_range, specs})")
    g.add_argument("--run-config", default=None, metavar="FILE", help="JSON file with RunConfig defaults")
    g.add_argument("--backbone", default=None, help=f"preset {sorted(PRESETS)} or BackboneConfig JSON file")
    g.add_argument("--tol", action="append", default=[], metavar="NAME=VALUE",
                   help=f"tolerance override, NAME in {sorted(DEFAULT_TOLERANCES)}")


def _task_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("task and training")
    g.add_argument("--noise", type=float, default=1.5, help="token noise level of the synthetic task")
    g.add_argument("--train-size", type=int, default=2000)
    g.add_argument("--test-size", type=int, default=1000)
    g.add_argument("--shift-angle", type=float, default=30.0)
    g.add_argument("--redraw-fraction", type=float, default=0.5)
    g.add_argument("--epochs", type=int, default=50)
    g.add_argument("--warmup-epochs", type=int, default=None, help="default min(10, epochs // 5)")
    g.add_argument("--lr", type=float, default=0.005)
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--backbone-checkpoint", default=None, help="pretrained backbone (named-tensor file)")
    g.add_argument("--pretrain-epochs", type=int, default=5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="utune", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify-equivalence", help="certify parallel forms against original forms")
    _common(p)
    p.add_argument("--types", default=",".join(EQUIVALENCE_TYPES), help="comma list of prefix,prompt,adapter")
    p.add_argument("--cases", type=int, default=100, help="random cases per type")
    p.add_argument("--break-gate", action="store_true", help="negative control: corrupt the gates")

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    _common(p)

    p = sub.add_parser("count-params", help="trainable/frozen parameter counts")
    _common(p)
    p.add_argument("--deep-prompts", type=int, default=None, metavar="N",
                   help="count prompts of length N on every attention layer instead of --config")
    p.add_argument("--sweep", action="store_true", help="also check layers*n*width over a 3x3x3 sweep")

    p = sub.add_parser("pretrain", help="pretrain the desk backbone on the synthetic task")
    _common(p)
    _task_args(p)

    p = sub.add_parser("train", help="fine-tune tuners (or a linear probe) on the shifted task")
    _common(p)
    _task_args(p)
    p.add_argument("--linear-probe", action="store_true", help="train the head only on cached features")

    p = sub.add_parser("run-grid", help="train every ablation-grid config")
    _common(p)
    _task_args(p)
    p.add_argument("--only", default=None, help="comma list of config names to run")

    p = sub.add_parser("export-stats", help="per-layer activation statistics as CSV")
    _common(p)
    _task_args(p)
    p.add_argument("--tuner-checkpoint", default=None, help="trained tuner weights; default is freshly composed")
    p.add_argument("--split", default="downstream_test",
                   choices=("pretrain_train", "pretrain_test", "downstream_train", "downstream_test"))
    p.add_argument("--samples", type=int, default=64)
    return parser


def _parse_tolerances(items: Sequence[str]) -> dict:
    out = {}
    for item in items:
        name, sep, value = item.partition("=")
        if not sep:
            raise RunConfigError(f"tolerances: expected NAME=VALUE, got {item!r}")
        try:
            out[name] = float(value)
        except ValueError:
            raise RunConfigError(f"tolerances.{name}: not a number: {value!r}") from None
    return out


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    base: dict = {}
    if args.run_config:
        try:
            base = json.loads(Path(args.run_config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise RunConfigError(f"run-config: {exc}") from None
        if not isinstance(base, dict):
            raise RunConfigError("run-config: must be a JSON object")
        if base.get("command", args.command) != args.command:
            raise RunConfigError(f"command: run config is for {base['command']!r}, not {args.command!r}")
    merged = {**base, "command": args.command}
    for key, val in (("seed", args.seed), ("precision", args.precision), ("out", args.out),
                     ("backbone", args.backbone), ("tuning", args.config)):
        if val is not None:
            merged[key] = val
    tols = _parse_tolerances(args.tol)
    if tols:
        merged["tolerances"] = {**merged.get("tolerances", {}), **tols}
    return RunConfig.from_dict(merged)


# ---------------------------------------------------------------- commands


def _task_from(args, seed: int, meta_task: Optional[dict] = None) -> SyntheticTask:
    if meta_task is not None:
        task = SyntheticTask.from_dict(meta_task)
        return SyntheticTask(task.seed, task.num_classes, task.seq_len, task.input_dim, task.noise, task.shift,
                             args.train_size, args.test_size)
    return SyntheticTask(seed=seed, noise=args.noise,
                         shift=ShiftSpec(angle_deg=args.shift_angle, redraw_fraction=args.redraw_fraction),
                         train_size=args.train_size, test_size=args.test_size)


def _schedule(args) -> Schedule:
    warm = args.warmup_epochs if args.warmup_epochs is not None else min(10, args.epochs // 5)
    return Schedule(base_lr=args.lr, warmup_epochs=warm, epochs=args.epochs)


def _require_f64(rc: RunConfig) -> None:
    if rc.precision != "f64":
        raise RunConfigError("precision: verification commands require f64")


def _load_backbone(path: str, expect: Optional[BackboneConfig] = None):
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "backbone":
        raise CheckpointError(f"{path}: not a backbone checkpoint (kind={meta.get('kind')!r})")
    cfg = BackboneConfig.from_dict(meta["backbone_config"])
    if expect is not None and cfg != expect:
        raise CheckpointError(f"{path}: checkpoint backbone {cfg.to_dict()} != requested {expect.to_dict()}")
    bb = Backbone.build(cfg, seed=0)
    bb.load_state_dict(tensors)
    bb.pretrain_accuracy = meta.get("pretrain_accuracy")
    return bb, meta


def _save_backbone(bb: Backbone, task: SyntheticTask, path: Path) -> None:
    save_tensors(path, bb.state_dict(), {"kind": "backbone", "backbone_config": bb.config.to_dict(),
                                         "task": task.to_dict(), "pretrain_accuracy": bb.pretrain_accuracy,
                                         "version": __version__})


def _obtain_backbone(rc: RunConfig, args, out: Path, report: Report, log):
    """Load ``--backbone-checkpoint`` or pretrain a fresh backbone; returns (backbone, task)."""
    if args.backbone_checkpoint:
        bb, meta = _load_backbone(args.backbone_checkpoint, rc.backbone_config())
        task = _task_from(args, rc.seed, meta.get("task"))
        freeze_backbone(bb)
        report.extra["backbone_checkpoint"] = args.backbone_checkpoint
        return bb, task
    task = _task_from(args, rc.seed)
    bb = Backbone.build(rc.backbone_config(), seed=rc.seed)
    log(f"pretraining backbone for {args.pretrain_epochs} epochs")
    pretrain_backbone(task, bb, epochs=args.pretrain_epochs, seed=rc.seed)
    bb.pretrain_history.write_csv(out / "pretrain_metrics.csv")
    _save_backbone(bb, task, out / "backbone.utnt")
    report.extra["pretrain_accuracy"] = bb.pretrain_accuracy
    return bb, task


def cmd_verify_equivalence(rc: RunConfig, args, out: Path, log) -> Report:
    _require_f64(rc)
    types = [t.strip() for t in args.types.split(",") if t.strip()]
    bad = [t for t in types if t not in EQUIVALENCE_TYPES]
    if bad or not types:
        raise RunConfigError(f"types: unknown {bad or types}; expected a subset of {list(EQUIVALENCE_TYPES)}")
    if args.cases < 1:
        raise RunConfigError("cases: must be >= 1")
    report = verify_equivalence(types, args.cases, rc.seed, args.break_gate, rc.tolerances, out / "replay")
    w = report.extra["worst_max_abs_diff"]
    log("worst |diff| " + ", ".join(f"{k}={v:.3e}" for k, v in w.items())
        + f"; worst gate reconstruction {report.extra['worst_gate_reconstruction_error']:.3e}")
    return report


def cmd_grad_check(rc: RunConfig, args, out: Path, log) -> Report:
    _require_f64(rc)
    cfg = rc.tuning_config()
    report = grad_check_suite(None if cfg is None else [cfg], rc.seed, rc.tolerances)
    worst = max((c.value for c in report.cases if c.metric == "rel_err"), default=0.0)
    log(f"{len(report.args['configs'])} configs, worst relative error {worst:.3e}")
    return report


def cmd_count_params(rc: RunConfig, args, out: Path, log) -> Report:
    from .composer import deep_prompt_config
    bcfg = rc.backbone_config()
    if args.deep_prompts is not None:
        if args.deep_prompts < 1:
            raise RunConfigError("deep-prompts: must be >= 1")
        tcfg = deep_prompt_config(args.deep_prompts)
    else:
        tcfg = rc.tuning_config(UTuningConfig(name="linear-probe"))
    report = count_params_report(bcfg, tcfg, rc.seed, reference=rc.backbone == "vitb16",
                                 tolerances=rc.tolerances)
    if args.sweep:
        deep_prompt_sweep(report=report)
    ex = report.extra
    log(f"{'group':<24}{'trainable':>12}{'frozen':>14}")
    for g, c in sorted(ex["groups"].items()):
        log(f"{g:<24}{c['trainable']:>12,}{c['frozen']:>14,}")
    log(f"{'total':<24}{ex['trainable']:>12,}{ex['frozen']:>14,}")
    log(f"{'total (M)':<24}{ex['trainable_millions']:>12.4f}{ex['frozen_millions']:>14.4f}")
    for key, row in ex.get("reference", {}).items():
        log(f"vitb16 {key}: {row['count']:,} = {row['millions']:.3f}M (expected ≈{row['reference_millions']}M)")
    return report


def cmd_pretrain(rc: RunConfig, args, out: Path, log) -> Report:
    report = Report("pretrain", {"epochs": args.pretrain_epochs})
    task = _task_from(args, rc.seed)
    bb = Backbone.build(rc.backbone_config(), seed=rc.seed)
    pretrain_backbone(task, bb, epochs=args.pretrain_epochs, seed=rc.seed,
                      log=lambda r: log(f"epoch {r.epoch:3d} loss {r.train_loss:.4f} acc {r.train_acc:.3f}"))
    bb.pretrain_history.write_csv(out / "pretrain_metrics.csv")
    _save_backbone(bb, task, out / "backbone.utnt")
    report.extra = {"pretrain_accuracy": bb.pretrain_accuracy, "checkpoint": str(out / "backbone.utnt"),
                    "task": task.to_dict()}
    report.add("pretrain/finite-loss", "final_train_loss", bb.pretrain_history.final.train_loss, float("inf"))
    return report


def cmd_train(rc: RunConfig, args, out: Path, log) -> Report:
    schedule = _schedule(args)
    cfg = None if args.linear_probe else rc.tuning_config(default_config())
    report = Report("train", {"config": None if cfg is None else cfg.to_dict(), "schedule": asdict(schedule),
                              "linear_probe": args.linear_probe})
    bb, task = _obtain_backbone(rc, args, out, report, log)
    progress = (lambda r: log(f"epoch {r.epoch:3d} lr {r.lr:.2e} loss {r.train_loss:.4f} "
                              f"train {r.train_acc:.3f} test {r.test_acc:.3f}"))
    if args.linear_probe:
        name = "linear-probe"
        hist = linear_probe(bb, task, schedule, args.batch_size, rc.seed, csv_path=out / f"{name}_metrics.csv",
                            log=progress)
        params = count_trainable_params(hist.model)
    else:
        name = cfg.name or "custom"
        model = compose(bb, cfg, seed=rc.seed)
        params = count_trainable_params(model)
        hist = finetune_petl(model, task, schedule, args.batch_size, rc.seed,
                             csv_path=out / f"{name}_metrics.csv", log=progress)
        save_tensors(out / f"{name}_tuners.utnt", model.tuner_state_dict(),
                     {"kind": "tuners", "tuning": cfg.to_dict(), "backbone_config": bb.config.to_dict()})
    report.extra.update(name=name, trainable_params=params, final=asdict(hist.final), wall_time=hist.wall_time)
    report.add(f"{name}/loss-decreased", "final_minus_initial_train_loss",
               hist.final.train_loss - hist.rows[0].train_loss, 0.0)
    return report


def cmd_run_grid(rc: RunConfig, args, out: Path, log) -> Report:
    schedule = _schedule(args)
    grid = enumerate_ablation_grid()
    if args.only:
        wanted = [n.strip() for n in args.only.split(",")]
        names = {c.name for c in grid}
        missing = [n for n in wanted if n not in names]
        if missing:
            raise RunConfigError(f"only: unknown config names {missing}")
        grid = [c for c in grid if c.name in wanted]
    report = Report("run-grid", {"schedule": asdict(schedule), "configs": [c.name for c in grid]})
    bb, task = _obtain_backbone(rc, args, out, report, log)
    data = TaskData.load(task)
    (out / "grid").mkdir(exist_ok=True)
    summary = []
    for cfg in grid:
        row = {"config": cfg.name, "params": None, "initial_train_loss": None, "final_train_loss": None,
               "final_test_acc": None, "status": "ok"}
        try:
            model = compose(bb, cfg, seed=rc.seed)
            row["params"] = count_trainable_params(model)
            hist = finetune_petl(model, task, schedule, args.batch_size, rc.seed, data=data,
                                 csv_path=out / "grid" / f"{cfg.name}.csv")
            row.update(initial_train_loss=hist.rows[0].train_loss, final_train_loss=hist.final.train_loss,
                       final_test_acc=hist.final.test_acc)
            ok = hist.final.train_loss < hist.rows[0].train_loss
            if not ok:
                row["status"] = "loss-not-reduced"
        except (FrozenParameterError, TrainingDivergedError, FloatingPointError, ValueError) as exc:
            row["status"] = f"error: {type(exc).__name__}: {exc}"
            ok = False
        summary.append(row)
        report.add(f"grid/{cfg.name}", "final_minus_initial_train_loss",
                   (row["final_train_loss"] - row["initial_train_loss"]) if row["final_train_loss"] is not None
                   else float("nan"), 0.0, passed=ok, **row)
        log(f"{cfg.name:<32} params {row['params'] or 0:>7} test {row['final_test_acc'] or 0:.3f} {row['status']}")
    with open(out / "grid_summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0]) if summary else ["config"])
        w.writeheader()
        w.writerows(summary)
    report.extra["summary_rows"] = len(summary)
    return report


def cmd_export_stats(rc: RunConfig, args, out: Path, log) -> Report:
    cfg = rc.tuning_config(default_config())
    report = Report("export-stats", {"config": cfg.to_dict(), "split": args.split, "samples": args.samples})
    if args.backbone_checkpoint:
        bb, meta = _load_backbone(args.backbone_checkpoint, rc.backbone_config())
        task = _task_from(args, rc.seed, meta.get("task"))
    else:
        bb = Backbone.build(rc.backbone_config(), seed=rc.seed)
        task = _task_from(args, rc.seed)
    if bb.config.input_dim != task.input_dim or bb.config.seq_len != task.seq_len:
        raise RunConfigError("backbone: token shape does not match the synthetic task; use the desk backbone")
    model = compose(bb, cfg, seed=rc.seed)
    if args.tuner_checkpoint:
        tensors, meta = load_tensors(args.tuner_checkpoint)
        if meta.get("kind") != "tuners":
            raise CheckpointError(f"{args.tuner_checkpoint}: not a tuner checkpoint")
        saved = UTuningConfig.from_dict(meta["tuning"])
        if saved.specs != cfg.specs or saved.layer_range != cfg.layer_range:
            raise ConfigError("config", f"tuner checkpoint was trained with {saved.to_dict()}, "
                                  f"but --config describes {cfg.to_dict()}")
        model.load_tuner_state(tensors)
    tokens, _ = generate_dataset(task, args.split, args.samples)
    rows = layer_statistics(model.forward, tokens)
    frozen_rows = layer_statistics(lambda x, traces: forward_classify(x, bb, traces=traces), tokens)
    write_stats_csv(rows, out / "stats.csv")
    write_stats_csv(frozen_rows, out / "stats_frozen.csv")
    diff = compare_stats(rows, frozen_rows)
    expected_rows = bb.config.layers * 5 * 6
    report.add("stats/row-count", "abs_diff", abs(len(rows) - expected_rows), 0.5, rows=len(rows),
               expected=expected_rows)
    identity_expected = not args.tuner_checkpoint and all(s.kind is TunerKind.P_ADAPTER for s in cfg.specs)
    if identity_expected:
        report.add("stats/zero-init-identity", "max_abs_diff", diff, rc.tolerances.get("identity", 1e-12))
    elif args.tuner_checkpoint:
        report.add("stats/tuned-differs", "max_abs_diff", diff, 1e-6, passed=diff > 1e-6)
    else:
        report.add("stats/vs-frozen", "max_abs_diff", diff, float("inf"), note="non-adapter tuners at init")
    report.extra = {"rows": len(rows), "max_abs_diff_vs_frozen": diff, "stats_csv": str(out / "stats.csv"),
                    "frozen_stats_csv": str(out / "stats_frozen.csv")}
    log(f"{len(rows)} rows; max |stat - frozen stat| = {diff:.3e}")
    return report


HANDLERS = {"verify-equivalence": cmd_verify_equivalence, "grad-check": cmd_grad_check,
            "count-params": cmd_count_params, "pretrain": cmd_pretrain, "train": cmd_train,
            "run-grid": cmd_run_grid, "export-stats": cmd_export_stats}

# Everything a user can cause with flags or files; ValueError covers bad dataclass
# fields such as a negative --noise or a warmup longer than the run.
CONFIG_ERRORS = (RunConfigError, ConfigError, CheckpointError, FileNotFoundError, json.JSONDecodeError, ValueError)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = Path(args.out or "runs")
    report_path = out / f"{args.command}.json"
    start = time.perf_counter()

    def log(msg: str) -> None:
        print(msg, flush=True)

    try:
        rc = resolve_run_config(args)
        out = Path(rc.out)
        report_path = out / f"{args.command}.json"
        out.mkdir(parents=True, exist_ok=True)
        with tn.precision(rc.precision):
            report = HANDLERS[args.command](rc, args, out, log)
    except CONFIG_ERRORS as exc:
        report = Report(args.command, {"argv": list(argv if argv is not None else sys.argv[1:])})
        report.error = f"config error: {exc}"
        report.wall_time = time.perf_counter() - start
        _write_report(report, report_path, out)
        print(f"utune {args.command}: {report.error}", file=sys.stderr)
        return EXIT_CONFIG
    report.args.setdefault("seed", rc.seed)
    report.args["precision"] = rc.precision
    if not report.wall_time:
        report.wall_time = time.perf_counter() - start
    _write_report(report, report_path, out)
    s = report.summary()
    log(f"{args.command}: {s['passed']}/{s['total']} checks passed in {report.wall_time:.2f}s -> {report_path}")
    return EXIT_OK if report.passed else EXIT_FAIL


def _write_report(report: Report, path: Path, out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        report.write(path)
    except OSError as exc:
        print(f"could not write report {path}: {exc}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
