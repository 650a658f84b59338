"""Command-line entry point: ``oshx {synth,train,eval,predict,gradcheck,report,pipeline}``.

Exit codes: 0 success, 1 computational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import ctypes
import dataclasses
import gc
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt
from .data import (
    DEFAULT_FRACTIONS, IMAGENET_STATS, ClassLabel, DatasetError, DatasetManifest, NormStats, Sample,
    apply_normalization, compute_normalization, decode_and_resize, load_manifest, save_manifest,
    split_stratified, synth_generate,
)
from .functional import log_softmax_np
from .gradcheck import TOLERANCE, run_gradcheck
from .metrics import MetricsReport, TaskSpec, emit_chart, emit_table, evaluate, get_task
from .models import ARCHS, ConfigurationError, Model, build_model, forward, preset
from .tensor import Tensor, UsageError
from .training import EPOCHS, NonFiniteLossError, TrainConfig, train, train_preset

log = logging.getLogger("oshx")

WORKERS_ENV = "OSHX_WORKERS"
TASK_CHOICES = ("binary", "three", "four")
USAGE_ERRORS = (UsageError, ConfigurationError, ckpt.SpecMismatchError)


class CLIUsageError(UsageError):
    pass


@dataclass
class RunConfig:
    """Every knob of a training run.  ``None`` means "take the preset's value"."""

    arch: str = "cnn"
    task: str = "four"
    preset: str = "paper"
    seed: int = 0
    data: str | None = None
    out: str | None = None
    init_from: list[str] = field(default_factory=list)
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    # "train" (statistics of the train split), "imagenet", or {"mean": [...], "std": [...]}
    normalization: Any = "train"
    learning_rate: float | None = None
    beta1: float | None = None
    beta2: float | None = None
    epsilon: float | None = None
    batch_size: int | None = None
    epochs: int | None = None
    early_stop_patience: int | None = None
    class_weights: dict[str, float] | None = None
    numeric_mode: str | None = None
    augment: bool | None = None
    dropout_rate: float | None = None
    hybrid_activation: str | None = None
    log_wall_clock: bool = False
    workers: int | None = None

    @classmethod
    def resolve(cls, file_values: dict[str, Any], flag_values: dict[str, Any]) -> RunConfig:
        """defaults <- config file <- flags (flags left unset do not override)."""
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(file_values) - names)
        if unknown:
            raise CLIUsageError(f"unknown config keys: {', '.join(unknown)}")
        merged = dict(file_values)
        merged.update({k: v for k, v in flag_values.items() if k in names and v not in (None, [])})
        if "fractions" in merged:
            merged["fractions"] = tuple(float(x) for x in merged["fractions"])
        rc = cls(**merged)
        rc.validate()
        return rc

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise CLIUsageError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.preset not in ("paper", "tiny"):
            raise CLIUsageError(f"unknown preset {self.preset!r}")
        get_task(self.task)

    @property
    def task_spec(self) -> TaskSpec:
        return get_task(self.task)

    def arch_spec(self, arch: str | None = None):
        overrides = {k: v for k, v in (("dropout_rate", self.dropout_rate),
                                       ("hybrid_activation", self.hybrid_activation)) if v is not None}
        return preset(arch or self.arch, self.preset, num_classes=self.task_spec.num_classes, **overrides)

    def train_config(self, arch: str | None = None, branch: bool = False) -> TrainConfig:
        arch = arch or self.arch
        overrides = {f.name: getattr(self, f.name) for f in dataclasses.fields(TrainConfig)
                     if f.name != "seed" and getattr(self, f.name, None) is not None}
        if branch and self.preset == "paper" and "epochs" not in overrides:
            # fusion branches follow the fusion recipe's epoch count
            overrides["epochs"] = EPOCHS["hybrid"]
        return train_preset(arch, self.preset, seed=self.seed, **overrides)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["fractions"] = list(self.fractions)
        return d


def _workers(value: int | None) -> int | None:
    if value is not None:
        return value
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise CLIUsageError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    return None


# ---------------------------------------------------------------------------
# shared steps
# ---------------------------------------------------------------------------

def _norm_stats(rc: RunConfig, manifest: DatasetManifest, side: int) -> NormStats:
    if rc.normalization == "train":
        return compute_normalization(manifest, side)
    if rc.normalization == "imagenet":
        return NormStats(*IMAGENET_STATS)
    if isinstance(rc.normalization, dict):
        return NormStats(tuple(rc.normalization["mean"]), tuple(rc.normalization["std"]))
    raise CLIUsageError(f"normalization must be 'train', 'imagenet' or a mean/std mapping, got {rc.normalization!r}")


def prepare_data(data_dir, task: TaskSpec, seed: int, fractions) -> DatasetManifest:
    """Load, split and restrict a dataset tree to a task's classes."""
    if data_dir is None:
        raise CLIUsageError("--data is required")
    if not Path(data_dir).is_dir():
        raise CLIUsageError(f"data directory {data_dir} does not exist")
    manifest = split_stratified(load_manifest(data_dir, seed), fractions, seed)
    wanted = set(task.classes)
    return manifest.replace(samples=tuple(s for s in manifest.samples if s.label in wanted))


def _meta(rc: RunConfig, stats: NormStats, cfg: TrainConfig) -> dict[str, Any]:
    task = rc.task_spec
    return {
        "task": task.name,
        "class_names": task.class_names,
        "normalization": {"mean": list(stats.mean), "std": list(stats.std)},
        "split": {"seed": rc.seed, "fractions": list(rc.fractions)},
        "train": cfg.to_dict(),
    }


def _print_record(tag: str):
    def show(r):
        secs = f" ({r.seconds:.1f}s)"
        print(f"[{tag}] epoch {r.epoch:3d}  train_loss {r.train_loss:.4f}  val_loss {r.val_loss:.4f}  "
              f"val_acc {r.val_acc:.4f}{secs}", file=sys.stderr, flush=True)
    return show


def train_one(rc: RunConfig, manifest: DatasetManifest, out: Path, arch: str | None = None,
              branch: bool = False, branch_ckpts: Sequence[str] = ()) -> tuple[Model, MetricsReport]:
    """Train one architecture into ``out``; fusion models get their branches first."""
    arch = arch or rc.arch
    out.mkdir(parents=True, exist_ok=True)
    spec = rc.arch_spec(arch)
    if branch:
        spec = rc.arch_spec("hybrid").branch(arch)
    cfg = rc.train_config(arch, branch)
    stats = _norm_stats(rc, manifest, spec.input_side)
    manifest = manifest.replace(normalization_stats=stats)
    model = build_model(spec, rc.seed)

    if arch == "hybrid":
        given = {ckpt.read_spec(p).name: p for p in branch_ckpts}
        extra = set(given) - {"cnn", "vit"}
        if extra:
            raise CLIUsageError(f"--init-from for a hybrid takes cnn/vit checkpoints, got {sorted(extra)}")
        paths = []
        for name in ("cnn", "vit"):
            if name not in given:
                print(f"training the {name} branch first", file=sys.stderr)
                train_one(rc, manifest, out / "branches" / name, arch=name, branch=True)
                given[name] = str(out / "branches" / name / "best.oshx")
            paths.append(given[name])
        ckpt.init_from(model, paths)
        release_memory()
    elif branch_ckpts:
        skipped = ckpt.init_from(model, list(branch_ckpts))
        if skipped:
            log.warning("init-from skipped %d tensors with no matching slot: %s", len(skipped), skipped)

    log_path = out / "epochs.csv"
    if log_path.exists():
        log_path.unlink()
    model, _ = train(model, manifest, cfg, classes=rc.task_spec.classes, log_path=log_path,
                     wall_clock=rc.log_wall_clock, on_epoch=_print_record(f"{arch}"))
    model.meta = _meta(rc, stats, cfg)
    ckpt.save_checkpoint(model, out / "best.oshx")
    report = evaluate(model, manifest, rc.task_spec, split="val", batch_size=cfg.batch_size)
    (out / "val_report.json").write_text(report.to_json(), encoding="utf-8")
    return model, report


def release_memory() -> None:
    """Hand freed heap pages back to the OS between large stages (glibc only)."""
    gc.collect()
    try:
        ctypes.CDLL("libc.so.6").malloc_trim(0)
    except (OSError, AttributeError):
        pass


def _write_config(rc: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"run": rc.to_dict(), "arch": rc.arch_spec().to_dict(), "train": rc.train_config().to_dict()}
    (out / "config.json").write_text(json.dumps(resolved, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _load_config_file(path) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        values = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CLIUsageError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise CLIUsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(values, dict):
        raise CLIUsageError("config file must hold a JSON object")
    return values


def _run_config(args) -> RunConfig:
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "handler")}
    try:
        rc = RunConfig.resolve(_load_config_file(args.config), flags)
        rc.arch_spec()
        rc.train_config()
    except (TypeError, ValueError) as exc:
        raise CLIUsageError(f"invalid run configuration: {exc}") from None
    return rc


def _checkpoint_manifest(model: Model, data_dir) -> tuple[DatasetManifest, TaskSpec]:
    meta = getattr(model, "meta", {})
    task = get_task(meta.get("task", "four_class"))
    split = meta.get("split", {})
    manifest = prepare_data(data_dir, task, split.get("seed", 0), split.get("fractions", DEFAULT_FRACTIONS))
    norm = meta.get("normalization")
    if norm is not None:
        manifest = manifest.replace(normalization_stats=NormStats(tuple(norm["mean"]), tuple(norm["std"])))
    return manifest, task


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    paths = synth_generate(args.out, args.per_class, args.side, args.seed, args.format)
    print(f"wrote {len(paths)} images to {args.out}")
    return 0


def cmd_train(args) -> int:
    rc = _run_config(args)
    if rc.out is None:
        raise CLIUsageError("--out is required")
    out = Path(rc.out)
    _write_config(rc, out)
    manifest = prepare_data(rc.data, rc.task_spec, rc.seed, rc.fractions)
    save_manifest(manifest, out / "manifest.json")
    _, report = train_one(rc, manifest, out, branch_ckpts=rc.init_from)
    print(emit_table([report], "markdown"), end="")
    return 0


def cmd_eval(args) -> int:
    expect = get_task(args.task).num_classes if args.task else None
    model = ckpt.load_checkpoint(args.checkpoint, expect_num_classes=expect)
    manifest, task = _checkpoint_manifest(model, args.data)
    report = evaluate(model, manifest, task, split=args.split)
    print(emit_table([report], args.format), end="")
    if args.chart:
        emit_chart([report], args.chart, title=f"{task.title} ({args.split})")
    if args.report:
        Path(args.report).write_text(report.to_json(), encoding="utf-8")
    return 0


def predict_image(model: Model, image_path) -> list[tuple[str, float]]:
    meta = getattr(model, "meta", {})
    names = meta.get("class_names") or [c.name for c in ClassLabel][: model.spec.num_classes]
    pixels = decode_and_resize(Sample(id=str(image_path), label=ClassLabel.NT, path=str(image_path)),
                               model.spec.input_side)
    norm = meta.get("normalization")
    if norm is not None:
        pixels = apply_normalization(pixels, NormStats(tuple(norm["mean"]), tuple(norm["std"])))
    logits = forward(model, Tensor(pixels[None]), training=False).data[0].astype(np.float64)
    probs = np.exp(log_softmax_np(logits))
    order = sorted(range(len(names)), key=lambda i: (-probs[i], i))
    return [(names[i], float(probs[i])) for i in order]


def cmd_predict(args) -> int:
    model = ckpt.load_checkpoint(args.checkpoint)
    for name, p in predict_image(model, args.image):
        print(f"{name}\t{p:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.seed, seeds_per_op=args.seeds_per_op)
    for r in results:
        print(f"{r.op:24s} max_rel_err {r.max_error:.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.op for r in results if not r.passed]
    if failed:
        print(f"gradient check failed (tolerance {TOLERANCE:g}): {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len(results)} ops within {TOLERANCE:g}")
    return 0


def cmd_report(args) -> int:
    reports = [MetricsReport.from_json(Path(p).read_text(encoding="utf-8")) for p in args.reports]
    print(emit_table(reports, args.format), end="")
    if args.chart:
        emit_chart(reports, args.chart, title=get_task(reports[0].task).title if reports else "")
    return 0


def cmd_pipeline(args) -> int:
    """Train every architecture on one task and emit the test-split comparison table and chart."""
    args.arch = "cnn"
    rc = _run_config(args)
    if rc.out is None:
        raise CLIUsageError("--out is required")
    out = Path(rc.out)
    _write_config(rc, out)
    manifest = prepare_data(rc.data, rc.task_spec, rc.seed, rc.fractions)
    save_manifest(manifest, out / "manifest.json")
    reports = []
    # rows come out in the published table order; the fusion model needs cnn and vit done first
    for arch in ("cnn", "vit", "hybrid", "resnet50"):
        run = dataclasses.replace(rc, arch=arch, init_from=[])
        # the fusion model imports the standalone CNN and ViT trained just before it
        branches = [str(out / "cnn" / "best.oshx"), str(out / "vit" / "best.oshx")] if arch == "hybrid" else ()
        model, _ = train_one(run, manifest, out / arch, arch=arch, branch_ckpts=branches)
        report = evaluate(model, manifest.replace(normalization_stats=_stats_of(model)), rc.task_spec, "test")
        (out / arch / "test_report.json").write_text(report.to_json(), encoding="utf-8")
        reports.append(report)
        del model
        release_memory()
    for fmt, name in (("markdown", "table.md"), ("csv", "table.csv")):
        (out / name).write_text(emit_table(reports, fmt), encoding="utf-8")
    emit_chart(reports, out / "chart.svg", title=rc.task_spec.title)
    print(emit_table(reports, "markdown"), end="")
    return 0


def _stats_of(model: Model) -> NormStats:
    norm = model.meta["normalization"]
    return NormStats(tuple(norm["mean"]), tuple(norm["std"]))


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser, with_arch: bool = True) -> None:
    if with_arch:
        p.add_argument("--arch", choices=ARCHS, default=None)
    p.add_argument("--data", default=None, help="dataset root with NT/NVT/VT/NVR subdirectories")
    p.add_argument("--task", choices=TASK_CHOICES, default=None)
    p.add_argument("--preset", choices=("paper", "tiny"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="run directory")
    p.add_argument("--config", default=None, help="JSON file of run settings (flags override it)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--patience", dest="early_stop_patience", type=int, default=None)
    p.add_argument("--numeric-mode", choices=("f32", "f64"), default=None)
    p.add_argument("--augment", action="store_true", default=None)
    p.add_argument("--dropout", dest="dropout_rate", type=float, default=None)
    p.add_argument("--hybrid-activation", choices=("relu", "leaky_relu"), default=None)
    p.add_argument("--normalization", choices=("train", "imagenet"), default=None)
    p.add_argument("--log-wall-clock", action="store_true", default=None,
                   help="record per-epoch seconds in epochs.csv (makes logs run-dependent)")
    p.add_argument("--workers", type=int, default=None, help=f"BLAS threads (default: ${WORKERS_ENV})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oshx", description="Osteosarcoma histopathology classifiers.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset tree")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=64)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("png", "jpg", "raw"), default="png")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="train one architecture")
    _add_run_flags(p)
    p.add_argument("--init-from", action="append", default=[], help="checkpoint to import (repeatable)")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--format", choices=("csv", "markdown"), default="markdown")
    p.add_argument("--task", choices=TASK_CHOICES, default=None, help="fail unless the checkpoint fits this task")
    p.add_argument("--chart", default=None, help="write an SVG bar chart here")
    p.add_argument("--report", default=None, help="write the metrics report JSON here")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("predict", help="classify one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds-per-op", type=int, default=10)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("report", help="combine metrics report JSON files into one table")
    p.add_argument("reports", nargs="*")
    p.add_argument("--format", choices=("csv", "markdown"), default="markdown")
    p.add_argument("--chart", default=None)
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("pipeline", help="train and test all four architectures on one task")
    _add_run_flags(p, with_arch=False)
    p.set_defaults(handler=cmd_pipeline)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = args.handler
    del args.verbose
    workers = None
    try:
        workers = _workers(getattr(args, "workers", None))
        if workers is not None:
            with threadpool_limits(limits=workers):
                return handler(args)
        return handler(args)
    except USAGE_ERRORS as exc:
        print(f"oshx: error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLossError as exc:
        print(f"oshx: training diverged: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, ckpt.CheckpointError, OSError, ValueError, ArithmeticError) as exc:
        print(f"oshx: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
