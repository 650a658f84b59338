"""Weighted cross-entropy, Adam, early stopping and the epoch loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import ClassLabel, DatasetManifest, compute_class_weights, make_batches, task_samples
from .functional import log_softmax_np
from .models import ConfigurationError, Hybrid, Model
from .tensor import DTYPES, Context, Function, Tensor, UsageError, make_rng, no_grad

log = logging.getLogger(__name__)

EPOCHS = {"cnn": 30, "vit": 20, "hybrid": 30, "resnet50": 30}
LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "val_acc", "seconds")


class NonFiniteLossError(ArithmeticError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.value = value


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    epochs: int = 30
    early_stop_patience: int = 5
    seed: int = 0
    # label name -> weight; None means balanced weights from the train split
    class_weights: dict[str, float] | None = None
    numeric_mode: str = "f32"
    augment: bool = False

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1 or self.early_stop_patience < 1:
            raise ValueError("epochs, batch_size and early_stop_patience must be >= 1")
        if self.numeric_mode not in DTYPES:
            raise ValueError(f"numeric_mode must be one of {sorted(DTYPES)}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def train_preset(arch: str, scale: str = "paper", **overrides) -> TrainConfig:
    """Optimizer settings per architecture.

    The tiny scale trains on a few hundred synthetic images, so it uses a
    larger step and a longer patience than the full recipe.
    """
    if arch not in EPOCHS:
        raise ConfigurationError(f"unknown architecture {arch!r}")
    if scale == "paper":
        base = dict(epochs=EPOCHS[arch])
    elif scale == "tiny":
        base = dict(learning_rate=1e-3, epochs=40, early_stop_patience=8)
    else:
        raise ConfigurationError(f"unknown scale {scale!r}")
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

class WeightedCrossEntropy(Function):
    @staticmethod
    def forward(ctx: Context, logits, *, labels, weights):
        logp = log_softmax_np(logits, axis=1)
        w = weights[labels]
        total = w.sum()
        ctx.save(logp=logp, labels=labels, w=w, total=total)
        picked = logp[np.arange(len(labels)), labels]
        return np.asarray(-(w * picked).sum() / total, dtype=logits.dtype)

    @staticmethod
    def backward(ctx: Context, g):
        probs = np.exp(ctx.logp)
        probs[np.arange(len(ctx.labels)), ctx.labels] -= 1
        return (g * probs * (ctx.w / ctx.total)[:, None],)


def weighted_cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Weighted mean of per-sample cross-entropy, ``sum w_y * nll / sum w_y``.

    ``weights`` is a per-class sequence, a mapping of class index to weight,
    or None for unit weights.
    """
    if logits.ndim != 2:
        raise UsageError(f"logits must be (batch, classes), got {logits.shape}")
    b, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (b,):
        raise UsageError(f"expected {b} labels, got {labels.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise UsageError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    if weights is None:
        w = np.ones(k)
    elif isinstance(weights, Mapping):
        w = np.array([weights[i] for i in range(k)], dtype=np.float64)
    else:
        w = np.asarray(weights, dtype=np.float64)
    if w.shape != (k,) or np.any(w <= 0):
        raise UsageError(f"need {k} positive class weights, got {w}")
    return WeightedCrossEntropy.apply(logits, labels=labels, weights=w.astype(logits.dtype))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


# elements updated per slice; bounds Adam's temporaries for very large layers
ADAM_CHUNK = 1 << 22


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray | None], state: AdamState,
              cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    for name in params:
        if grads.get(name) is None:
            raise UsageError(f"parameter {name!r} has no gradient")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, theta in params.items():
        if not theta.flags.c_contiguous:
            raise UsageError(f"parameter {name!r} must be a contiguous array to be updated in place")
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        flat = [a.reshape(-1) for a in (theta, np.asarray(grads[name], dtype=theta.dtype), state.m[name], state.v[name])]
        for s in range(0, flat[0].size, ADAM_CHUNK):
            th, g, m, v = (a[s:s + ADAM_CHUNK] for a in flat)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            denom = np.sqrt(v / c2)
            denom += cfg.epsilon
            th -= cfg.learning_rate * (m / c1) / denom


class Adam:
    def __init__(self, named_params: Sequence[tuple[str, Tensor]], cfg: TrainConfig):
        self.params = list(named_params)
        self.cfg = cfg
        self.state = AdamState()

    def step(self) -> None:
        adam_step({n: p.data for n, p in self.params}, {n: p.grad for n, p in self.params}, self.state, self.cfg)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------

class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience

    @property
    def improved(self) -> bool:
        return self.stale == 0


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    seconds: float = field(default=0.0, compare=False)


def epoch_log(records: Sequence[EpochRecord], path, wall_clock: bool = False) -> None:
    """Append rows to a CSV log, writing the header if the file is new or empty.

    The seconds column stays blank unless ``wall_clock`` is set, so logs of
    identical runs are byte-identical.
    """
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(LOG_COLUMNS)
        for r in records:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_acc),
                             f"{r.seconds:.3f}" if wall_clock else ""])


def read_epoch_log(path) -> list[EpochRecord]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [
            EpochRecord(int(row["epoch"]), float(row["train_loss"]), float(row["val_loss"]), float(row["val_acc"]),
                        float(row["seconds"] or 0.0))
            for row in csv.DictReader(fh)
        ]


def class_weight_vector(manifest: DatasetManifest, classes: Sequence[ClassLabel], cfg: TrainConfig) -> np.ndarray:
    if cfg.class_weights is not None:
        try:
            return np.array([float(cfg.class_weights[c.name]) for c in classes])
        except KeyError as exc:
            raise UsageError(f"class_weights is missing an entry for {exc.args[0]}") from None
    weights = compute_class_weights(manifest, classes)
    return np.array([weights[c] for c in classes])


class _ArraySource:
    """Batches over precomputed inputs (used for the fusion head's cached features)."""

    def __init__(self, x: np.ndarray, y: np.ndarray):
        self.x, self.y = x, y

    def batches(self, batch_size: int, seed=None):
        order = np.arange(len(self.y)) if seed is None else make_rng([*seed, 17]).permutation(len(self.y))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            yield Tensor(self.x[idx]), self.y[idx]


class _ImageSource:
    def __init__(self, manifest, split, side, classes, dtype, augment):
        self.args = (manifest, split)
        self.side, self.classes, self.dtype, self.augment = side, classes, dtype, augment

    def batches(self, batch_size: int, seed=None):
        manifest, split = self.args
        for b in make_batches(manifest, split, batch_size, shuffle=seed is not None, seed=seed if seed else 0,
                              augment=self.augment and seed is not None, side=self.side, classes=self.classes,
                              dtype=self.dtype):
            yield b.pixels, b.labels


class _FusedSource:
    """Fusion-model inputs computed batch by batch from images."""

    def __init__(self, model: Hybrid, images: _ImageSource):
        self.model, self.images = model, images

    def batches(self, batch_size: int, seed=None):
        for x, y in self.images.batches(batch_size, seed):
            yield self.model.fused_features(x), y


# fused feature rows are cached in memory up to this size, else recomputed every epoch
FEATURE_CACHE_BYTES = 512 * 2**20


def _hybrid_source(model: Hybrid, manifest, split, classes, dtype, batch_size, budget: int):
    images = _ImageSource(manifest, split, model.spec.input_side, classes, dtype, False)
    n = len(task_samples(manifest, split, classes))
    if n * model.fused_width * np.dtype(dtype).itemsize > budget:
        return _FusedSource(model, images), 0
    feats, labels = [], []
    for x, y in images.batches(batch_size):
        feats.append(model.fused_features(x).data)
        labels.append(y)
    cache = _ArraySource(np.concatenate(feats), np.concatenate(labels))
    return cache, cache.x.nbytes


def evaluate_loss(model: Model, source, weights: np.ndarray, batch_size: int, head_only: bool = False):
    """Eval-mode weighted loss and accuracy over one source."""
    was_training = model.training
    model.eval()
    num = den = 0.0
    correct = count = 0
    with no_grad():
        for x, y in source.batches(batch_size):
            logits = model.classify(x) if head_only else model(x)
            w = weights[y]
            nll = -log_softmax_np(logits.data.astype(np.float64), axis=1)[np.arange(len(y)), y]
            num += float((w * nll).sum())
            den += float(w.sum())
            correct += int((np.argmax(logits.data, axis=1) == y).sum())
            count += len(y)
    model.train(was_training)
    return num / den, correct / count


def train(
    model: Model,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    classes: Sequence[ClassLabel] | None = None,
    log_path=None,
    wall_clock: bool = False,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[Model, list[EpochRecord]]:
    """Train ``model`` in place and return it restored to its best-validation-loss snapshot.

    A fusion model only updates its MLP head; its branch features are computed
    once up front since the frozen branches run in eval mode.
    """
    classes = tuple(ClassLabel(c) for c in (classes if classes is not None else ClassLabel))
    if model.spec.num_classes != len(classes):
        raise ConfigurationError(f"model has {model.spec.num_classes} outputs but {len(classes)} classes were given")
    for split in ("train", "val"):
        if not task_samples(manifest, split, classes):
            raise UsageError(f"the {split} split has no samples of the task classes")
    dtype = DTYPES[cfg.numeric_mode]
    if model.parameters()[0].dtype != dtype:
        model.to_dtype(dtype)
    weights = class_weight_vector(manifest, classes, cfg).astype(dtype)
    model.set_dropout_rng(make_rng([cfg.seed, 99]))

    head_only = isinstance(model, Hybrid)
    if head_only:
        # the frozen branches run in eval mode, so their features can be computed once
        model.eval()
        train_src, used = _hybrid_source(model, manifest, "train", classes, dtype, cfg.batch_size,
                                         FEATURE_CACHE_BYTES)
        val_src, _ = _hybrid_source(model, manifest, "val", classes, dtype, cfg.batch_size,
                                    FEATURE_CACHE_BYTES - used)
        named = model.trainable_parameters()
    else:
        side = model.spec.input_side
        train_src = _ImageSource(manifest, "train", side, classes, dtype, cfg.augment)
        val_src = _ImageSource(manifest, "val", side, classes, dtype, False)
        named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    opt = Adam(named, cfg)
    stopper = EarlyStopping(cfg.early_stop_patience)
    # the frozen branches never change, so a fusion model only snapshots its head
    tracked = {n for n, _ in named} if head_only else set(model.state_dict())
    best_state = {k: v.copy() for k, v in model.state_dict().items() if k in tracked}
    records: list[EpochRecord] = []

    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        model.train()
        total = 0.0
        seen = 0.0
        for bi, (x, y) in enumerate(train_src.batches(cfg.batch_size, seed=[cfg.seed, epoch])):
            logits = model.classify(x) if head_only else model(x)
            loss = weighted_cross_entropy(logits, y, weights)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(epoch, bi, value)
            opt.zero_grad()
            loss.backward()
            opt.step()
            batch_weight = float(weights[y].sum())
            total += value * batch_weight
            seen += batch_weight
        val_loss, val_acc = evaluate_loss(model, val_src, weights, cfg.batch_size, head_only)
        record = EpochRecord(epoch, total / seen, val_loss, val_acc, time.perf_counter() - start)
        records.append(record)
        if log_path is not None:
            epoch_log([record], log_path, wall_clock=wall_clock)
        if on_epoch is not None:
            on_epoch(record)
        stop = stopper.update(epoch, val_loss)
        if stopper.improved:
            current = model.state_dict()
            for k, buf in best_state.items():
                np.copyto(buf, current[k])
        if stop:
            log.info("early stop after epoch %d; best epoch %d", epoch, stopper.best_epoch)
            break

    model.load_state_dict(best_state, strict=not head_only)
    model.zero_grad()
    model.eval()
    return model, records


def accuracy(model: Model, manifest: DatasetManifest, split: str, classes: Sequence[ClassLabel] | None = None,
             batch_size: int = 32) -> float:
    classes = tuple(ClassLabel(c) for c in (classes if classes is not None else ClassLabel))
    dtype = model.parameters()[0].dtype
    src = _ImageSource(manifest, split, model.spec.input_side, classes, dtype, False)
    return evaluate_loss(model, src, np.ones(len(classes)), batch_size)[1]
