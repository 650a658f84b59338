"""Dataset manifests, image decoding, stratified splits, class weights and batching.

Directory layout understood by :func:`load_manifest`::

    <root>/NT/*.{jpg,jpeg,png,raw}
    <root>/NVT/...
    <root>/VT/...
    <root>/NVR/...

``.raw`` files use a minimal codec-free container: the magic ``OSIM``,
little-endian u32 width, u32 height, u8 channels, then row-major 8-bit
pixels.
"""

from __future__ import annotations

import base64
import colorsys
import dataclasses
import enum
import io
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .tensor import Tensor, UsageError, make_rng

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.60, 0.15, 0.25)
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".raw")
RAW_MAGIC = b"OSIM"
MANIFEST_SCHEMA = "oshx-manifest/1"
# ImageNet channel statistics, for checkpoints imported from ImageNet-trained weights
IMAGENET_STATS = ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225))


class ClassLabel(enum.IntEnum):
    NT = 0   # non-tumor
    NVT = 1  # non-viable tumor
    VT = 2   # viable tumor
    NVR = 3  # non-viable ratio


CLASS_NAMES = tuple(c.name for c in ClassLabel)


class DatasetError(RuntimeError):
    pass


class NoSamplesError(DatasetError):
    pass


class DecodeError(DatasetError):
    def __init__(self, path, reason: str):
        super().__init__(f"cannot decode {path}: {reason}")
        self.path = path


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]


@dataclass(frozen=True)
class Sample:
    id: str
    label: ClassLabel
    path: str | None = None
    pixels: np.ndarray | None = field(default=None, compare=False, repr=False)
    split: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    samples: tuple[Sample, ...]
    seed: int = 0
    normalization_stats: NormStats | None = None
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def class_counts(self) -> dict[ClassLabel, int]:
        counts = {c: 0 for c in ClassLabel}
        for s in self.samples:
            counts[s.label] += 1
        return counts

    def split(self, name: str) -> list[Sample]:
        if name == "all":
            return list(self.samples)
        if name not in SPLITS:
            raise UsageError(f"unknown split {name!r}; expected one of {SPLITS + ('all',)}")
        return [s for s in self.samples if s.split == name]

    def split_counts(self, name: str) -> dict[ClassLabel, int]:
        counts = {c: 0 for c in ClassLabel}
        for s in self.split(name):
            counts[s.label] += 1
        return counts

    def replace(self, **changes) -> DatasetManifest:
        changes.setdefault("cache", self.cache)
        return dataclasses.replace(self, **changes)

    def pixels(self, sample: Sample, side: int) -> np.ndarray:
        """Decoded [0, 1] pixels; the 8-bit resized image is memoized per (sample, side)."""
        key = (sample.id, side)
        arr = self.cache.get(key)
        if arr is None:
            arr = decode_resized(sample, side)
            self.cache[key] = arr
        return _to_unit(arr)


# ---------------------------------------------------------------------------
# raw container and decoding
# ---------------------------------------------------------------------------

def encode_raw(pixels: np.ndarray) -> bytes:
    """Pack an (H, W, C) uint8 array into the OSIM container."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3:
        raise ValueError(f"raw container holds (H, W, C) uint8 pixels, got {pixels.dtype} {pixels.shape}")
    h, w, c = pixels.shape
    return RAW_MAGIC + struct.pack("<IIB", w, h, c) + np.ascontiguousarray(pixels).tobytes()


def decode_raw(blob: bytes, path=None) -> np.ndarray:
    if blob[:4] != RAW_MAGIC:
        raise DecodeError(path, "bad OSIM magic")
    if len(blob) < 13:
        raise DecodeError(path, "truncated OSIM header")
    w, h, c = struct.unpack("<IIB", blob[4:13])
    body = blob[13:]
    if len(body) != w * h * c:
        raise DecodeError(path, f"OSIM payload is {len(body)} bytes, header says {w * h * c}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c)


def _read_rgb(sample: Sample) -> np.ndarray:
    if sample.pixels is not None:
        arr = np.asarray(sample.pixels)
    elif sample.path is None:
        raise DecodeError(sample.id, "sample has neither a path nor pixels")
    elif sample.path.lower().endswith(".raw"):
        arr = decode_raw(Path(sample.path).read_bytes(), sample.path)
    else:
        try:
            with Image.open(sample.path) as im:
                arr = np.asarray(im.convert("RGB"))
        except (OSError, ValueError) as exc:
            raise DecodeError(sample.path, str(exc)) from exc
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    elif arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return arr.astype(np.uint8, copy=False)


def decode_resized(sample: Sample, side: int) -> np.ndarray:
    """Decode to RGB and bilinear-resize; returns (3, side, side) uint8."""
    if side < 8:
        raise ValueError(f"side must be >= 8, got {side}")
    rgb = _read_rgb(sample)
    if rgb.shape[:2] != (side, side):
        rgb = np.asarray(Image.fromarray(rgb).resize((side, side), Image.BILINEAR))
    return np.ascontiguousarray(rgb.transpose(2, 0, 1))


def _to_unit(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32) / np.float32(255.0)


def decode_and_resize(sample: Sample, side: int) -> np.ndarray:
    """Decode to RGB, bilinear-resize to ``side`` x ``side``, scale to [0, 1]; returns (3, side, side) float32."""
    return _to_unit(decode_resized(sample, side))


def _probe(path: Path) -> bool:
    try:
        if path.suffix.lower() == ".raw":
            decode_raw(path.read_bytes(), path)
        else:
            with Image.open(path) as im:
                im.verify()
        return True
    except (OSError, ValueError, SyntaxError, DecodeError) as exc:
        log.warning("skipping undecodable image %s: %s", path, exc)
        return False


def load_manifest(root_dir, seed: int = 0) -> DatasetManifest:
    """Enumerate ``root_dir/<class>/*`` images in lexicographic path order."""
    root = Path(root_dir)
    paths: list[tuple[Path, ClassLabel]] = []
    for label in ClassLabel:
        class_dir = root / label.name
        if not class_dir.is_dir():
            log.warning("class directory %s is missing; class %s will be empty", class_dir, label.name)
            continue
        for p in class_dir.iterdir():
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
                paths.append((p, label))
    paths.sort(key=lambda item: str(item[0]))
    samples = []
    for p, label in paths:
        if _probe(p):
            samples.append(Sample(id=p.relative_to(root).as_posix(), label=label, path=str(p)))
    if not samples:
        raise NoSamplesError(f"no samples found under {root}")
    return DatasetManifest(samples=tuple(samples), seed=seed)


def manifest_from_arrays(images: Sequence[np.ndarray], labels: Sequence[int], seed: int = 0) -> DatasetManifest:
    """Manifest over in-memory (H, W, 3) uint8 pixel blocks."""
    samples = tuple(
        Sample(id=f"mem/{i:05d}", label=ClassLabel(int(y)), pixels=np.asarray(img, dtype=np.uint8))
        for i, (img, y) in enumerate(zip(images, labels))
    )
    if not samples:
        raise NoSamplesError("no samples given")
    return DatasetManifest(samples=samples, seed=seed)


# ---------------------------------------------------------------------------
# splits, weights, normalization
# ---------------------------------------------------------------------------

def split_sizes(n: int, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> tuple[int, int, int]:
    """floor / floor / remainder rule for one class of ``n`` samples."""
    # round first so 0.15 * 60 = 8.999999999999998 still floors to 9
    n_train = math.floor(round(fractions[0] * n, 9))
    n_val = math.floor(round(fractions[1] * n, 9))
    return n_train, n_val, n - n_train - n_val


def split_stratified(
    manifest: DatasetManifest, fractions: Sequence[float] = DEFAULT_FRACTIONS, seed: int | None = None
) -> DatasetManifest:
    """Shuffle each class with ``seed`` and cut it into train/val/test by the floor rule."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    seed = manifest.seed if seed is None else seed
    assignment: dict[str, str] = {}
    for label in ClassLabel:
        members = [s for s in manifest.samples if s.label == label]
        if not members:
            continue
        if len(members) < 3:
            log.warning("class %s has only %d samples; all go to train", label.name, len(members))
            assignment.update((s.id, "train") for s in members)
            continue
        order = make_rng([seed, int(label)]).permutation(len(members))
        n_train, n_val, _ = split_sizes(len(members), fractions)
        for rank, idx in enumerate(order):
            split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
            assignment[members[idx].id] = split
    samples = tuple(dataclasses.replace(s, split=assignment[s.id]) for s in manifest.samples)
    return manifest.replace(samples=samples, seed=seed, fractions=fractions)


def compute_class_weights(manifest: DatasetManifest, task_classes: Sequence[ClassLabel]) -> dict[ClassLabel, float]:
    """Balanced inverse-frequency weights N / (K * n_c) over the train split of the task classes."""
    counts = manifest.split_counts("train")
    task_classes = [ClassLabel(c) for c in task_classes]
    for c in task_classes:
        if counts[c] == 0:
            raise DatasetError(f"class {c.name} has no training samples; cannot weight it")
    total = sum(counts[c] for c in task_classes)
    k = len(task_classes)
    return {c: total / (k * counts[c]) for c in task_classes}


def compute_normalization(manifest: DatasetManifest, side: int, split: str = "train") -> NormStats:
    """Per-channel mean and (population) standard deviation over one split."""
    samples = manifest.split(split)
    if not samples:
        raise DatasetError(f"split {split!r} is empty; cannot compute normalization")
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for s in samples:
        px = manifest.pixels(s, side).astype(np.float64)
        total += px.sum(axis=(1, 2))
        total_sq += (px * px).sum(axis=(1, 2))
        count += px.shape[1] * px.shape[2]
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    std = np.maximum(np.sqrt(var), 1e-6)
    return NormStats(tuple(float(v) for v in mean), tuple(float(v) for v in std))


def apply_normalization(pixels: np.ndarray, stats: NormStats) -> np.ndarray:
    """(x - mean) / std per channel; channels on axis -3."""
    mean = np.asarray(stats.mean, dtype=pixels.dtype).reshape(3, 1, 1)
    std = np.maximum(np.asarray(stats.std, dtype=pixels.dtype), 1e-6).reshape(3, 1, 1)
    return ((pixels - mean) / std).astype(pixels.dtype)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    pixels: Tensor
    labels: np.ndarray
    ids: list[str]


def task_samples(manifest: DatasetManifest, split: str, classes: Sequence[ClassLabel] | None) -> list[Sample]:
    samples = manifest.split(split)
    if classes is None:
        return samples
    wanted = {ClassLabel(c) for c in classes}
    return [s for s in samples if s.label in wanted]


def make_batches(
    manifest: DatasetManifest,
    split: str,
    batch_size: int,
    shuffle: bool = False,
    seed=0,
    augment: bool = False,
    side: int = 128,
    classes: Sequence[ClassLabel] | None = None,
    dtype=np.float32,
) -> Iterator[Batch]:
    """Yield normalized batches covering the split once.

    ``classes`` restricts to a task's labels and remaps them to positions in
    that list.  Flip augmentation only ever touches the train split.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    samples = task_samples(manifest, split, classes)
    index = {ClassLabel(c): i for i, c in enumerate(classes)} if classes is not None else None
    order = np.arange(len(samples))
    if shuffle:
        order = make_rng([*np.atleast_1d(seed).tolist(), 17]).permutation(len(samples))
    aug_rng = make_rng([*np.atleast_1d(seed).tolist(), 23]) if augment and split == "train" else None
    stats = manifest.normalization_stats
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        pixels = np.stack([manifest.pixels(s, side) for s in chunk]).astype(dtype)
        if aug_rng is not None:
            flips = aug_rng.random((len(chunk), 2)) < 0.5
            for i, (flip_h, flip_v) in enumerate(flips):
                if flip_h:
                    pixels[i] = pixels[i][:, :, ::-1]
                if flip_v:
                    pixels[i] = pixels[i][:, ::-1, :]
        if stats is not None:
            pixels = apply_normalization(pixels, stats)
        labels = np.array([s.label if index is None else index[s.label] for s in chunk], dtype=np.int64)
        yield Batch(Tensor(pixels, dtype=dtype), labels, [s.id for s in chunk])


# ---------------------------------------------------------------------------
# manifest serialization
# ---------------------------------------------------------------------------

def manifest_to_dict(manifest: DatasetManifest) -> dict:
    samples = []
    for s in manifest.samples:
        entry = {"id": s.id, "label": s.label.name, "split": s.split}
        if s.path is not None:
            entry["path"] = s.path
        if s.pixels is not None:
            entry["pixels_osim_b64"] = base64.b64encode(encode_raw(s.pixels)).decode("ascii")
        samples.append(entry)
    stats = manifest.normalization_stats
    return {
        "schema": MANIFEST_SCHEMA,
        "seed": manifest.seed,
        "fractions": list(manifest.fractions),
        "normalization": None if stats is None else {"mean": list(stats.mean), "std": list(stats.std)},
        "samples": samples,
    }


def manifest_from_dict(d: dict) -> DatasetManifest:
    if d.get("schema") != MANIFEST_SCHEMA:
        raise DatasetError(f"unsupported manifest schema {d.get('schema')!r}")
    samples = []
    for e in d["samples"]:
        pixels = None
        if "pixels_osim_b64" in e:
            pixels = decode_raw(base64.b64decode(e["pixels_osim_b64"]), e["id"])
        samples.append(Sample(id=e["id"], label=ClassLabel[e["label"]], path=e.get("path"), pixels=pixels, split=e["split"]))
    norm = d.get("normalization")
    stats = None if norm is None else NormStats(tuple(norm["mean"]), tuple(norm["std"]))
    return DatasetManifest(
        samples=tuple(samples), seed=d["seed"], normalization_stats=stats, fractions=tuple(d["fractions"])
    )


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest_to_dict(manifest), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    return manifest_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# synthetic TCIA-layout generator
# ---------------------------------------------------------------------------

# (hue, stripe cycles per image side) per class; hues and frequencies both separate the classes
SYNTH_STYLE = {
    ClassLabel.NT: (0.93, 2.0),
    ClassLabel.NVT: (0.78, 4.0),
    ClassLabel.VT: (0.62, 7.0),
    ClassLabel.NVR: (0.08, 11.0),
}


def synth_image(label: ClassLabel, side: int, rng: np.random.Generator) -> np.ndarray:
    """One H&E-flavoured procedural texture: oriented stripes on a class hue plus blobs and noise."""
    hue, cycles = SYNTH_STYLE[ClassLabel(label)]
    hue = (hue + rng.uniform(-0.02, 0.02)) % 1.0
    sat = rng.uniform(0.40, 0.60)
    val = rng.uniform(0.65, 0.80)
    base = np.array(colorsys.hsv_to_rgb(hue, sat, val))
    yy, xx = np.mgrid[0:side, 0:side] / side
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = np.sin(2 * np.pi * cycles * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    blobs = np.zeros_like(xx)
    for _ in range(3):
        cy, cx = rng.uniform(0, 1, size=2)
        blobs += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.08 ** 2))
    shade = 1.0 + 0.18 * stripes - 0.15 * blobs
    img = base[None, None, :] * shade[:, :, None] + rng.normal(0, 0.03, size=(side, side, 3))
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def synth_generate(out_dir, per_class: int, side: int = 64, seed: int = 0, fmt: str = "png") -> list[Path]:
    """Write ``per_class`` images for each of the four classes in the TCIA directory layout."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if fmt not in ("png", "jpg", "raw"):
        raise ValueError(f"unsupported synthetic format {fmt!r}")
    out = Path(out_dir)
    written = []
    for label in ClassLabel:
        class_dir = out / label.name
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            img = synth_image(label, side, make_rng([seed, int(label), i]))
            path = class_dir / f"{label.name}_{i:04d}.{fmt}"
            if fmt == "raw":
                data = encode_raw(img)
            else:
                buf = io.BytesIO()
                Image.fromarray(img).save(buf, format="PNG" if fmt == "png" else "JPEG", quality=95)
                data = buf.getvalue()
            tmp = path.with_suffix(path.suffix + ".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, path)
            written.append(path)
    return written
