"""Binary checkpoint files.

Layout::

    b"OSHX"  u32 version  u64 metadata_length  metadata (UTF-8 JSON)  blobs

Blobs are little-endian float32 arrays in the order of the metadata's
``index`` list, whose entries carry each tensor's name, shape, byte offset
into the blob region and byte length.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any

import numpy as np

from .models import ArchSpec, Hybrid, Model, build_model

MAGIC = b"OSHX"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(RuntimeError):
    pass


class FormatError(CheckpointError):
    """Not a checkpoint, or a version this build cannot read."""


class CorruptionError(CheckpointError):
    """Metadata and payload disagree (e.g. a truncated file)."""


class SpecMismatchError(CheckpointError):
    pass


def _atomic_write(path: Path, chunks) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            for chunk in chunks:
                fh.write(chunk)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _chunks(model: Model, meta: dict[str, Any] | None):
    params = {n for n, _ in model.named_parameters()}
    state = model.state_dict()
    index, offset = [], 0
    for name, arr in state.items():
        nbytes = 4 * arr.size
        index.append({"name": name, "kind": "parameter" if name in params else "buffer",
                      "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    document = {"format": "oshx-checkpoint", "arch": model.spec.to_dict(), "index": index, "payload_bytes": offset,
                "meta": meta if meta is not None else getattr(model, "meta", {})}
    text = json.dumps(document, sort_keys=True, separators=(",", ":")).encode("utf-8")
    yield _HEADER.pack(MAGIC, VERSION, len(text)) + text
    for arr in state.values():
        # one tensor at a time keeps peak memory near the model size
        yield np.ascontiguousarray(arr, dtype="<f4").tobytes()


def checkpoint_bytes(model: Model, meta: dict[str, Any] | None = None) -> bytes:
    return b"".join(_chunks(model, meta))


def save_checkpoint(model: Model, path, meta: dict[str, Any] | None = None) -> None:
    """Write atomically; ``meta`` (class names, normalization, split...) defaults to ``model.meta``."""
    _atomic_write(Path(path), _chunks(model, meta))


def read_checkpoint(path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Parse and validate a file into (metadata document, state dict)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise FormatError(f"{path} is not an OSHX checkpoint")
    _, version, meta_len = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} (this build reads {VERSION})")
    body_start = _HEADER.size + meta_len
    if body_start > len(raw):
        raise CorruptionError(f"{path}: metadata runs past end of file")
    try:
        document = json.loads(raw[_HEADER.size:body_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable metadata ({exc})") from None
    payload = memoryview(raw)[body_start:]
    if len(payload) != document.get("payload_bytes"):
        raise CorruptionError(
            f"{path}: payload is {len(payload)} bytes, metadata declares {document.get('payload_bytes')}"
        )
    state = {}
    for entry in document["index"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if nbytes != 4 * count or start + nbytes > len(payload):
            raise CorruptionError(f"{path}: index entry {entry['name']!r} does not fit the payload")
        state[entry["name"]] = np.frombuffer(payload[start:start + nbytes], dtype="<f4").reshape(entry["shape"])
    return document, state


def read_spec(path) -> ArchSpec:
    """Architecture of a checkpoint, read without loading its tensors."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size or head[:4] != MAGIC:
            raise FormatError(f"{path} is not an OSHX checkpoint")
        _, version, meta_len = _HEADER.unpack(head)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version} (this build reads {VERSION})")
        text = fh.read(meta_len)
    try:
        return ArchSpec.from_dict(json.loads(text.decode("utf-8"))["arch"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CorruptionError(f"{path}: unreadable metadata ({exc})") from None


def load_checkpoint(path, expect_num_classes: int | None = None) -> Model:
    """Rebuild the model from its stored spec and fill in every tensor.

    The returned model carries the stored metadata as ``model.meta``.
    """
    document, state = read_checkpoint(path)
    spec = ArchSpec.from_dict(document["arch"])
    if expect_num_classes is not None and spec.num_classes != expect_num_classes:
        raise SpecMismatchError(
            f"{path} holds a {spec.num_classes}-class {spec.name} model, but {expect_num_classes} classes are required"
        )
    model = build_model(spec)
    try:
        model.load_state_dict(state, strict=True)
    except KeyError as exc:
        raise SpecMismatchError(f"{path}: tensors do not match the stored architecture: {exc}") from None
    model.meta = document.get("meta", {})
    model.eval()
    return model


def init_from(model: Model, paths: list) -> list[str]:
    """Import weights from checkpoints into ``model`` (pretrained-weight path).

    For a fusion model each file must hold a CNN or ViT whose spec matches a
    branch; both branches may be supplied.  Other models take every tensor
    whose name and shape match and return the names that were skipped.
    """
    skipped: list[str] = []
    for p in paths:
        document, state = read_checkpoint(p)
        name = document["arch"]["name"]
        if isinstance(model, Hybrid):
            branch = {"cnn": model.cnn, "vit": model.vit}.get(name)
            if branch is None:
                raise SpecMismatchError(f"{p}: a fusion model can only import cnn or vit branches")
            # the branch's own classifier head is not part of the fusion model's feature path
            bad = branch.load_state_dict({k: v for k, v in state.items() if not k.startswith("head.")}, strict=False)
            if bad:
                raise SpecMismatchError(f"{p}: {name} branch tensors do not fit the fusion model: {bad}")
        else:
            skipped += model.load_state_dict(state, strict=False)
        del state
    return skipped

