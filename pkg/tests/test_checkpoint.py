import struct

import numpy as np
import pytest

from oshx.checkpoint import (
    CorruptionError, FormatError, SpecMismatchError, checkpoint_bytes, init_from, load_checkpoint, read_spec,
    save_checkpoint,
)
from oshx.models import build_model, preset


@pytest.fixture
def saved(tmp_path):
    model = build_model(preset("resnet50", "tiny", num_classes=3), seed=1)
    model.meta = {"task": "three_class", "class_names": ["NT", "NVT", "VT"]}
    path = tmp_path / "m.oshx"
    save_checkpoint(model, path)
    return model, path


def test_roundtrip_is_byte_identical(saved, tmp_path):
    model, path = saved
    loaded = load_checkpoint(path)
    save_checkpoint(loaded, tmp_path / "again.oshx")
    assert path.read_bytes() == (tmp_path / "again.oshx").read_bytes()
    assert checkpoint_bytes(loaded) == path.read_bytes()


def test_tensors_and_meta_survive(saved):
    model, path = saved
    loaded = load_checkpoint(path)
    a, b = model.state_dict(), loaded.state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert loaded.meta == model.meta
    assert loaded.spec == model.spec
    assert read_spec(path) == model.spec


def test_truncated_file_is_corrupt(saved):
    _, path = saved
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CorruptionError):
        load_checkpoint(path)


def test_bad_magic_and_version(saved):
    _, path = saved
    raw = path.read_bytes()
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    with pytest.raises(FormatError):
        read_spec(path)


def test_wrong_class_count(saved):
    _, path = saved
    with pytest.raises(SpecMismatchError):
        load_checkpoint(path, expect_num_classes=4)


def test_no_temp_files_left(saved):
    _, path = saved
    assert [p.name for p in path.parent.iterdir()] == ["m.oshx"]


def test_hybrid_imports_branches(tmp_path):
    spec = preset("hybrid", "tiny")
    cnn = build_model(spec.branch("cnn"), seed=7)
    vit = build_model(spec.branch("vit"), seed=8)
    save_checkpoint(cnn, tmp_path / "cnn.oshx")
    save_checkpoint(vit, tmp_path / "vit.oshx")
    hybrid = build_model(spec, seed=0)
    init_from(hybrid, [tmp_path / "cnn.oshx", tmp_path / "vit.oshx"])
    for branch, src in ((hybrid.cnn, cnn), (hybrid.vit, vit)):
        got, want = branch.state_dict(), src.state_dict()
        # a branch's own classifier head is not on the fusion feature path
        assert all(np.array_equal(got[k], want[k]) for k in got if not k.startswith("head."))


def test_hybrid_rejects_foreign_checkpoint(saved):
    _, path = saved
    with pytest.raises(SpecMismatchError):
        init_from(build_model(preset("hybrid", "tiny", num_classes=3)), [path])


def test_plain_import_reports_skipped(tmp_path):
    src = build_model(preset("cnn", "tiny", num_classes=2), seed=3)
    save_checkpoint(src, tmp_path / "c.oshx")
    dst = build_model(preset("cnn", "tiny", num_classes=4))
    skipped = init_from(dst, [tmp_path / "c.oshx"])
    assert set(skipped) == {"head.weight", "head.bias"}
    got, want = dst.state_dict(), src.state_dict()
    assert all(np.array_equal(got[k], want[k]) for k in got if k not in skipped)
