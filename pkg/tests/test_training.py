import math

import numpy as np
import pytest

from helpers import numeric_grad
from oshx import training
from oshx.data import ClassLabel, load_manifest, split_stratified
from oshx.models import ConfigurationError, build_model, preset
from oshx.tensor import Tensor, UsageError, make_rng, precision
from oshx.training import (
    Adam, AdamState, EarlyStopping, EpochRecord, NonFiniteLossError, TrainConfig, adam_step, epoch_log,
    evaluate_loss, read_epoch_log, train, train_preset, weighted_cross_entropy,
)


@pytest.fixture(scope="module")
def manifest8(synth8):
    return split_stratified(load_manifest(synth8))


def wce_oracle(logits, labels, weights):
    num = den = 0.0
    for row, y in zip(logits, labels):
        top = max(row)
        log_z = top + math.log(sum(math.exp(v - top) for v in row))
        num += weights[y] * (log_z - row[y])
        den += weights[y]
    return num / den


# -- loss --------------------------------------------------------------------------

def test_uniform_logits_give_log_k():
    loss = weighted_cross_entropy(Tensor(np.zeros((5, 4))), [0, 1, 2, 3, 1])
    assert loss.item() == pytest.approx(math.log(4), abs=1e-6)


def test_confident_correct_logits_approach_zero():
    labels = np.array([0, 2, 1])
    values = []
    for scale in (1, 5, 20, 80):
        with precision("f64"):
            values.append(weighted_cross_entropy(Tensor(np.eye(4)[labels] * scale), labels).item())
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[-1] < 1e-30


def test_weighted_loss_matches_oracle(rng):
    logits = rng.normal(size=(3, 4))
    labels = np.array([3, 0, 3])
    weights = (0.5, 1.0, 1.0, 2.0)
    with precision("f64"):
        got = weighted_cross_entropy(Tensor(logits), labels, weights).item()
    assert got == pytest.approx(wce_oracle(logits, labels, weights), abs=1e-6)
    got32 = weighted_cross_entropy(Tensor(logits), labels, weights).item()
    assert got32 == pytest.approx(wce_oracle(logits, labels, weights), abs=1e-6)


def test_equal_weights_equal_plain_mean(rng):
    logits = rng.normal(size=(6, 3))
    labels = rng.integers(0, 3, 6)
    with precision("f64"):
        plain = weighted_cross_entropy(Tensor(logits), labels).item()
        equal = weighted_cross_entropy(Tensor(logits), labels, {0: 2.5, 1: 2.5, 2: 2.5}).item()
    assert abs(plain - equal) < 1e-7


def test_loss_gradient_matches_finite_differences(rng):
    labels = np.array([1, 0, 3, 3, 2])
    weights = (0.5, 1.0, 1.0, 2.0)
    with precision("f64"):
        x0 = rng.normal(size=(5, 4))
        x = Tensor(x0, requires_grad=True)
        weighted_cross_entropy(x, labels, weights).backward()
        num = numeric_grad(lambda v: wce_oracle(v, labels, weights), x0.copy())
    assert np.abs(x.grad - num).max() / np.abs(num).max() < 1e-5


@pytest.mark.parametrize("labels,weights", [([0, 4], None), ([0], None), ([0, 1], (1.0, -1.0, 1.0, 1.0))])
def test_loss_input_errors(labels, weights):
    with pytest.raises(UsageError):
        weighted_cross_entropy(Tensor(np.zeros((2, 4))), labels, weights)


# -- Adam --------------------------------------------------------------------------

def adam_oracle(theta, grad_fn, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        out.append(theta)
    return out


def test_adam_first_step_magnitude():
    cfg = TrainConfig(learning_rate=1e-4)
    theta = np.zeros(5)
    adam_step({"w": theta}, {"w": np.ones(5)}, AdamState(), cfg)
    np.testing.assert_allclose(theta, -1e-4 / (1 + 1e-8), rtol=1e-12)


def test_adam_zero_gradient_leaves_params():
    theta = np.linspace(-1, 1, 4)
    before = theta.copy()
    adam_step({"w": theta}, {"w": np.zeros(4)}, AdamState(), TrainConfig())
    np.testing.assert_array_equal(theta, before)


def test_adam_matches_scalar_oracle():
    cfg = TrainConfig(learning_rate=1e-3)
    theta = np.array([2.0])
    state = AdamState()
    got = []
    for _ in range(5):
        adam_step({"x": theta}, {"x": 2 * (theta - 0.5)}, state, cfg)
        got.append(float(theta[0]))
    want = adam_oracle(2.0, lambda x: 2 * (x - 0.5), 5)
    assert max(abs(a - b) for a, b in zip(got, want)) < 1e-10


def test_adam_reduces_convex_loss():
    cfg = TrainConfig(learning_rate=1e-2)
    theta = np.array([3.0])
    state = AdamState()
    start = (theta[0] - 1) ** 2
    for _ in range(100):
        adam_step({"x": theta}, {"x": 2 * (theta - 1)}, state, cfg)
    assert (theta[0] - 1) ** 2 < start


def test_adam_chunked_update_matches_whole(monkeypatch):
    r = make_rng(0)
    g = r.normal(size=1000)
    a, b = np.ones(1000), np.ones(1000)
    adam_step({"w": a}, {"w": g}, AdamState(), TrainConfig())
    monkeypatch.setattr(training, "ADAM_CHUNK", 7)
    adam_step({"w": b}, {"w": g}, AdamState(), TrainConfig())
    np.testing.assert_array_equal(a, b)


def test_adam_requires_gradients():
    with pytest.raises(UsageError):
        adam_step({"w": np.zeros(2)}, {"w": None}, AdamState(), TrainConfig())


def test_adam_wrapper_updates_tensors():
    p = Tensor(np.zeros(3), requires_grad=True)
    p.grad = np.ones(3, dtype=np.float32)
    opt = Adam([("p", p)], TrainConfig(learning_rate=0.1))
    opt.step()
    opt.zero_grad()
    assert p.grad is None and np.allclose(p.data, -0.1)


# -- config ------------------------------------------------------------------------

def test_presets():
    assert [train_preset(a).epochs for a in ("cnn", "vit", "hybrid", "resnet50")] == [30, 20, 30, 30]
    cfg = train_preset("cnn")
    assert (cfg.learning_rate, cfg.batch_size, cfg.beta1, cfg.beta2, cfg.epsilon) == (1e-4, 32, 0.9, 0.999, 1e-8)
    assert cfg.early_stop_patience == 5
    with pytest.raises(ConfigurationError):
        train_preset("mlp")


@pytest.mark.parametrize("kw", [dict(beta1=1.0), dict(learning_rate=0), dict(epochs=0), dict(numeric_mode="f16")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# -- early stopping ----------------------------------------------------------------

def test_early_stopping_sequence():
    stopper = EarlyStopping(3)
    flags = [stopper.update(e, v) for e, v in enumerate([1.0, 0.8, 0.9, 0.85, 0.95, 0.99], start=1)]
    assert flags == [False, False, False, False, True, True]
    assert stopper.best_epoch == 2


def test_train_returns_best_snapshot(manifest8, monkeypatch):
    losses = iter([1.0, 0.8, 0.9, 0.85, 0.95, 0.99])
    monkeypatch.setattr(training, "evaluate_loss", lambda *a, **k: (next(losses), 0.5))
    model = build_model(preset("vit", "tiny"))
    snapshots = {}
    cfg = TrainConfig(learning_rate=1e-3, epochs=10, early_stop_patience=3, batch_size=8)

    def grab(record):
        snapshots[record.epoch] = {k: v.copy() for k, v in model.state_dict().items()}

    _, records = train(model, manifest8, cfg, on_epoch=grab)
    assert [r.epoch for r in records] == [1, 2, 3, 4, 5]
    final = model.state_dict()
    assert all(np.array_equal(final[k], snapshots[2][k]) for k in final)
    assert not all(np.array_equal(final[k], snapshots[5][k]) for k in final)


def test_best_model_has_min_recorded_val_loss(manifest8):
    model = build_model(preset("cnn", "tiny"))
    cfg = train_preset("cnn", "tiny", epochs=4, batch_size=8)
    _, records = train(model, manifest8, cfg)
    classes = tuple(ClassLabel)
    weights = training.class_weight_vector(manifest8, classes, cfg).astype(np.float32)
    src = training._ImageSource(manifest8, "val", 64, classes, np.float32, False)
    loss, _ = evaluate_loss(model, src, weights, 8)
    assert loss == pytest.approx(min(r.val_loss for r in records), rel=1e-6)


def test_nonfinite_loss_raises(manifest8):
    model = build_model(preset("cnn", "tiny"))
    model.head.bias.data[0] = np.nan
    with pytest.raises(NonFiniteLossError) as info:
        train(model, manifest8, train_preset("cnn", "tiny", epochs=1))
    assert info.value.epoch == 1 and info.value.batch == 0


def test_train_rejects_class_mismatch(manifest8):
    model = build_model(preset("cnn", "tiny", num_classes=2))
    with pytest.raises(ConfigurationError):
        train(model, manifest8, train_preset("cnn", "tiny", epochs=1))


def test_training_is_repeatable(manifest8):
    def run():
        model = build_model(preset("vit", "tiny", dropout_rate=0.1), seed=2)
        return train(model, manifest8, train_preset("vit", "tiny", epochs=3, batch_size=8, seed=2))

    (m1, r1), (m2, r2) = run(), run()
    assert r1 == r2
    s1, s2 = m1.state_dict(), m2.state_dict()
    assert all(np.array_equal(s1[k], s2[k]) for k in s1)


def branch_checksums(model):
    return {n: p.data.tobytes() for n, p in model.named_parameters() if n.startswith(("cnn.", "vit."))}


def test_hybrid_training_keeps_branches_frozen(manifest8):
    model = build_model(preset("hybrid", "tiny"))
    before = branch_checksums(model)
    head_before = model.fc1.weight.data.copy()
    train(model, manifest8, train_preset("hybrid", "tiny", epochs=3, batch_size=8))
    assert branch_checksums(model) == before
    assert not np.array_equal(model.fc1.weight.data, head_before)


def test_hybrid_feature_streaming_matches_cache(manifest8, monkeypatch):
    def run():
        model = build_model(preset("hybrid", "tiny"))
        return train(model, manifest8, train_preset("hybrid", "tiny", epochs=2, batch_size=8))[1]

    cached = run()
    monkeypatch.setattr(training, "FEATURE_CACHE_BYTES", 0)
    streamed = run()
    for a, b in zip(cached, streamed):
        assert a.train_loss == pytest.approx(b.train_loss, rel=1e-5)
        assert a.val_loss == pytest.approx(b.val_loss, rel=1e-5)


# -- epoch log ---------------------------------------------------------------------

RECORDS = [EpochRecord(1, 1.25, 1.5, 0.25, 3.0), EpochRecord(2, 0.75, 1.0, 0.5, 2.5),
           EpochRecord(3, 0.5, 0.875, 0.75, 2.0)]


def test_epoch_log_lines_and_repeatability(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    epoch_log(RECORDS, a)
    epoch_log(RECORDS, b)
    lines = a.read_text().splitlines()
    assert len(lines) == 4 and lines[0] == "epoch,train_loss,val_loss,val_acc,seconds"
    assert a.read_bytes() == b.read_bytes()
    assert read_epoch_log(a) == RECORDS


def test_epoch_log_empty_and_append(tmp_path):
    path = tmp_path / "log.csv"
    epoch_log([], path)
    assert path.read_text().splitlines() == ["epoch,train_loss,val_loss,val_acc,seconds"]
    epoch_log(RECORDS[:1], path)
    epoch_log(RECORDS[1:], path)
    assert read_epoch_log(path) == RECORDS


def test_epoch_log_wall_clock(tmp_path):
    path = tmp_path / "log.csv"
    epoch_log(RECORDS[:1], path, wall_clock=True)
    assert path.read_text().splitlines()[1].endswith(",3.000")
