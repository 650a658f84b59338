"""Central finite-difference checks of every differentiable op, in 64-bit mode."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .tensor import Tensor, make_rng, precision

STEP = 1e-4
TOLERANCE = 1e-5
SEEDS_PER_OP = 10


def _away_from_kinks(x: np.ndarray) -> np.ndarray:
    # keep samples well outside +-h of the kink at 0
    return np.sign(x) * (np.abs(x) + 0.05)


def _distinct(rng: np.random.Generator, shape) -> np.ndarray:
    # values at least 0.1 apart, so no window max is within h of a tie
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 - n * 0.05 + rng.uniform(-0.01, 0.01, n)).reshape(shape)


def _mha(rng):
    d = 4
    arrays = [rng.normal(size=(2, 3, d)), rng.normal(size=(3 * d, d)) * 0.5, rng.normal(size=3 * d) * 0.1,
              rng.normal(size=(d, d)) * 0.5, rng.normal(size=d) * 0.1]
    return arrays, lambda x, wq, bq, wp, bp: F.multi_head_attention(x, 2, wq, bq, wp, bp)


def _wce(rng):
    from .training import weighted_cross_entropy

    labels = rng.integers(0, 4, size=5)
    return [rng.normal(size=(5, 4))], lambda z: weighted_cross_entropy(z, labels, (0.5, 1.0, 1.0, 2.0))


def _batch_norm(rng):
    c = 3
    def fn(x, g, b):
        return F.batch_norm(x, g, b, np.zeros(c), np.ones(c), training=True)
    return [rng.normal(size=(4, c, 3, 3)), rng.normal(size=c) + 1, rng.normal(size=c)], fn


def _dropout(rng):
    mask_seed = int(rng.integers(2**32))
    return [rng.normal(size=(4, 5))], lambda x: F.dropout(x, 0.3, make_rng(mask_seed), training=True)


# op name -> builder(rng) returning (input arrays, fn(*tensors) -> Tensor)
CASES: dict[str, Callable] = {
    "add": lambda r: ([r.normal(size=(3, 4)), r.normal(size=4)], F.add),
    "sub": lambda r: ([r.normal(size=(2, 3)), r.normal(size=(2, 1))], F.sub),
    "mul": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(1, 4))], F.mul),
    "matmul": lambda r: ([r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))], F.matmul),
    "sum": lambda r: ([r.normal(size=(3, 4, 2))], lambda x: F.sum(x, axis=1)),
    "mean": lambda r: ([r.normal(size=(3, 4))], lambda x: F.mean(x, axis=0, keepdims=True)),
    "reshape": lambda r: ([r.normal(size=(2, 6))], lambda x: F.reshape(x, (3, 4))),
    "flatten": lambda r: ([r.normal(size=(2, 3, 2))], F.flatten),
    "transpose": lambda r: ([r.normal(size=(2, 3, 4))], lambda x: F.transpose(x, (2, 0, 1))),
    "getitem": lambda r: ([r.normal(size=(4, 5))], lambda x: F.getitem(x, (slice(1, None), slice(None, None, 2)))),
    "getitem_gather": lambda r: ([r.normal(size=(4, 3))], lambda x: F.getitem(x, [0, 2, 0, 3])),
    "broadcast_to": lambda r: ([r.normal(size=(1, 3))], lambda x: F.broadcast_to(x, (4, 3))),
    "concat": lambda r: ([r.normal(size=(2, 3)), r.normal(size=(2, 2))], lambda a, b: F.concat([a, b], axis=1)),
    "relu": lambda r: ([_away_from_kinks(r.normal(size=(3, 4)))], F.relu),
    "leaky_relu": lambda r: ([_away_from_kinks(r.normal(size=(3, 4)))], lambda x: F.leaky_relu(x, 0.25)),
    "gelu": lambda r: ([r.normal(size=(3, 4)) * 2], F.gelu),
    "softmax": lambda r: ([r.normal(size=(3, 4))], lambda x: F.softmax(x, axis=-1)),
    "dropout": _dropout,
    "linear": lambda r: ([r.normal(size=(2, 3, 4)), r.normal(size=(5, 4)), r.normal(size=5)], F.linear),
    "layer_norm": lambda r: ([r.normal(size=(3, 6)), r.normal(size=6) + 1, r.normal(size=6)],
                             lambda x, g, b: F.layer_norm(x, g, b, 1e-6)),
    "batch_norm": _batch_norm,
    "conv2d": lambda r: ([r.normal(size=(2, 2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)],
                         lambda x, w, b: F.conv2d(x, w, b, stride=2, padding=1)),
    "maxpool2d": lambda r: ([_distinct(r, (1, 2, 6, 6))], lambda x: F.maxpool2d(x, 3, 2, padding=1)),
    "global_avg_pool": lambda r: ([r.normal(size=(2, 3, 4, 4))], F.global_avg_pool),
    "multi_head_attention": _mha,
    "weighted_cross_entropy": _wce,
    "shared_input": lambda r: ([r.normal(size=(3, 4))], lambda x: F.add(F.mul(x, x), F.mul(x, 3.0))),
}


@dataclass(frozen=True)
class GradcheckResult:
    op: str
    max_error: float
    seeds: int

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' magnitudes."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    return float(diff / scale) if scale > 0 else float(diff)


def check_case(builder: Callable, rng: np.random.Generator, h: float = STEP) -> float:
    """Largest relative error over all inputs of one randomly drawn case."""
    with precision("f64"):
        arrays, fn = builder(rng)
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        probe = fn(*[Tensor(a) for a in arrays]).data
        # project onto a random direction so every output element contributes
        weight = rng.normal(size=probe.shape)

        def objective(values):
            return float((fn(*[Tensor(v) for v in values]).data * weight).sum())

        params = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*params)
        F.sum(F.mul(out, Tensor(weight))).backward()
        worst = 0.0
        for i, p in enumerate(params):
            analytic = p.grad if p.grad is not None else np.zeros_like(arrays[i])
            numeric = np.zeros_like(arrays[i])
            for idx in np.ndindex(arrays[i].shape):
                values = [a.copy() for a in arrays]
                values[i][idx] += h
                up = objective(values)
                values[i][idx] -= 2 * h
                down = objective(values)
                numeric[idx] = (up - down) / (2 * h)
            worst = max(worst, relative_error(analytic, numeric))
        return worst


def run_gradcheck(seed: int = 0, ops: Sequence[str] | None = None, seeds_per_op: int = SEEDS_PER_OP,
                  cases: dict[str, Callable] | None = None) -> list[GradcheckResult]:
    cases = CASES if cases is None else cases
    names = list(cases) if ops is None else list(ops)
    results = []
    for k, name in enumerate(names):
        worst = max(check_case(cases[name], make_rng([seed, k, i])) for i in range(seeds_per_op))
        results.append(GradcheckResult(name, worst, seeds_per_op))
    return results
