"""Finite-difference checks of every differentiable op and both losses."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check, mul, tensor_sum
from .config import LossConfig
from .losses import cross_entropy, focal_multiclass

TOLERANCE = 1e-4
EPS = 1e-4
SEEDS = (0, 1, 2, 3, 4)

Case = tuple[Callable[..., Tensor], list[Tensor]]


def _projected(op: Callable[..., Tensor], out_shape, rng) -> Callable[..., Tensor]:
    """Reduce a tensor-valued op to a scalar through fixed random weights."""
    weights = Tensor(rng.standard_normal(out_shape))
    return lambda *xs: tensor_sum(mul(op(*xs), weights))


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale)


def _concat(rng) -> Case:
    return _projected(ad.concat_channels, (2, 3, 3, 5), rng), [_t(rng, 2, 3, 3, 2), _t(rng, 2, 3, 3, 3)]


def _conv3x3(rng) -> Case:
    op = lambda x, w, b: ad.conv2d(x, w, b, stride=1, padding=1)  # noqa: E731
    return _projected(op, (1, 4, 4, 3), rng), [_t(rng, 1, 4, 4, 2), _t(rng, 3, 3, 2, 3), _t(rng, 3)]


def _conv1x1(rng) -> Case:
    op = lambda x, w, b: ad.conv2d(x, w, b)  # noqa: E731
    return _projected(op, (2, 4, 4, 3), rng), [_t(rng, 2, 4, 4, 3), _t(rng, 1, 1, 3, 3), _t(rng, 3)]


def _conv_strided(rng) -> Case:
    op = lambda x, w, b: ad.conv2d(x, w, b, stride=2, padding=1)  # noqa: E731
    return _projected(op, (1, 3, 3, 2), rng), [_t(rng, 1, 5, 5, 2), _t(rng, 3, 3, 2, 2), _t(rng, 2)]


def _bn_train(rng) -> Case:
    op = lambda x, g, b: ad.batch_norm(x, g, b, None, "train")  # noqa: E731
    return _projected(op, (2, 3, 3, 4), rng), [_t(rng, 2, 3, 3, 4), _t(rng, 4), _t(rng, 4)]


def _bn_eval(rng) -> Case:
    stats = ad.RunningStats(rng.standard_normal(4), rng.uniform(0.5, 2.0, 4))
    op = lambda x, g, b: ad.batch_norm(x, g, b, stats, "eval")  # noqa: E731
    return _projected(op, (2, 3, 3, 4), rng), [_t(rng, 2, 3, 3, 4), _t(rng, 4), _t(rng, 4)]


def _relu(rng) -> Case:
    x = rng.standard_normal((2, 4, 4, 3))
    x = np.where(np.abs(x) < 0.05, np.sign(x) * 0.05 + x, x)  # keep away from the kink
    return _projected(ad.relu, x.shape, rng), [Tensor(x)]


def _avg_pool(rng) -> Case:
    return _projected(ad.avg_pool_2x2, (2, 2, 2, 3), rng), [_t(rng, 2, 4, 4, 3)]


def _gap(rng) -> Case:
    return _projected(ad.global_avg_pool, (2, 3), rng), [_t(rng, 2, 4, 4, 3)]


def _fc(rng) -> Case:
    return _projected(ad.fully_connected, (3, 4), rng), [_t(rng, 3, 5), _t(rng, 5, 4), _t(rng, 4)]


def _softmax(rng) -> Case:
    return _projected(ad.softmax, (3, 5), rng), [_t(rng, 3, 5, scale=2.0)]


def _dropout(rng) -> Case:
    seed = int(rng.integers(2**31))
    op = lambda x: ad.dropout(x, 0.5, "train", np.random.default_rng(seed))  # noqa: E731
    return _projected(op, (2, 4, 4, 3), rng), [_t(rng, 2, 4, 4, 3)]


def _cross_entropy(rng) -> Case:
    labels = rng.integers(0, 4, size=6)
    return (lambda z: cross_entropy(z, labels)), [_t(rng, 6, 4, scale=2.0)]


def _focal(rng) -> Case:
    labels = rng.integers(0, 4, size=6)
    cfg = LossConfig()
    return (lambda z: focal_multiclass(z, labels, cfg)), [_t(rng, 6, 4, scale=2.0)]


def _focal_gamma2(rng) -> Case:
    labels = rng.integers(0, 4, size=6)
    return (lambda z: focal_multiclass(z, labels, alpha=1.0, gamma=2.0)), [_t(rng, 6, 4, scale=2.0)]


REGISTRY: dict[str, Callable[[np.random.Generator], Case]] = {
    "concat_channels": _concat,
    "conv2d_3x3": _conv3x3,
    "conv2d_1x1": _conv1x1,
    "conv2d_stride2": _conv_strided,
    "batch_norm_train": _bn_train,
    "batch_norm_eval": _bn_eval,
    "relu": _relu,
    "avg_pool_2x2": _avg_pool,
    "global_avg_pool": _gap,
    "fully_connected": _fc,
    "softmax": _softmax,
    "dropout": _dropout,
    "cross_entropy": _cross_entropy,
    "focal_multiclass": _focal,
    "focal_multiclass_gamma2": _focal_gamma2,
}


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e <= self.tolerance]

    def to_text(self) -> str:
        lines = ["op\tmax_rel_error\tstatus"]
        for name, err in self.errors.items():
            lines.append(f"{name}\t{err:.3e}\t{'ok' if err <= self.tolerance else 'FAIL'}")
        lines.append(f"# {len(self.errors)} ops, {self.seconds:.1f}s, tolerance {self.tolerance:g}")
        return "\n".join(lines)


def gradcheck_all(seeds=SEEDS, eps: float = EPS, registry=None) -> GradcheckReport:
    """Worst relative error per registered op over all seeds, in float64."""
    registry = REGISTRY if registry is None else registry
    start = time.perf_counter()
    errors = {}
    for name, build in registry.items():
        worst = 0.0
        for seed in seeds:
            closure, inputs = build(np.random.default_rng([seed, len(name)]))
            err = grad_check(closure, inputs, eps)
            worst = max(worst, err) if np.isfinite(err) else float("inf")
        errors[name] = worst
    return GradcheckReport(errors, time.perf_counter() - start)
