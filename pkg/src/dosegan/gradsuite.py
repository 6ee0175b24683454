"""Seeded 64-bit finite-difference checks for every differentiable primitive and loss.

Each check builds a small program from one seed, projects its output onto a
fixed random target with ``mean_sq(out - R)`` so every coordinate receives a
generic gradient, and reports ``grad_check``'s worst relative error.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses, ops
from .gradcheck import grad_check
from .nets import FeatureExtractor, NetConfig, PatchDiscriminator
from .rng import Rng
from .tensor import Tensor

TOLERANCE = 1e-6
SEEDS = (0, 1, 2, 3, 4)
F64 = np.float64


def _t(rng: np.random.Generator, *shape, grad: bool = True, offset: float = 0.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) + offset, requires_grad=grad, dtype=F64)


def _away_from_zero(rng: np.random.Generator, *shape) -> Tensor:
    # keeps every coordinate at least 0.05 from the kink so +-h never crosses it
    a = rng.standard_normal(shape)
    a = np.where(np.abs(a) < 0.05, np.sign(a) * 0.05 + a, a)
    return Tensor(a, requires_grad=True, dtype=F64)


_CONV_GEOMS = [(1, 1), (2, 1), (1, 0), (2, 0), (3, 1)]
_CONVT_GEOMS = [(1, 1, 0), (2, 1, 1), (2, 0, 0), (2, 1, 0), (3, 1, 2)]


def check_conv3d(seed: int) -> float:
    rng = np.random.default_rng(seed)
    stride, pad = _CONV_GEOMS[seed % len(_CONV_GEOMS)]
    x, w, b = _t(rng, 2, 2, 6, 5, 6), _t(rng, 3, 2, 3, 3, 3), _t(rng, 3)
    y0 = ops.conv3d(x, w, b, stride, pad)
    r = Tensor(rng.standard_normal(y0.shape), dtype=F64)
    return grad_check(lambda x, w, b: ops.mean_sq(ops.sub(ops.conv3d(x, w, b, stride, pad), r)), [x, w, b], seed=seed)


def check_conv3d_transpose(seed: int) -> float:
    rng = np.random.default_rng(seed)
    stride, pad, opad = _CONVT_GEOMS[seed % len(_CONVT_GEOMS)]
    x, w, b = _t(rng, 2, 2, 3, 4, 3), _t(rng, 2, 3, 3, 3, 3), _t(rng, 3)
    y0 = ops.conv3d_transpose(x, w, b, stride, pad, opad)
    r = Tensor(rng.standard_normal(y0.shape), dtype=F64)

    def f(x, w, b):
        return ops.mean_sq(ops.sub(ops.conv3d_transpose(x, w, b, stride, pad, opad), r))

    return grad_check(f, [x, w, b], seed=seed)


def _bn_check(seed: int, training: bool) -> float:
    rng = np.random.default_rng(seed)
    x = _t(rng, 3, 2, 3, 4, 2, offset=0.5)
    gamma, beta = _t(rng, 2, offset=1.0), _t(rng, 2)
    r = Tensor(rng.standard_normal(x.shape), dtype=F64)
    state = ops.BatchNormState(rng.standard_normal(2), rng.uniform(0.5, 2.0, 2))

    def f(x, gamma, beta):
        y = ops.batch_norm3d(x, gamma, beta, state, training)
        return ops.mean_sq(ops.sub(y, r))

    return grad_check(f, [x, gamma, beta], seed=seed)


def check_batch_norm3d_train(seed: int) -> float:
    return _bn_check(seed, True)


def check_batch_norm3d_eval(seed: int) -> float:
    return _bn_check(seed, False)


def check_leaky_relu(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _away_from_zero(rng, 2, 3, 4, 4, 4)
    r = Tensor(rng.standard_normal(x.shape), dtype=F64)
    return grad_check(lambda x: ops.mean_sq(ops.sub(ops.leaky_relu(x, 0.2), r)), [x], seed=seed)


def check_relu(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _away_from_zero(rng, 2, 3, 4, 4, 4)
    r = Tensor(rng.standard_normal(x.shape), dtype=F64)
    return grad_check(lambda x: ops.mean_sq(ops.sub(ops.relu(x), r)), [x], seed=seed)


def check_elementwise(seed: int) -> float:
    """add, sub, scale, shift, concat, reshape and flatten in one program."""
    rng = np.random.default_rng(seed)
    a, b = _t(rng, 2, 2, 3, 3, 3), _t(rng, 2, 2, 3, 3, 3)
    c = _t(rng, 2, 1, 3, 3, 3)
    r = Tensor(rng.standard_normal((2, 5 * 27)), dtype=F64)

    def f(a, b, c):
        h = ops.add(ops.scale(a, 1.5), ops.shift(ops.sub(a, b), -0.3))
        h = ops.concat([h, b, c], axis=1)
        h = ops.reshape(h, (2, 5, 27))
        return ops.mean_sq(ops.sub(ops.flatten(h), r))

    return grad_check(f, [a, b, c], seed=seed)


def check_linear(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x, w, b = _t(rng, 4, 7), _t(rng, 5, 7), _t(rng, 5)
    r = Tensor(rng.standard_normal((4, 5)), dtype=F64)
    return grad_check(lambda x, w, b: ops.mean_sq(ops.sub(ops.linear(x, w, b), r)), [x, w, b], seed=seed)


def check_reductions(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _away_from_zero(rng, 2, 2, 3, 3, 3)

    def f(x):
        return ops.add(ops.add(ops.mean(x), ops.scale(ops.sum(x), 0.1)), ops.add(ops.mean_abs(x), ops.mean_sq(x)))

    return grad_check(f, [x], seed=seed)


def check_softmax_cross_entropy(seed: int) -> float:
    rng = np.random.default_rng(seed)
    logits = _t(rng, 6, 5)
    labels = rng.integers(0, 5, 6)
    return grad_check(lambda z: ops.softmax_cross_entropy(z, labels), [logits], seed=seed)


# ----------------------------------------------------------------------------
# losses through small seeded networks


def _toy_conv(rng: np.random.Generator, cin: int = 1, cout: int = 1) -> tuple[Tensor, Tensor]:
    w = Tensor(rng.standard_normal((cout, cin, 3, 3, 3)) * 0.3, requires_grad=True, dtype=F64)
    b = Tensor(rng.standard_normal(cout) * 0.1, requires_grad=True, dtype=F64)
    return w, b


def check_loss_reconstruction(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _t(rng, 2, 1, 6, 6, 6)
    w, b = _toy_conv(rng)
    y = Tensor(rng.standard_normal(x.shape) + 3.0, dtype=F64)  # far from the prediction, away from |.| kinks
    return grad_check(lambda x, w, b: losses.reconstruction_loss(ops.conv3d(x, w, b, 1, 1), y), [x, w, b], seed=seed)


def check_loss_classification(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _t(rng, 3, 1, 4, 4, 4)
    w, b = _toy_conv(rng, 1, 2)
    fc = _t(rng, 5, 2 * 8)
    labels = rng.integers(0, 5, 3)

    def f(x, w, fc):
        h = ops.flatten(ops.conv3d(x, w, b, 2, 1))
        return losses.classification_loss(ops.linear(h, fc), labels)

    return grad_check(f, [x, w, fc], seed=seed)


def check_loss_perceptual(seed: int) -> float:
    rng = np.random.default_rng(seed)
    cfg = NetConfig(feature_channels=(2, 3, 3), feature_layer_indices=(0, 2))
    phi = FeatureExtractor.from_config(cfg, Rng(seed).split("features")).cast(F64)
    x = _t(rng, 2, 1, 8, 8, 8)
    w, b = _toy_conv(rng)
    y = Tensor(rng.standard_normal(x.shape), dtype=F64)
    return grad_check(lambda x, w: losses.perceptual_loss(phi, ops.conv3d(x, w, b, 1, 1), y), [x, w], seed=seed)


def _toy_disc(seed: int) -> PatchDiscriminator:
    return PatchDiscriminator(NetConfig(base_channels=2, disc_layers=2), Rng(seed).split("disc")).cast(F64)


def check_loss_discriminator(seed: int) -> float:
    rng = np.random.default_rng(seed)
    disc = _toy_disc(seed)
    x, real, fake = (Tensor(rng.standard_normal((2, 1, 8, 8, 8)), dtype=F64) for _ in range(3))
    params = [disc.p("block1.conv.weight"), disc.p("block2.bn.gamma"), disc.p("score.weight")]
    return grad_check(lambda *_: losses.discriminator_loss(disc, x, real, fake), params, seed=seed)


def check_loss_generator_adversarial(seed: int) -> float:
    rng = np.random.default_rng(seed)
    disc = _toy_disc(seed)
    x = Tensor(rng.standard_normal((2, 1, 8, 8, 8)), dtype=F64)
    z = _t(rng, 2, 1, 8, 8, 8)
    w, b = _toy_conv(rng)
    return grad_check(lambda z, w: losses.generator_adversarial_loss(disc, x, ops.conv3d(z, w, b, 1, 1)), [z, w],
                      seed=seed)


CHECKS: dict[str, Callable[[int], float]] = {
    "conv3d": check_conv3d,
    "conv3d_transpose": check_conv3d_transpose,
    "batch_norm3d_train": check_batch_norm3d_train,
    "batch_norm3d_eval": check_batch_norm3d_eval,
    "leaky_relu": check_leaky_relu,
    "relu": check_relu,
    "elementwise": check_elementwise,
    "linear": check_linear,
    "reductions": check_reductions,
    "softmax_cross_entropy": check_softmax_cross_entropy,
    "loss_reconstruction": check_loss_reconstruction,
    "loss_classification": check_loss_classification,
    "loss_perceptual": check_loss_perceptual,
    "loss_discriminator": check_loss_discriminator,
    "loss_generator_adversarial": check_loss_generator_adversarial,
}


@dataclass
class CheckResult:
    name: str
    max_error: float
    seeds: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def run_suite(names: list[str] | None = None, seeds: tuple[int, ...] = SEEDS) -> list[CheckResult]:
    selected = list(CHECKS) if not names else names
    for n in selected:
        if n not in CHECKS:
            raise KeyError(f"unknown check {n!r}; available: {', '.join(CHECKS)}")
    out = []
    for n in selected:
        errs = []
        for s in seeds:
            try:
                errs.append(CHECKS[n](s))
            except FloatingPointError:
                errs.append(float("inf"))
        out.append(CheckResult(n, max(errs), len(seeds)))
    return out


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'primitive':<28}{'seeds':>6}{'max rel err':>14}  result"]
    for r in results:
        lines.append(f"{r.name:<28}{r.seeds:>6}{r.max_error:>14.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
