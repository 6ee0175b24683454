from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor


class MissingGradError(RuntimeError):
    pass


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # per-parameter step counts, so parameters joining late get correct bias correction
    steps: dict[str, int] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``param.data``."""
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradError(f"parameter {name} has no gradient")
        if not np.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient for {name}")
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.steps[name] = 0
        m, v = state.m[name], state.v[name]
        t = state.steps[name] + 1
        state.steps[name] = t
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    state.step += 1


@dataclass
class PlateauScheduler:
    """Multiplicative reduce-on-plateau with an early-stop floor.

    A validation loss counts as an improvement only if it is strictly below
    the best seen so far.
    """

    lr: float = 2e-4
    factor: float = 0.1
    patience: int = 5
    stop_threshold: float = 2e-6
    best: float = math.inf
    num_bad: int = 0
    reductions: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError(f"factor must be in (0, 1), got {self.factor}")
        if self.patience < 1 or self.lr <= 0 or self.stop_threshold <= 0:
            raise ValueError("patience, lr and stop_threshold must be positive")

    def step(self, val_loss: float) -> tuple[float, bool]:
        if not math.isfinite(val_loss):
            raise ValueError(f"validation loss is not finite: {val_loss}")
        if val_loss < self.best:
            self.best = val_loss
            self.num_bad = 0
        else:
            self.num_bad += 1
            if self.num_bad >= self.patience:
                self.lr *= self.factor
                self.reductions += 1
                self.num_bad = 0
        return self.lr, self.should_stop

    @property
    def should_stop(self) -> bool:
        # repeated *0.1 drifts by an ulp; 2e-4 * 0.1 * 0.1 must not count as below 2e-6
        return self.lr < self.stop_threshold * (1 - 1e-9)

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "factor": self.factor, "patience": self.patience,
            "stop_threshold": self.stop_threshold,
            "best": None if math.isinf(self.best) else self.best,
            "num_bad": self.num_bad, "reductions": self.reductions,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlateauScheduler":
        d = dict(d)
        d["best"] = math.inf if d["best"] is None else d["best"]
        return cls(**d)
