"""Per-party optimizers: plain SGD, SGD with momentum, Adagrad, Adam.

Each party owns one optimizer instance covering all of its parameter tensors;
state never crosses party boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str  # sgd | momentum | adagrad | adam
    learning_rate: float
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    adagrad_eps: float = 1e-10

    def __post_init__(self):
        if self.kind not in ("sgd", "momentum", "adagrad", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for name in ("momentum", "beta1", "beta2"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ValueError(f"{name} must lie in [0, 1)")


@dataclass
class OptimizerState:
    t: int = 0
    slot1: list = field(default_factory=list)  # velocity / squared sums / first moment
    slot2: list = field(default_factory=list)  # second moment (adam only)


def init_optimizer(cfg: OptimizerConfig, params: list[np.ndarray]) -> OptimizerState:
    state = OptimizerState()
    if cfg.kind in ("momentum", "adagrad", "adam"):
        state.slot1 = [np.zeros_like(p) for p in params]
    if cfg.kind == "adam":
        state.slot2 = [np.zeros_like(p) for p in params]
    return state


def step(cfg: OptimizerConfig, state: OptimizerState, params: list[np.ndarray], grads: list[np.ndarray]):
    """Apply one update in place; increments the step counter by exactly one."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ValueError(f"grad {i} shape {g.shape} != param shape {params[i].shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in tensor {i} (shape {g.shape})")
    state.t += 1
    lr = cfg.learning_rate
    if cfg.kind == "sgd":
        for p, g in zip(params, grads):
            p -= lr * g
    elif cfg.kind == "momentum":
        for p, g, v in zip(params, grads, state.slot1):
            v *= cfg.momentum
            v += g
            p -= lr * v
    elif cfg.kind == "adagrad":
        for p, g, acc in zip(params, grads, state.slot1):
            acc += g * g
            p -= lr * g / (np.sqrt(acc) + cfg.adagrad_eps)
    else:  # adam
        t = state.t
        bc1 = 1.0 - cfg.beta1**t
        bc2 = 1.0 - cfg.beta2**t
        for p, g, m, v in zip(params, grads, state.slot1, state.slot2):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
