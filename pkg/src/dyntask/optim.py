"""RMSprop with a step-count decay schedule and decoupled-from-norm L2 decay.

The published settings (learning rate 0.1, squared-gradient decay 0.99,
decay by 10 at fixed step counts, weight decay 5e-5) are the defaults; the
decay points themselves are configurable so desk-scale runs can compress the
schedule proportionally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericsError


@dataclass
class OptimConfig:
    lr0: float = 0.1
    decay_points: tuple = (60_000, 80_000)
    decay_factor: float = 10.0
    rho: float = 0.99
    epsilon: float = 1e-8
    weight_decay: float = 5e-5

    def __post_init__(self):
        self.decay_points = tuple(int(p) for p in self.decay_points)
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if not 0.0 < self.rho < 1.0:
            raise ConfigError(f"rho must be in (0, 1), got {self.rho}")
        if any(b <= a for a, b in zip(self.decay_points, self.decay_points[1:])):
            raise ConfigError(f"decay_points must be strictly increasing: {self.decay_points}")


def lr_schedule(cfg: OptimConfig, step_index: int) -> float:
    """lr0 divided by decay_factor once per decay point <= step_index."""
    if step_index < 0:
        raise ConfigError(f"step_index must be >= 0, got {step_index}")
    hits = sum(1 for p in cfg.decay_points if p <= step_index)
    return cfg.lr0 / cfg.decay_factor ** hits


@dataclass
class RmspropState:
    """One squared-gradient accumulator per parameter tensor."""
    acc: dict = field(default_factory=dict)

    def accumulator(self, name: str, shape) -> np.ndarray:
        if name not in self.acc:
            self.acc[name] = np.zeros(shape)
        return self.acc[name]


def rmsprop_step(params: dict, grads: dict, state: RmspropState,
                 cfg: OptimConfig, step_index: int, decayed: set) -> None:
    """Apply one update in place to every entry of ``params``.

    ``decayed`` names the parameters that receive L2 weight decay (weight
    matrices and filters only). All gradients are validated before anything
    is mutated, so a non-finite gradient aborts with the state untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter '{name}' "
                                f"at step {step_index}")
    lr = lr_schedule(cfg, step_index)
    for name, p in params.items():
        g = grads[name]
        if cfg.weight_decay and name in decayed:
            g = g + cfg.weight_decay * p
        acc = state.accumulator(name, p.shape)
        acc *= cfg.rho
        acc += (1.0 - cfg.rho) * g * g
        p -= lr * g / (np.sqrt(acc) + cfg.epsilon)
