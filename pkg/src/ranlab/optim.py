"""Adam with linear warm-up and cosine decay, over dicts of named arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    warmup_steps: int = 20
    cosine_decay: bool = True
    epochs: int = 30
    batch_size: int = 16

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ContractViolationError("learning_rate must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractViolationError("betas must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractViolationError("epochs >= 0 and batch_size >= 1")


def schedule_lr(cfg: OptimizerConfig, step: int, total_steps: int) -> float:
    """Learning rate at 0-based `step` of `total_steps`."""
    lr = cfg.learning_rate
    if cfg.warmup_steps > 0:
        lr *= min(1.0, (step + 1) / cfg.warmup_steps)
    if cfg.cosine_decay and total_steps > cfg.warmup_steps:
        progress = max(0, step - cfg.warmup_steps) / (total_steps - cfg.warmup_steps)
        lr *= 0.5 * (1.0 + np.cos(np.pi * min(1.0, progress)))
    return lr


@dataclass
class Adam:
    """Holds first/second moment state per parameter name."""

    cfg: OptimizerConfig
    total_steps: int
    step_count: int = 0
    _m: dict[str, np.ndarray] = field(default_factory=dict)
    _v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(
        self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]
    ) -> dict[str, np.ndarray]:
        """One update; returns a fresh dict of updated arrays."""
        self.step_count += 1
        t = self.step_count
        lr = schedule_lr(self.cfg, t - 1, self.total_steps)
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.eps
        out: dict[str, np.ndarray] = {}
        for name, value in params.items():
            g = grads[name]
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(value)
                self._v[name] = np.zeros_like(value)
            v = self._v[name]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self._m[name], self._v[name] = m, v
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            out[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps)
        return out
