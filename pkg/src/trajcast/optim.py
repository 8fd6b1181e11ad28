"""Adaptive-moment optimizer with global gradient-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0  # 0 disables clipping
    skip_nonfinite: bool = True


@dataclass
class Adam:
    params: dict[str, Tensor]
    config: AdamConfig = field(default_factory=AdamConfig)

    def __post_init__(self):
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.skipped = 0

    def step(self, grads: dict[str, np.ndarray]) -> bool:
        """Apply one update. Returns False if skipped on non-finite input."""
        if any(not np.all(np.isfinite(g)) for g in grads.values()):
            if self.config.skip_nonfinite:
                self.skipped += 1
                return False
            raise FloatingPointError("non-finite gradient passed to optimizer")
        cfg = self.config
        if cfg.grad_clip > 0:
            total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if total > cfg.grad_clip:
                scale = cfg.grad_clip / total
                grads = {k: g * scale for k, g in grads.items()}
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1**t
        bc2 = 1.0 - cfg.beta2**t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * g
            v = self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * (g * g)
            p.data = p.data - cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        return True
