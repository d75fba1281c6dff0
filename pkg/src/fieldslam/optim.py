"""Flat-vector Adam optimizer used for field parameters and pose twists."""

from __future__ import annotations

import math

import numpy as np


class Adam:
    """Standard Adam on a flat float64 parameter vector (updates in place)."""

    def __init__(self, size, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.step_count = 0

    def step(self, params, grads, lr=None):
        """Apply one update to `params` (modified in place).

        Args:
            params: (P,) parameter vector, updated in place.
            grads: (P,) gradient vector.
            lr: optional per-step learning rate override.
        """
        self.step_count += 1
        rate = self.lr if lr is None else lr
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads ** 2
        m_hat = self.m / (1.0 - self.beta1 ** self.step_count)
        v_hat = self.v / (1.0 - self.beta2 ** self.step_count)
        params -= rate * m_hat / (np.sqrt(v_hat) + self.eps)


def cosine_decay(base_lr, step, total_steps, floor=0.0):
    """Cosine learning-rate schedule from base_lr down to floor."""
    if total_steps <= 1:
        return base_lr
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return floor + 0.5 * (base_lr - floor) * (1.0 + math.cos(math.pi * frac))
