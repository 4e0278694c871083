"""Adaptive-moment optimizer state used behind ``optimizer = adam``."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    _pending: tuple | None = field(default=None, repr=False)

    def commit(self):
        # moments only advance once the whole step succeeded
        if self._pending is not None:
            self.m, self.v, self.t = self._pending
            self._pending = None


def adam_update(params, direction, state: AdamState, lr, b1=0.9, b2=0.999, eps=1e-8):
    t = state.t + 1
    m, v, new = {}, {}, {}
    for k, p in params.items():
        g = direction[k]
        m[k] = b1 * state.m.get(k, np.zeros_like(p)) + (1 - b1) * g
        v[k] = b2 * state.v.get(k, np.zeros_like(p)) + (1 - b2) * g * g
        mhat = m[k] / (1 - b1 ** t)
        vhat = v[k] / (1 - b2 ** t)
        new[k] = p - lr * mhat / (np.sqrt(vhat) + eps)
    state._pending = (m, v, t)
    return new
