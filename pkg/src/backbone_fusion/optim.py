"""Decoupled-weight-decay Adam with parameter groups and a warmup/decay schedule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


def linear_warmup_decay(step: int, total: int, warmup: int) -> float:
    """Multiplier in [0, 1]: linear ramp over ``warmup`` steps, then linear decay to 0 at ``total``."""
    if warmup > 0 and step < warmup:
        return (step + 1) / warmup
    if total <= warmup:
        return 1.0
    return max(0.0, (total - step) / (total - warmup))


@dataclass
class ParamGroup:
    names: list[str]
    params: list[Tensor]
    lr: float
    weight_decay: float


class AdamW:
    """AdamW over named parameters.

    Parameters whose gradient is missing on a step are left untouched (no
    decay, no moment update), so toggled-off objectives cannot move their heads.
    """

    def __init__(self, groups: list[ParamGroup], betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = groups
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, grads: dict[int, np.ndarray], lr_scale: float = 1.0) -> None:
        """``grads`` maps ``id(param)`` to its gradient array."""
        self.step_count += 1
        for g in self.groups:
            lr = g.lr * lr_scale
            for name, p in zip(g.names, g.params):
                grad = grads.get(id(p))
                if grad is None:
                    continue
                grad = grad.astype(np.float64)
                m = self.m.get(name)
                if m is None:
                    m = self.m[name] = np.zeros(p.shape)
                    self.v[name] = np.zeros(p.shape)
                    self.t[name] = 0
                v = self.v[name]
                self.t[name] += 1
                t = self.t[name]
                m *= self.b1
                m += (1 - self.b1) * grad
                v *= self.b2
                v += (1 - self.b2) * grad * grad
                mhat = m / (1 - self.b1**t)
                vhat = v / (1 - self.b2**t)
                upd = mhat / (np.sqrt(vhat) + self.eps)
                if g.weight_decay and p.ndim >= 2:
                    upd = upd + g.weight_decay * p.data
                p.data = (p.data - lr * upd).astype(p.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for name in sorted(self.m):
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
            out[f"t/{name}"] = np.asarray(self.t[name], dtype=np.int64)
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for key, val in state.items():
            kind, name = key.split("/", 1)
            if kind == "t":
                self.t[name] = int(val)
            else:
                getattr(self, kind)[name] = np.array(val, dtype=np.float64)
