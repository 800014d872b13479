"""In-place optimizers over ``dict[str, np.ndarray]`` parameter stores."""

from __future__ import annotations

from collections.abc import Mapping

import numpy as np


class SGD:
    """SGD with heavy-ball momentum; L2 weight decay is folded into the gradient."""

    def __init__(self, params: Mapping[str, np.ndarray], momentum: float = 0.9, weight_decay: float = 1e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        for k, g in grads.items():
            d = g + self.weight_decay * params[k] if self.weight_decay else g
            buf = self.buf[k]
            buf *= self.momentum
            buf += d
            params[k] -= (lr * buf).astype(params[k].dtype)

    def state(self) -> dict[str, np.ndarray]:
        return {f"opt/buf/{k}": v for k, v in self.buf.items()}

    def load_state(self, sections: Mapping[str, np.ndarray]) -> None:
        for k in self.buf:
            self.buf[k] = np.array(sections[f"opt/buf/{k}"], dtype=self.buf[k].dtype)


class Adam:
    def __init__(self, params: Mapping[str, np.ndarray], betas=(0.9, 0.999), eps: float = 1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            params[k] -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {"opt/t": np.array(float(self.t))}
        out.update({f"opt/m/{k}": v for k, v in self.m.items()})
        out.update({f"opt/v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, sections: Mapping[str, np.ndarray]) -> None:
        self.t = int(sections["opt/t"])
        for k in self.m:
            self.m[k] = np.array(sections[f"opt/m/{k}"], dtype=self.m[k].dtype)
            self.v[k] = np.array(sections[f"opt/v/{k}"], dtype=self.v[k].dtype)
