from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"step": self.step,
                "m": {k: self.m[k].tolist() for k in sorted(self.m)},
                "v": {k: self.v[k].tolist() for k in sorted(self.v)}}

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        return cls(int(d["step"]), {k: np.array(x, dtype=float) for k, x in d["m"].items()},
                   {k: np.array(x, dtype=float) for k, x in d["v"].items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam. Returns new parameter arrays; ``state`` is updated in place."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    out = {}
    for k in sorted(params):
        g = grads[k]
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter '{k}' {params[k].shape}")
        m = state.m.get(k, np.zeros_like(g))
        v = state.v.get(k, np.zeros_like(g))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[k], state.v[k] = m, v
        out[k] = params[k] - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return out, state
