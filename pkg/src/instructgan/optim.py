"""Bias-corrected Adam over named parameter tensors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamState:
    """First/second moment accumulators aligned with a parameter list."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr: float = 2e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    shapes = [np.asarray(p).shape for p in params]
    return AdamState(
        m=[np.zeros(s) for s in shapes],
        v=[np.zeros(s) for s in shapes],
        t=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(params, grads, state: AdamState):
    """One Adam update; returns (new_params, state) without mutating inputs' arrays.

    Deterministic: identical inputs produce bitwise-identical outputs.
    """
    params = [np.asarray(p, dtype=np.float64) for p in params]
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params = []
    new_m = []
    new_v = []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_params.append(p - update)
        new_m.append(m)
        new_v.append(v)
    state.m = new_m
    state.v = new_v
    state.t = t
    return new_params, state


@dataclass
class Adam:
    """Adam bound to an ordered dict of named Tensors, with global-norm clipping."""

    params: dict[str, Tensor]
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.names = list(self.params.keys())
        self.state = adam_init(
            [self.params[n].data for n in self.names],
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
        )

    def step(self, grads: list[np.ndarray]) -> float:
        """Apply one update from gradients aligned with the parameter order.

        Returns the pre-clip global gradient norm.
        """
        gnorm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        if self.clip_norm is not None and gnorm > self.clip_norm and gnorm > 0:
            grads = [g * (self.clip_norm / gnorm) for g in grads]
        new_params, _ = adam_step([self.params[n].data for n in self.names], grads, self.state)
        for name, arr in zip(self.names, new_params):
            self.params[name].data = arr
        return gnorm

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, name in enumerate(self.names):
            out[f"m/{name}"] = self.state.m[i]
            out[f"v/{name}"] = self.state.v[i]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int):
        self.state.m = [np.asarray(arrays[f"m/{n}"], dtype=np.float64) for n in self.names]
        self.state.v = [np.asarray(arrays[f"v/{n}"], dtype=np.float64) for n in self.names]
        self.state.t = int(t)
