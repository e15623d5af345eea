"""AdamW with named parameter groups."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter


@dataclass
class ParamGroup:
    name: str
    params: list[Parameter]
    lr: float


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)  # per-parameter update count
    step: int = 0


class AdamW:
    """Adam with decoupled weight decay.

    Each update applies ``p -= lr * weight_decay * p`` and then the bias-corrected
    adaptive step. Frozen parameters are skipped entirely, moments included.
    Bias correction uses the parameter's own update count, so a group unfrozen
    late starts with a properly corrected first step.
    """

    def __init__(self, groups: list[ParamGroup], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        names = [p.name for g in groups for p in g.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique across groups")
        self.groups = groups
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_scale = 1.0
        self.state = OptimizerState()

    def parameters(self) -> list[Parameter]:
        return [p for g in self.groups for p in g.params]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def clip_grad_norm(self, max_norm: float) -> float:
        """Scale live gradients so their global L2 norm is at most ``max_norm``."""
        live = [p for p in self.parameters() if not p.frozen and p._grad is not None]
        total = float(np.sqrt(sum(float(np.sum(p._grad.astype(np.float64) ** 2)) for p in live)))
        if max_norm > 0 and total > max_norm:
            factor = max_norm / (total + 1e-6)
            for p in live:
                p._grad = p._grad * p.dtype.type(factor)
        return total

    def step(self) -> None:
        st = self.state
        st.step += 1
        b1, b2 = self.beta1, self.beta2
        for group in self.groups:
            lr = group.lr * self.lr_scale
            for p in group.params:
                if p.frozen:
                    continue
                g = p.grad
                if g.shape != p.shape:
                    raise ValueError(f"{p.name}: gradient shape {g.shape} != {p.shape}")
                if p.name not in st.m:
                    st.m[p.name] = np.zeros_like(p.data)
                    st.v[p.name] = np.zeros_like(p.data)
                    st.steps[p.name] = 0
                m, v = st.m[p.name], st.v[p.name]
                if m.shape != p.shape:
                    raise ValueError(f"{p.name}: optimizer state shape {m.shape} != {p.shape}")
                t = st.steps[p.name] = st.steps[p.name] + 1
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * (g * g)
                m_hat = m / (1 - b1 ** t)
                v_hat = v / (1 - b2 ** t)
                dt = p.dtype.type
                if self.weight_decay:
                    p.data = p.data - dt(lr * self.weight_decay) * p.data
                p.data = p.data - (dt(lr) * m_hat / (np.sqrt(v_hat) + dt(self.eps))).astype(p.dtype)
