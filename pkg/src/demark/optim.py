"""AdamW with decoupled weight decay over a flat named-parameter dict."""

from dataclasses import dataclass, field
from typing import Dict, Set

import numpy as np


def _excluded_from_decay(name: str) -> bool:
    # normalization affine params and the attention temperature stay undecayed
    return ".ln1." in name or ".ln2." in name or name.endswith(".sigma")


@dataclass
class AdamWState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    no_decay: Set[str] = field(default_factory=set)


def init_adamw(named_params, lr: float = 3e-4, weight_decay: float = 1e-2,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamWState:
    state = AdamWState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                       weight_decay=weight_decay)
    for name, t in named_params.items():
        state.m[name] = np.zeros(t.shape, dtype=t.dtype)
        state.v[name] = np.zeros(t.shape, dtype=t.dtype)
        if _excluded_from_decay(name):
            state.no_decay.add(name)
    return state


def adamw_step(named_params, state: AdamWState) -> None:
    """One in-place update; a missing gradient counts as zero."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in sorted(named_params):
        p = named_params[name]
        g = p.grad
        if g is not None and not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name} at step {t}")
        m = state.m[name]
        v = state.v[name]
        if g is None:
            m *= state.beta1
            v *= state.beta2
        else:
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        update = m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay and name not in state.no_decay:
            update = update + state.weight_decay * p.data
        p.data -= (state.lr * update).astype(p.dtype, copy=False)
