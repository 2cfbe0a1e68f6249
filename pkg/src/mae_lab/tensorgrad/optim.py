from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericOverflowError


@dataclass
class AdamWState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adamw_step(params, grads, state):
    """One AdamW update with bias correction and decoupled weight decay.

    ``params`` is a sequence of Tensors, ``grads`` a matching sequence of
    arrays (or a mapping from param to array). Parameter data is replaced by
    the updated values; moments are keyed by position in ``params``.
    """
    if isinstance(grads, dict):
        grads = [grads[p] for p in params]
    if len(grads) != len(params):
        raise ValueError("params and grads differ in length")
    if state.step_count < 0:
        raise ValueError("step_count must be non-negative")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} (param {i})")
        if not np.all(np.isfinite(g)):
            raise NumericOverflowError("adamw_step", f"non-finite gradient for param {i}")

    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    decay = 1.0 - state.lr * state.weight_decay
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.first_moment.get(i)
        v = state.second_moment.get(i)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[i] = m
        state.second_moment[i] = v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = p.data * decay - state.lr * update
    state.step_count = t
    return params, state
