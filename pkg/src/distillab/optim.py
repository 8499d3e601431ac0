"""Adam optimizer and the finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ArgumentError, NumericError, ShapeError
from .tensor import Tensor, record


@dataclass
class AdamState:
    """Bias-corrected Adam moments for one parameter list."""

    lr: float = 2.0e-4
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-6
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float | None = None) -> AdamState:
    """Apply one in-place Adam update; `lr` overrides state.lr for this step.

    All gradients are validated before anything is written, so a NaN grad
    leaves both params and state untouched.
    """
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params vs {len(grads)} grads")
    if (lr if lr is not None else state.lr) < 0:
        raise ArgumentError("adam_step: lr must be non-negative")
    grads = [np.asarray(g) for g in grads]
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"adam_step: param shape {p.shape} vs grad shape {g.shape}")
        if not np.isfinite(g).all():
            raise NumericError("adam_step: non-finite gradient; no update applied")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    step_lr = state.lr if lr is None else lr
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= step_lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return state


class Adam:
    """Convenience wrapper: tracks a parameter list and reads .grad buffers."""

    def __init__(self, params: Sequence[Tensor], lr: float = 2.0e-4,
                 beta1: float = 0.9, beta2: float = 0.98, epsilon: float = 1e-6):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def step(self, lr: float | None = None) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(self.params, grads, self.state, lr=lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def grad_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
               eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must build a scalar loss from `params` using tensor ops; params
    should be f64 for the stated tolerances to be meaningful. Relative
    error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    params = list(params)
    for p in params:
        p.requires_grad = True
        p.grad = None
    with record() as g:
        loss = f(params)
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: loss is not finite")
    g.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(params).data)
            flat[i] = orig - eps
            lo = float(f(params).data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError("grad_check: non-finite loss at perturbed point")
            numeric = (hi - lo) / (2.0 * eps)
            rel = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
            worst = max(worst, rel)
    return worst
