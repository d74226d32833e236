"""AdamW with decoupled weight decay, step schedule, gradient clipping."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class AdamW:
    """Adam with decoupled weight decay.

    Decay is applied directly to the parameters (p -= lr * wd * p) after the
    Adam update, so with zero gradients parameters still shrink by the factor
    (1 - lr * wd) each step.  Bias correction follows the standard schedule.
    """

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.params = list(params)
        if not all(isinstance(p, Tensor) for p in self.params):
            raise TypeError("AdamW expects Tensor parameters")
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                g = 0.0
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * update
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data


class StepLR:
    """Piecewise-constant decay: lr(epoch) = base * factor ** (epoch // step)."""

    def __init__(self, base_lr: float = 1e-4, step_epochs: int = 17, factor: float = 0.5):
        if step_epochs < 1:
            raise ValueError("step_epochs must be >= 1")
        self.base_lr = float(base_lr)
        self.step_epochs = int(step_epochs)
        self.factor = float(factor)

    def lr_at(self, epoch: int) -> float:
        if epoch < 0:
            raise ValueError("epoch must be nonnegative")
        return self.base_lr * self.factor ** (epoch // self.step_epochs)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients so their joint 2-norm is at most max_norm.

    Returns the pre-clip norm.  Parameters without gradients contribute zero.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad)))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm
