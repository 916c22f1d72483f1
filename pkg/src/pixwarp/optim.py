"""Parameter containers, the Adam optimizer, and the cosine learning-rate rule."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class OptimizerError(RuntimeError):
    """A trainable parameter is in a state the optimizer cannot use."""


class ModelState:
    """Named parameter map plus a step counter.

    Trainable tensors carry requires_grad=True; buffers such as batchnorm
    running statistics are stored alongside with requires_grad=False.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.step = 0

    def add(self, name, data, trainable=True):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=trainable)
        self.params[name] = t
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def trainable(self):
        return {n: t for n, t in self.params.items() if t.requires_grad}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def freeze(self):
        """Mark every parameter non-trainable (used for the upstream model)."""
        for t in self.params.values():
            t.requires_grad = False

    def num_parameters(self, trainable_only=False):
        items = self.trainable().values() if trainable_only else self.params.values()
        return sum(t.data.size for t in items)

    def copy(self):
        out = ModelState()
        for name, t in self.params.items():
            out.add(name, t.data.copy(), trainable=t.requires_grad)
        out.step = self.step
        return out


class AdamState:
    """First/second moment buffers and hyperparameters for Adam."""

    def __init__(self, model: ModelState, base_lr=1e-3, beta1=0.9, beta2=0.999,
                 eps=1e-8, total_steps=None, min_lr=0.0):
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ValueError(f"Adam betas must lie in (0, 1), got {beta1}, {beta2}")
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.base_lr = base_lr
        self.total_steps = total_steps
        self.min_lr = min_lr
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in model.trainable().items()}
        self.v = {n: np.zeros_like(p.data) for n, p in model.trainable().items()}

    def lr_at(self, step):
        if self.total_steps is None:
            return self.base_lr
        return cosine_lr(step, self.total_steps, self.base_lr, self.min_lr)


def adam_step(model: ModelState, opt: AdamState, lr=None):
    """One bias-corrected Adam update over all trainable parameters.

    Gradients must be populated; they are cleared afterwards. Returns the
    learning rate that was applied.
    """
    if lr is None:
        lr = opt.lr_at(model.step)
    opt.t += 1
    b1, b2 = opt.beta1, opt.beta2
    bc1 = 1.0 - b1 ** opt.t
    bc2 = 1.0 - b2 ** opt.t
    for name, p in model.trainable().items():
        if p.grad is None:
            raise OptimizerError(f"trainable parameter {name!r} has no gradient")
        g = p.grad
        m = opt.m[name]
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
        p.data = p.data - np.float32(lr) * update.astype(np.float32)
    model.zero_grad()
    model.step += 1
    return lr


def cosine_lr(step, total, base, min_lr=0.0):
    """Cosine annealing: base at step 0, min_lr at step == total.

    Steps past `total` clamp to min_lr.
    """
    if step < 0:
        raise ValueError(f"negative step {step}")
    if step >= total:
        return min_lr
    return min_lr + 0.5 * (base - min_lr) * (1.0 + math.cos(math.pi * step / total))
