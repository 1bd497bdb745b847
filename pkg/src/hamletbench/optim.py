"""Named parameter registry with freeze flags and an Adam optimizer."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeMismatch, Tensor


class ParamRegistry:
    """Named parameter tensors, per-parameter frozen flag and Adam moments.

    Frozen parameters never receive optimizer updates and stay bit-identical
    across any number of steps.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen: dict[str, bool] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0
        # scratch for inference-path array caches; valid because updates mutate
        # parameter arrays in place (never rebind Tensor.data)
        self.cache: dict = {}

    def add(self, name: str, data, frozen: bool = False) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(data, requires_grad=not frozen, name=name)
        self._params[name] = t
        self._frozen[name] = bool(frozen)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def is_frozen(self, name: str) -> bool:
        return self._frozen[name]

    def set_frozen(self, name: str, frozen: bool):
        self._frozen[name] = bool(frozen)
        self._params[name].requires_grad = not frozen

    def freeze_prefix(self, prefix: str, frozen: bool = True):
        for name in self._params:
            if name.startswith(prefix):
                self.set_frozen(name, frozen)

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def trainable(self):
        return {n: t for n, t in self._params.items() if not self._frozen[n]}

    def state_snapshot(self):
        """Bit-exact copies of every parameter, for freeze-contract checks."""
        return {n: t.data.copy() for n, t in self._params.items()}


def adam_step(registry: ParamRegistry, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, step_index: int | None = None):
    """Bias-corrected Adam update over the registry's unfrozen parameters.

    Gradients are read from each parameter's ``grad`` slot; parameters with no
    gradient (or frozen ones) are left untouched.
    """
    if step_index is None:
        registry.step_count += 1
        step_index = registry.step_count
    if step_index < 1:
        raise ValueError("step_index must be >= 1")
    b1t = 1.0 - beta1**step_index
    b2t = 1.0 - beta2**step_index
    for name, p in registry.items():
        if registry.is_frozen(name) or p.grad is None:
            continue
        g = p.grad
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
        if name not in registry._m:
            registry._m[name] = np.zeros_like(p.data)
            registry._v[name] = np.zeros_like(p.data)
        m = registry._m[name]
        v = registry._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / b1t
        vhat = v / b2t
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)
    return registry
