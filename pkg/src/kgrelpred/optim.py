"""Named learned tensors with gradient slots, plus the Adam update."""

from __future__ import annotations

import numpy as np

from . import autodiff


class Parameter:
    __slots__ = ("value", "grad", "m1", "m2")

    def __init__(self, value: np.ndarray):
        self.value = np.array(value, dtype=np.float64)  # owned copy
        self.grad = np.zeros_like(self.value)
        self.m1 = np.zeros_like(self.value)
        self.m2 = np.zeros_like(self.value)


class ParameterStore:
    """Ordered map of parameter name -> (value, gradient, Adam moments)."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self.step_count = 0

    def create(self, name: str, value: np.ndarray) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = Parameter(value)
        self._params[name] = p
        return p

    def glorot(self, name: str, shape: tuple[int, ...], rng: np.random.Generator) -> Parameter:
        """Uniform init in ±sqrt(6 / (fan_in + fan_out)); 1-d shapes get zeros."""
        if len(shape) == 1:
            return self.create(name, np.zeros(shape))
        fan_in, fan_out = shape[0], shape[1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return self.create(name, rng.uniform(-bound, bound, size=shape))

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def leaves(self) -> dict[str, autodiff.Tensor]:
        """Fresh traced leaf tensors over the parameter values, one per pass.

        Each pass owns its leaves (and thus its gradient buffers); call
        :meth:`accumulate` afterwards to fold the harvested gradients in.
        """
        return {name: autodiff.leaf(p.value) for name, p in self._params.items()}

    def accumulate(self, leaves: dict[str, autodiff.Tensor]) -> None:
        for name, t in leaves.items():
            if t.grad is not None:
                self._params[name].grad += t.grad

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def total_sq_norm(self) -> dict[str, float]:
        return {name: float((p.value**2).sum()) for name, p in self._params.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            if name in self._params:
                p = self._params[name]
                if p.value.shape != value.shape:
                    raise ValueError(
                        f"shape mismatch for {name}: {p.value.shape} vs {value.shape}"
                    )
                p.value[...] = value
            else:
                self.create(name, value)


def adam_step(
    store: ParameterStore,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    l2_weight: float = 0.0,
    t: int | None = None,
) -> None:
    """One Adam update with bias correction over every parameter.

    L2 regularization enters as an added gradient term ``l2_weight * theta``
    before the moment updates. Gradients are zeroed afterwards.
    """
    if t is None:
        store.step_count += 1
        t = store.step_count
    if t < 1:
        raise ValueError("step index must be >= 1")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    scale = lr / c1
    root = np.sqrt(1.0 / c2)
    for _, p in store.items():
        g = p.grad
        if l2_weight:
            # in-place: the gradient buffer is zeroed below anyway
            g += l2_weight * p.value
        p.m1 *= beta1
        p.m1 += (1.0 - beta1) * g
        p.m2 *= beta2
        g *= g
        g *= 1.0 - beta2
        p.m2 += g
        denom = np.sqrt(p.m2, out=g)
        denom *= root
        denom += eps
        np.divide(p.m1, denom, out=denom)
        denom *= scale
        p.value -= denom
        p.grad[...] = 0.0
