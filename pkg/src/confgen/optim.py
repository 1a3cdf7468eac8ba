"""Named parameter sets, Adam updates, and finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor


class OptimizationError(RuntimeError):
    """Raised when an update cannot proceed (non-finite gradients)."""


class ParameterStore:
    """Named parameter tensors plus per-parameter Adam state.

    Names are unique; insertion order is the canonical parameter order used
    by checkpoints and gradient checks.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(value, dtype=np.float64))
        self.params[name] = t
        self.adam_m[name] = np.zeros_like(t.data)
        self.adam_v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def num_values(self) -> int:
        return sum(t.size for t in self.params.values())

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_values(self, values: Mapping[str, np.ndarray]):
        if set(values) != set(self.params):
            missing = set(self.params) - set(values)
            extra = set(values) - set(self.params)
            raise ValueError(f"parameter name mismatch (missing={missing}, extra={extra})")
        for k, v in values.items():
            arr = np.asarray(v, dtype=np.float64)
            if arr.shape != self.params[k].data.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {self.params[k].data.shape}")
            self.params[k].data = arr.copy()


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    """uniform(-s, s) with s = 1/sqrt(fan_in)."""
    s = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-s, s, size=shape)


def adam_step(
    store: ParameterStore,
    grads: Mapping[str, np.ndarray | Tensor],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One bias-corrected Adam update over all parameters, in place."""
    gs = {}
    for name in store.params:
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g.shape != store.params[name].data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            raise OptimizationError(f"non-finite gradient for parameter {name}")
        gs[name] = g
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in gs.items():
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        store.params[name].data = store.params[name].data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def gradient_check(
    f: Callable[[ParameterStore], Tensor],
    store: ParameterStore,
    h: float = 1e-5,
    param_names: list[str] | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    The relative error per coordinate uses max(|analytic|, |numeric|, 1e-8)
    as the denominator. ``param_names`` restricts the sweep; evaluation cost
    is two function calls per coordinate.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    with Tape():
        out = f(store)
        ad.require_finite(out, "gradient_check objective")
        analytic = ad.grad(out, store.tensors())
    analytic_by_name = dict(zip(store.names(), (g.data for g in analytic)))

    names = param_names if param_names is not None else store.names()
    worst = 0.0
    for name in names:
        p = store.params[name].data
        a = analytic_by_name[name]
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f(store).item()
            flat[i] = orig - h
            f_minus = f(store).item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ad.NonFiniteError(f"objective non-finite while perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * h)
            ai = a.reshape(-1)[i]
            rel = abs(ai - numeric) / max(abs(ai), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
