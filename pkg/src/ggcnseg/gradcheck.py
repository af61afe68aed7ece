"""Central-difference gradient checking."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STEP = 1e-5


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)``; 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    if den == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / den)


def numerical_grad(f, arrays, step: float = STEP) -> list:
    """Central differences of scalar ``f()`` with respect to each array, perturbed in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + step
            fp = f()
            arr[i] = old - step
            fm = f()
            arr[i] = old
            g[i] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def check_function(fn, inputs, seed: int = 0, step: float = STEP) -> float:
    """Relative error between analytic and numerical gradients of ``sum(R * fn(*inputs))``.

    ``inputs`` are numpy arrays; ``R`` is a fixed random weighting so every
    output element contributes to the scalar.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    probe = fn(*[Tensor(a, _check=False) for a in arrays])
    weights = rng.standard_normal(probe.shape) if probe.size > 1 else np.ones(probe.shape)

    def scalar(out):
        return ad.tensor_sum(ad.mul(out, Tensor(weights, _check=False))) if out.size > 1 else out

    leaves = [Tensor(a, requires_grad=True, _check=False) for a in arrays]
    ad.backward(scalar(fn(*leaves)))
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    def f():
        with ad.no_grad():
            return scalar(fn(*[Tensor(a, _check=False) for a in arrays])).item()

    numeric = numerical_grad(f, arrays, step)
    return rel_error(np.concatenate([a.ravel() for a in analytic]), np.concatenate([n.ravel() for n in numeric]))


def check_directional(loss_fn, params: dict, seed: int = 0, step: float = STEP) -> float:
    """Directional-derivative check over all parameters along one random unit direction.

    The direction is normalised over the concatenated parameters, so ``step``
    is the actual displacement in parameter space regardless of model size.

    ``loss_fn()`` must rebuild the loss from the current ``params`` data.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.zero_grad()
    ad.backward(loss_fn())
    direction = {k: rng.standard_normal(p.shape) for k, p in params.items()}
    norm = np.sqrt(sum(float((d * d).sum()) for d in direction.values()))
    direction = {k: d / norm for k, d in direction.items()}
    analytic = sum(float((p.grad * direction[k]).sum()) for k, p in params.items())
    base = {k: p.data.copy() for k, p in params.items()}

    def at(scale):
        for k, p in params.items():
            p.data = base[k] + scale * direction[k]
        with ad.no_grad():
            return loss_fn().item()

    numeric = (at(step) - at(-step)) / (2 * step)
    for k, p in params.items():
        p.data = base[k]
        p.zero_grad()
    return rel_error(np.array([analytic]), np.array([numeric]))
