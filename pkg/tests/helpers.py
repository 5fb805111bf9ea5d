"""Shared test utilities: finite-difference gradients and tiny fixtures."""

from __future__ import annotations

import numpy as np

from primekit.tensor import Tensor, backward


def numerical_gradient(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function at x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def check_gradients(build_loss, params: dict[str, np.ndarray], eps: float = 1e-5, rtol: float = 1e-4) -> float:
    """Compare analytic gradients of build_loss(tensors) against central
    finite differences; returns the worst relative error.

    build_loss receives a dict name -> Tensor (requires_grad) and must
    return a scalar Tensor using only those tensors and constants.
    """
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in params.items()}
    loss = build_loss(tensors)
    backward(loss)

    worst = 0.0
    for name, arr in params.items():
        analytic = tensors[name].grad
        assert analytic is not None, f"no gradient reached {name}"

        def f(x, _name=name):
            local = {k: Tensor(v.copy()) for k, v in params.items()}
            local[_name] = Tensor(x.copy())
            return float(build_loss(local).data)

        numeric = numerical_gradient(f, arr.copy(), eps=eps)
        denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
        rel = float(np.max(np.abs(analytic - numeric) / denom))
        worst = max(worst, rel)
        assert rel < rtol, f"gradient mismatch for {name}: rel err {rel:.3e}"
    return worst
