"""Finite-difference gradient oracle shared by loss tests."""

import numpy as np
import torch


def central_difference_gradient(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Gradient of scalar fn at x by central differences, one entry at a time."""
    x = x.astype(np.float64).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(x))
        flat[i] = orig - h
        fm = float(fn(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def autograd_gradient(fn, x: np.ndarray) -> np.ndarray:
    """Gradient of scalar torch fn at x via autograd, in double precision."""
    t = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    out = fn(t)
    out.backward()
    return t.grad.detach().numpy()


def relative_gradient_error(g_ref: np.ndarray, g_test: np.ndarray) -> float:
    denom = max(np.abs(g_ref).max(), 1e-12)
    return float(np.abs(g_ref - g_test).max() / denom)
