"""Shared helpers for the test suite."""

import numpy as np

from fracmodal.engine import Tensor


def central_difference(loss_fn, tensor: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar-valued ``loss_fn`` w.r.t. one tensor.

    ``loss_fn`` takes no arguments and must re-run the full forward pass so
    the perturbed value is actually used.
    """
    def scalar():
        out = loss_fn()
        return float(out.data) if isinstance(out, Tensor) else float(out)

    flat = tensor.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = scalar()
        flat[i] = orig - h
        down = scalar()
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(tensor.data.shape)


def relative_gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max over entries of |a - n| / max(|a|, 1e-8)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    denom = np.maximum(np.abs(analytic), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
