"""Finite-difference gradient checking against the autodiff engine."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["numerical_gradient", "check_gradients"]


def numerical_gradient(fn, inputs, index, step=1e-5):
    """Central-difference gradient of scalar ``fn(*inputs)`` w.r.t. one input.

    ``inputs`` are float64 numpy arrays; ``fn`` must rebuild its graph from
    raw arrays on every call so the probe never reuses autodiff state.
    """
    base = [np.asarray(a, dtype=np.float64) for a in inputs]
    target = base[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = target[idx]
        target[idx] = orig + step
        hi = float(fn(*base))
        target[idx] = orig - step
        lo = float(fn(*base))
        target[idx] = orig
        grad[idx] = (hi - lo) / (2.0 * step)
        it.iternext()
    return grad


def check_gradients(build, arrays, step=1e-5, rtol=1e-4, atol=1e-6):
    """Assert autodiff gradients of a scalar graph match finite differences.

    ``build`` maps a list of Tensors (requires_grad leaves, float64) to a
    scalar Tensor.  Returns the analytic gradients for further inspection.
    """
    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = build(*leaves)
    out.backward()
    analytic = [leaf.grad.copy() for leaf in leaves]

    def as_scalar(*raw):
        probes = [Tensor(a, dtype=np.float64) for a in raw]
        return build(*probes).item()

    for i, leaf in enumerate(leaves):
        numeric = numerical_gradient(as_scalar, [l.data for l in leaves], i, step=step)
        if not np.allclose(analytic[i], numeric, rtol=rtol, atol=atol):
            err = np.abs(analytic[i] - numeric).max()
            raise AssertionError(
                f"gradient mismatch on input {i}: max abs error {err:.3e} "
                f"(rtol={rtol}, atol={atol})"
            )
    return analytic
