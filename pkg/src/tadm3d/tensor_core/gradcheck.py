"""Central finite-difference gradient checking.

Both the analytic and the numeric gradient are evaluated in float64: the
function under test sees float64 copies of its inputs, so numpy promotion
lifts the whole forward pass (float32 parameters included).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward


def relative_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(fn, inputs, index, step=1e-3, elements=None):
    """Central differences of scalar ``fn(*inputs)`` w.r.t. ``inputs[index]``."""
    x = inputs[index].data
    flat = x.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    which = range(flat.size) if elements is None else elements
    for i in which:
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn(*inputs).data)
        flat[i] = orig - step
        fm = float(fn(*inputs).data)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(x.shape)


def grad_check(fn, inputs, step=1e-3, max_elements=None, seed=0):
    """Max relative error between backprop and central differences.

    ``fn`` maps the input tensors to a scalar tensor. With ``max_elements``
    only that many randomly chosen entries per input are perturbed (the
    analytic gradient is still computed in full).
    """
    inputs = [Tensor(np.array(t.data, dtype=np.float64), requires_grad=True) for t in inputs]
    out = fn(*inputs)
    backward(out)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if max_elements is not None and t.size > max_elements:
            elems = np.sort(rng.choice(t.size, size=max_elements, replace=False))
        else:
            elems = None
        numeric = numeric_gradient(fn, inputs, i, step, elems)
        a = analytic.reshape(-1)
        n = numeric.reshape(-1)
        if elems is not None:
            a, n = a[elems], n[elems]
        if a.size:
            worst = max(worst, float(relative_error(a, n).max()))
    return worst
