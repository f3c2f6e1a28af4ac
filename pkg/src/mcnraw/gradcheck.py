"""Central finite-difference gradient checking."""
import numpy as np

from .tensor import NumericError, Tensor, backward


def numerical_gradient(fn, x: np.ndarray, eps: float, indices=None) -> np.ndarray:
    """Central differences of scalar ``fn(x)`` at the given flat indices."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    grad = np.zeros(flat.size)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn(x)
        flat[i] = orig - eps
        fm = fn(x)
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * eps)
    return grad.reshape(x.shape)


def check_gradients(graph_builder, input: Tensor, eps: float = 1e-3, indices=None,
                    floor: float = 1e-8) -> float:
    """Max relative error between reverse-mode and finite-difference gradients.

    ``graph_builder`` maps a Tensor to a scalar Tensor. The relative error per
    element is ``|analytic - numeric| / max(|numeric|, floor)``. ``indices``
    optionally restricts the comparison to a subset of flat positions.

    Central differences carry round-off of roughly ``ulp(f) / eps``, so
    gradients far below that cannot be resolved; ``floor`` should sit above it.
    """
    base = np.array(input.data, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = graph_builder(x)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("graph_builder produced a non-finite output")
    backward(out)
    analytic = np.zeros_like(base) if x.grad is None else x.grad

    def scalar(arr):
        val = graph_builder(Tensor(arr.copy())).data
        if not np.all(np.isfinite(val)):
            raise NumericError("non-finite value during finite differencing")
        return float(val)

    numeric = numerical_gradient(scalar, base, eps, indices)
    a = analytic.reshape(-1)
    n = numeric.reshape(-1)
    sel = np.arange(n.size) if indices is None else np.asarray(list(indices))
    if sel.size == 0:
        return 0.0
    err = np.abs(a[sel] - n[sel]) / np.maximum(np.abs(n[sel]), floor)
    return float(err.max())
