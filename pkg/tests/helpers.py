"""Shared test utilities: central finite differences and rank correlation."""
import numpy as np
from scipy.stats import spearmanr

from vrpcc.autodiff import Tape, Tensor


def numeric_grad(fn, arrays, i, rel_step=1e-4):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[i]``; step relative to |x|, at least 1e-4."""
    x = arrays[i]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        j = it.multi_index
        h = rel_step * max(abs(x[j]), 1.0)
        orig = x[j]
        x[j] = orig + h
        up = fn(*arrays)
        x[j] = orig - h
        down = fn(*arrays)
        x[j] = orig
        grad[j] = (up - down) / (2 * h)
    return grad


def rel_error(a, b, floor=1e-8):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def check_op(build, arrays, tol=1e-4):
    """``build(tape, *tensors)`` returns a scalar tensor; compare every input's gradient."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    tape = Tape()
    loss = build(tape, *tensors)
    tape.backward(loss)

    def value(*xs):
        return float(build(Tape(), *[Tensor(x) for x in xs]).data)

    errors = []
    for i, t in enumerate(tensors):
        num = numeric_grad(value, arrays, i)
        analytic = t.grad if t.grad is not None else np.zeros_like(num)
        errors.append(rel_error(analytic, num))
    assert max(errors) <= tol, errors
    return max(errors)


def spearman(x, y) -> float:
    return float(spearmanr(x, y).statistic)
