import numpy as np

from stagewise import tensor as T
from stagewise.tensor import Tensor


def numeric_grad(f, arr: np.ndarray, idx, h: float = 1e-5) -> float:
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    arr[idx] = old - h
    down = f()
    arr[idx] = old
    return (up - down) / (2 * h)


def gradcheck(build_loss, arrays: dict, rng=None, max_entries: int | None = None, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst per-tensor relative error between autodiff and central differences.

    ``build_loss(P)`` maps a dict of Tensors to a scalar Tensor.  The error for
    one tensor is ``max|a - n| / max(max|a|, max|n|, floor)`` over the checked
    entries; ``max_entries`` samples that many entries per tensor.  The floor
    sits above central-difference roundoff (about eps * |loss| / h), so a
    gradient that is exactly zero is not scored on noise alone.
    """
    P = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    loss = build_loss(P)
    T.backward(loss)

    def f():
        with T.no_grad():
            return float(build_loss({k: Tensor(v) for k, v in arrays.items()}).data)

    worst = 0.0
    for name, arr in arrays.items():
        auto = P[name].grad if P[name].grad is not None else np.zeros_like(arr)
        flat = list(np.ndindex(arr.shape))
        if max_entries is not None and len(flat) > max_entries:
            pick = rng.choice(len(flat), max_entries, replace=False)
            flat = [flat[i] for i in pick]
        num = np.array([numeric_grad(f, arr, i, h) for i in flat])
        a = np.array([auto[i] for i in flat])
        scale = max(np.abs(a).max(), np.abs(num).max(), floor)
        worst = max(worst, float(np.abs(a - num).max() / scale))
    return worst
