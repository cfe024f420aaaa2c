import numpy as np
import pytest

from mimforge.tensor import no_grad


def numerical_grad(f, x: np.ndarray, h: float = 1e-5, stencil: int = 3) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. the array ``x`` (perturbed in place).

    ``stencil=5`` uses the fourth-order five-point formula, which tolerates a
    larger ``h`` and so loses less to round-off where the gradient is tiny.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            if stencil == 5:
                flat[i] = old + 2 * h
                fp2 = f()
                flat[i] = old - 2 * h
                fm2 = f()
                g[i] = (8 * (fp - fm) - (fp2 - fm2)) / (12 * h)
            else:
                g[i] = (fp - fm) / (2 * h)
            flat[i] = old
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
