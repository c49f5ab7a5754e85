import numpy as np
import pytest


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max relative error with denominator max(|a|, |n|, 1e-8)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_diff(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar function f wrt every element
    of arr, perturbing it in place. Independent of any backward pass."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = f()
        flat[j] = orig - h
        fm = f()
        flat[j] = orig
        gf[j] = (fp - fm) / (2.0 * h)
    return g


def check_gradients(make_loss, tensors, tol: float = 1e-6, h: float = 1e-5,
                    zero_grad_tensors=()) -> float:
    """Compare tape gradients of make_loss() against finite differences.

    ``make_loss`` builds and returns the scalar loss tensor from scratch;
    ``tensors`` are the leaf tensors (float64) to differentiate.
    ``zero_grad_tensors`` are parameters whose true gradient is identically
    zero (e.g. a conv bias feeding a train-mode batch norm): those are held
    to an absolute bound because a relative recipe only measures noise there.
    Returns the worst relative error seen.
    """
    from ddanet.tensor import Graph

    with Graph() as g:
        loss = make_loss()
        g.backward(loss)
    analytic = {id(t): t.grad.copy() for t in list(tensors) + list(zero_grad_tensors)}

    worst = 0.0
    for t in tensors:
        num = finite_diff(lambda: make_loss().item(), t.data, h)
        err = rel_err(analytic[id(t)], num)
        worst = max(worst, err)
        assert err <= tol, f"gradient mismatch {err:.3e} > {tol:.1e} for shape {t.shape}"
    for t in zero_grad_tensors:
        num = finite_diff(lambda: make_loss().item(), t.data, h)
        assert np.max(np.abs(analytic[id(t)])) <= 1e-9
        assert np.max(np.abs(num)) <= 1e-6
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)
