"""Independent oracles shared by the test modules."""
import numpy as np


def fd_grad(f, params, h=1e-3):
    """Central finite differences of scalar ``f(dict)`` w.r.t. every entry."""
    out = {}
    for k, v in params.items():
        g = np.zeros_like(v, dtype=np.float64)
        for idx in np.ndindex(v.shape):
            plus = {n: a.copy() for n, a in params.items()}
            minus = {n: a.copy() for n, a in params.items()}
            plus[k][idx] += h
            minus[k][idx] -= h
            g[idx] = (f(plus) - f(minus)) / (2 * h)
        out[k] = g
    return out


def rel_err(a, b, floor=1e-8):
    """Relative error of two gradient dicts as flat vectors."""
    va = np.concatenate([np.ravel(a[k]) for k in sorted(a)])
    vb = np.concatenate([np.ravel(b[k]) for k in sorted(b)])
    return float(np.linalg.norm(va - vb) / max(np.linalg.norm(va), np.linalg.norm(vb), floor))


def value(x):
    return float(getattr(x, "value", x))
