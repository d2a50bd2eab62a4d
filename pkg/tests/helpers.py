"""Independent numerical oracles shared by several test files."""

import numpy as np

from flowrecon.engine import Tensor, no_grad


def fd_jacobian(f, x, step=1e-6):
    """Central-difference Jacobian of ``f`` (flat R^n -> R^n) at the flat vector ``x``."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((f(x + e) - f(x - e)) / (2 * step))
    return np.stack(cols, axis=1)


def fd_logdet(layer_forward, x, step=1e-6):
    """ln|det J| of a single-sample map given as ``layer_forward(batched array) -> array``."""
    shape = x.shape

    def flat(v):
        with no_grad():
            out = layer_forward(Tensor(v.reshape((1,) + shape)))
        return np.asarray(out, dtype=np.float64).reshape(-1)

    J = fd_jacobian(flat, x.reshape(-1), step)
    sign, logdet = np.linalg.slogdet(J)
    assert sign != 0
    return logdet
