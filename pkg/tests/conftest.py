import numpy as np
import pytest

from crossview.numeric import Tensor, backward

FD_STEP = 1e-5
FD_REL_TOL = 1e-3
# gradients smaller than this are compared absolutely (central differences resolve ~1e-10)
FD_FLOOR = 1e-6


def fd_max_rel_error(loss_fn, arrays, wrt=None, rng=None, max_entries=None):
    """Largest elementwise relative error between autodiff and central differences.

    ``loss_fn`` maps a list of Tensors to a scalar Tensor. ``wrt`` lists the
    indices of ``arrays`` to differentiate; ``max_entries`` subsamples
    coordinates of large inputs.
    """
    wrt = range(len(arrays)) if wrt is None else wrt
    rng = rng or np.random.default_rng(0)
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=i in wrt) for i, a in enumerate(arrays)]
    loss = loss_fn(tensors)
    backward(loss)
    worst = 0.0
    for i in wrt:
        t = tensors[i]
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = np.arange(t.data.size)
        if max_entries is not None and flat.size > max_entries:
            flat = rng.choice(flat, max_entries, replace=False)
        for k in flat:
            idx = np.unravel_index(k, t.data.shape)
            base = [Tensor(np.array(a, dtype=np.float64)) for a in arrays]
            orig = base[i].data[idx]
            base[i].data[idx] = orig + FD_STEP
            up = float(loss_fn(base).data)
            base[i].data[idx] = orig - FD_STEP
            down = float(loss_fn(base).data)
            fd = (up - down) / (2 * FD_STEP)
            err = abs(g[idx] - fd) / max(abs(g[idx]), abs(fd), FD_FLOOR)
            worst = max(worst, err)
    return worst


@pytest.fixture
def fd():
    return fd_max_rel_error
