"""Shared test helpers: finite-difference gradient checking and
independent linear-algebra oracles."""

import numpy as np

from aadkit.autodiff import Tensor, backward


def ridge_oracle_lstsq(x, s, lam):
    """Ridge solution via the augmented least-squares system [X; sqrt(lam) I]
    (independent of the normal-equations route)."""
    n = x.shape[1]
    aug = np.vstack([x, np.sqrt(lam) * np.eye(n)])
    rhs = np.concatenate([s, np.zeros(n)])
    sol, *_ = np.linalg.lstsq(aug, rhs, rcond=None)
    return sol


def fd_gradient(scalar_fn, arrays, wrt, h=1e-6):
    """Central finite differences of scalar_fn w.r.t. arrays[wrt].

    scalar_fn takes the list of ndarrays and returns a float. The step is
    scaled by the magnitude of each component.
    """
    work = [a.copy() for a in arrays]
    target = work[wrt]
    flat = target.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        step = h * max(1.0, abs(orig))
        flat[i] = orig + step
        fp = scalar_fn(work)
        flat[i] = orig - step
        fm = scalar_fn(work)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(target.shape)


def rel_error(a, b, floor=1e-10):
    na = np.linalg.norm(np.ravel(a))
    nb = np.linalg.norm(np.ravel(b))
    return np.linalg.norm(np.ravel(a) - np.ravel(b)) / max(na, nb, floor)


def grads_close(g, fd, rtol=1e-4, atol=1e-8):
    """Norm-level gradient agreement with a floor for FD roundoff noise.

    Central differences at h=1e-6 on an O(1) loss carry ~1e-10 noise per
    component, so parameters whose true gradient is exactly zero (e.g. conv
    biases ahead of a train-mode batch norm) need the absolute term.
    """
    diff = np.linalg.norm(np.ravel(g) - np.ravel(fd))
    scale = max(np.linalg.norm(np.ravel(g)), np.linalg.norm(np.ravel(fd)))
    return diff <= rtol * scale + atol


def check_gradients(build, arrays, tol=1e-4, h=1e-6, dtype=np.float64):
    """Compare reverse-mode gradients of build(...) against central differences.

    build maps a list of Tensors to a scalar Tensor; every array in `arrays`
    is treated as a differentiable leaf.
    """
    tensors = [Tensor(a, requires_grad=True, dtype=dtype) for a in arrays]
    loss = build(tensors)
    backward(loss, tensors)

    def scalar_fn(arrs):
        return build([Tensor(a, dtype=np.float64) for a in arrs]).item()

    arrays64 = [np.asarray(a, dtype=np.float64) for a in arrays]
    for i, t in enumerate(tensors):
        fd = fd_gradient(scalar_fn, arrays64, i, h=h)
        assert grads_close(t.grad, fd, rtol=tol), \
            f"gradient mismatch on input {i}: rel err {rel_error(t.grad, fd):.3e} > {tol}"
