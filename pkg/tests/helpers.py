"""Shared test oracles.

The gradient oracle re-executes the forward computation in double precision
and takes central finite differences; it never touches the backward pass it
is checking.
"""

import numpy as np

from retgrade import tensor as T


def numeric_grad(forward, arrays, wrt, eps=1e-3):
    """Central finite differences of a scalar-valued forward pass.

    forward: callable taking float64 ndarrays, returning a python float.
    arrays: list of input ndarrays; wrt: index of the one to differentiate.
    """
    work = [np.array(a, dtype=np.float64) for a in arrays]
    target = work[wrt]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = forward(*work)
        flat[i] = orig - eps
        fm = forward(*work)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def rel_err(a, b):
    """Normalized max deviation between two gradient arrays."""
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / scale


def numeric_grad_smooth(forward, arrays, wrt, eps=1e-3):
    """Finite differences plus a smoothness mask.

    Central differences are only a valid oracle where the function is smooth
    across the whole step. Entries where the eps and eps/2 estimates disagree
    have a relu/maxpool kink inside the interval (the estimates of a smooth
    function agree to O(eps^2)); those are flagged non-smooth and must be
    excluded by the caller, mirroring the tie/kink exclusions of the per-op
    checks.
    """
    g1 = numeric_grad(forward, arrays, wrt, eps)
    g2 = numeric_grad(forward, arrays, wrt, eps / 2)
    scale = max(np.abs(g1).max(), np.abs(g2).max(), 1e-12)
    smooth = np.abs(g1 - g2) <= 1e-4 * scale
    return g1, smooth


def check_gradients(build, arrays, wrt_indices, eps=1e-3, tol=1e-4):
    """Assert analytic gradients match the finite-difference oracle.

    build: callable taking Tensors and returning a scalar Tensor. Analytic
    gradients are computed in float64 so the comparison isolates the backward
    rules from storage precision.
    """
    tensors = [T.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    loss = build(*tensors)
    T.backward(loss)

    def forward(*work):
        consts = [T.Tensor(w) for w in work]
        return build(*consts).item()

    for wrt in wrt_indices:
        analytic = tensors[wrt].grad
        numeric = numeric_grad(forward, arrays, wrt, eps=eps)
        err = rel_err(analytic, numeric)
        assert err < tol, f"gradient mismatch on input {wrt}: rel err {err:.3e} >= {tol}"
