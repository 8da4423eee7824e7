"""Shared test oracles: central finite differences and tolerance checks."""
import numpy as np

from fusionreid import autodiff as ad


def numeric_grad(f, arrays, eps=1e-4):
    """Central finite differences of scalar f(list-of-arrays) wrt each array.

    Independent of the autodiff path: only calls f forward.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f()
            flat[i] = orig - eps
            lo = f()
            flat[i] = orig
            gf[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def check_gradients(build_loss, params, rtol=1e-3, floor=1e-3):
    """Assert autodiff gradients of build_loss() match central differences.

    build_loss must construct a fresh graph from the given parameter
    tensors each call and return the scalar loss Tensor. Relative error is
    measured against max(|numeric|, floor) so near-zero entries compare at
    an absolute tolerance of rtol*floor.
    """
    loss = build_loss()
    ad.backward(loss, params=params)
    got = [p.grad.copy() for p in params]

    def forward():
        with ad.no_grad():
            return build_loss().item()

    want = numeric_grad(forward, [p.data for p in params])
    for p, a, n in zip(params, got, want):
        err = np.abs(a - n)
        tol = rtol * np.maximum(np.abs(n), floor)
        assert np.all(err <= tol), (
            f"gradient mismatch for shape {p.shape}: max err {err.max():.3e}, "
            f"worst tol {tol[err > tol].min():.3e}")
