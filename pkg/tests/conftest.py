"""Shared test helpers: finite-difference gradient checking and the
independent Monte-Carlo divergence oracle."""

import numpy as np

from rbp.autodiff import Tensor


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradcheck(f, arrays, h=1e-5, tol=1e-6, floor=1e-6):
    """Assert analytic gradients of scalar f(*tensors) match central
    finite differences in float64; returns the worst relative error."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = f(*tensors)
    out.backward()
    worst = 0.0
    for t, a in zip(tensors, arrays):
        assert t.grad is not None, "no gradient reached a differentiable input"
        fd = np.zeros_like(a)
        flat, fd_flat = a.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f(*[Tensor(x) for x in arrays]).data)
            flat[i] = orig - h
            down = float(f(*[Tensor(x) for x in arrays]).data)
            flat[i] = orig
            fd_flat[i] = (up - down) / (2.0 * h)
        worst = max(worst, float(rel_err(t.grad, fd, floor).max()))
    assert worst <= tol, f"gradient mismatch: worst relative error {worst}"
    return worst


def mc_kl_gaussians(mean_q, var_q, mean_p, var_p, n_samples, seed):
    """Monte-Carlo estimate of KL(q || p) for two scalar Gaussians.

    Draws from q and averages log q - log p using the density formulas
    directly; independent of any closed-form divergence in the package.
    """
    gen = np.random.default_rng(seed)
    x = mean_q + np.sqrt(var_q) * gen.standard_normal(n_samples)
    log_q = -0.5 * np.log(2.0 * np.pi * var_q) - (x - mean_q) ** 2 / (2.0 * var_q)
    log_p = -0.5 * np.log(2.0 * np.pi * var_p) - (x - mean_p) ** 2 / (2.0 * var_p)
    return float(np.mean(log_q - log_p))


def gaussian_kl_reference(mean_q, var_q, mean_p, var_p):
    """Textbook closed form for KL between two scalar Gaussians."""
    return 0.5 * np.log(var_p / var_q) + (var_q + (mean_q - mean_p) ** 2) / \
        (2.0 * var_p) - 0.5
