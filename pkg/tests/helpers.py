"""Shared oracles for the test suite."""

import numpy as np


def finite_difference_errors(loss_and_grad, theta, coords, h=1e-6, floor=1e-8):
    """Relative error |g_analytic - g_fd| / max(|g_analytic|, |g_fd|, floor) at ``coords``.

    ``loss_and_grad(theta) -> (loss, grad)``; the finite difference is central.
    """
    _, g = loss_and_grad(theta)
    errs = []
    for i in coords:
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += h
        tm[i] -= h
        fd = (loss_and_grad(tp)[0] - loss_and_grad(tm)[0]) / (2 * h)
        errs.append(abs(g[i] - fd) / max(abs(g[i]), abs(fd), floor))
    return np.array(errs)


def grid_simplex_optimum(loss, n, step=1e-3):
    """Brute-force minimum of ``loss(alpha)`` over a regular simplex grid (n = 2 or 3)."""
    m = int(round(1 / step))
    best = np.inf
    best_a = None
    if n == 2:
        a = np.arange(m + 1) / m
        alphas = np.stack([a, 1 - a], axis=1)
        vals = np.array([loss(x) for x in alphas])
        i = int(np.argmin(vals))
        return float(vals[i]), alphas[i]
    if n == 3:
        for i in range(m + 1):
            j = np.arange(m + 1 - i)
            alphas = np.stack([np.full(len(j), i), j, m - i - j], axis=1) / m
            vals = np.array([loss(x) for x in alphas])
            k = int(np.argmin(vals))
            if vals[k] < best:
                best, best_a = float(vals[k]), alphas[k]
        return best, best_a
    raise ValueError("grid search supports n = 2 or 3")
