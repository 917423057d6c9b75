"""Shared independent oracles for the test suite.

These deliberately avoid the library's own code paths: brute-force grids,
golden-section refinement, finite differences, and dense integer arithmetic.
"""

import numpy as np

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def quant_sq_loss(w, wb, tau, phi):
    r = w - (tau * wb + phi)
    return float(np.dot(r, r))


def golden_section(f, lo, hi, iters=80):
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


def brute_force_omega(w, wb, lo=-2.0, hi=2.0, step=1e-3, sweeps=6):
    """Minimize the squared reconstruction loss over (tau, phi) by a grid
    search followed by golden-section coordinate descent."""
    taus = np.arange(lo, hi + step, step)
    phis = np.arange(lo, hi + step, step)
    # grid evaluation of ||w - tau*wb - phi||^2 in row blocks
    n = w.size
    sww = float(np.dot(w, wb))
    sw = float(np.sum(w))
    swb = float(np.sum(wb))
    w2 = float(np.dot(w, w))
    p = phis[None, :]
    best_val, best_ij = np.inf, (0, 0)
    block = 256
    for base in range(0, taus.size, block):
        t = taus[base : base + block, None]
        grid = w2 - 2 * t * sww - 2 * p * sw + t * t * n + 2 * t * p * swb + p * p * n
        i, j = np.unravel_index(np.argmin(grid), grid.shape)
        if grid[i, j] < best_val:
            best_val, best_ij = float(grid[i, j]), (base + i, j)
    tau, phi = float(taus[best_ij[0]]), float(phis[best_ij[1]])
    span = 2 * step
    for _ in range(sweeps):
        tau, _ = golden_section(lambda t_: quant_sq_loss(w, wb, t_, phi), tau - span, tau + span)
        phi, best = golden_section(lambda p_: quant_sq_loss(w, wb, tau, p_), phi - span, phi + span)
        span = max(span * 0.25, 1e-9)
    return tau, phi, best


def central_diff(f, x, h=1e-6):
    return (f(x + h) - f(x - h)) / (2.0 * h)


def bisect_entropy_inverse(target, tol=1e-13):
    """Independent bisection for the inverse binary entropy on [0, 1/2]."""

    def h(p):
        if p <= 0.0 or p >= 1.0:
            return 0.0
        return -p * np.log2(p) - (1 - p) * np.log2(1 - p)

    lo, hi = 0.0, 0.5
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if h(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def dense_sign_dot(w_bits, x_signs):
    """sum over the weight's 1-positions of +-1 activations, in plain ints."""
    return int(sum(int(x) for b, x in zip(w_bits, x_signs) if b == 1))
