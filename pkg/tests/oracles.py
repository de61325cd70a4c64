"""Independent brute-force reference implementations used by the tests.

None of these import the code paths they check; they are written directly
from the textbook formulas with dense numpy and explicit loops.
"""

import itertools
import math

import numpy as np


def dense_wls(phi, mu, sigma):
    """Weighted pseudo-inverse solution and covariance for one direction."""
    phi = np.asarray(phi, dtype=float)
    w = np.diag(np.asarray(sigma, dtype=float) ** -2)
    a = np.linalg.inv(phi.T @ w @ phi) @ phi.T @ w
    c_mean = a @ mu
    c_cov = a @ np.linalg.inv(w) @ a.T
    return c_mean, c_cov, a


def cubic_kernel(r):
    """Centered uniform cubic B-spline."""
    r = abs(r)
    if r < 1:
        return 2.0 / 3.0 - r * r + 0.5 * r**3
    if r < 2:
        return (2 - r) ** 3 / 6.0
    return 0.0


def bspline_row(point, lattice_origin, lattice_dims, spacing):
    """Dict col -> weight by evaluating every control point."""
    out = {}
    nx, ny, nz = lattice_dims
    for cz in range(nz):
        for cy in range(ny):
            for cx in range(nx):
                c = (cx, cy, cz)
                w = 1.0
                for a in range(3):
                    w *= cubic_kernel((point[a] - (lattice_origin[a] + c[a] * spacing)) / spacing)
                    if w == 0.0:
                        break
                if w >= 1e-12:
                    out[cx + nx * (cy + ny * cz)] = w
    return out


def naive_correlate(vol, taps3d):
    """Zero-padded 3-D correlation with a full (non-separable) kernel, voxel loop."""
    vol = np.asarray(vol, dtype=float)
    k = np.asarray(taps3d, dtype=float)
    rx, ry, rz = (s // 2 for s in k.shape)
    nx, ny, nz = vol.shape
    out = np.zeros_like(vol)
    for i, j, l in itertools.product(range(nx), range(ny), range(nz)):
        acc = 0.0
        for a in range(-rx, rx + 1):
            ii = i + a
            if not 0 <= ii < nx:
                continue
            for b in range(-ry, ry + 1):
                jj = j + b
                if not 0 <= jj < ny:
                    continue
                for c in range(-rz, rz + 1):
                    ll = l + c
                    if 0 <= ll < nz:
                        acc += k[a + rx, b + ry, c + rz] * vol[ii, jj, ll]
        out[i, j, l] = acc
    return out


def naive_demons(mu, sigma, mask, taps3d, mode):
    """Loop implementation of both smoothing estimators for one channel."""
    m = mask.astype(float)
    if mode == "precision":
        w = m / np.where(mask, sigma, 1.0) ** 2
    else:
        w = m
    k2 = np.asarray(taps3d) ** 2
    den = naive_correlate(w, taps3d)
    den = np.where(mask, den, 1.0)
    mean = naive_correlate(np.where(mask, mu, 0.0) * w, taps3d) / den
    if mode == "precision":
        var = naive_correlate(w, k2) / den**2
    else:
        var = naive_correlate(np.where(mask, sigma, 0.0) ** 2, k2) / den**2
    return np.where(mask, mean, 0), np.where(mask, var, 0)


def average_ranks(x):
    """Ranks starting at 1, ties receive the mean of their positions."""
    x = list(x)
    order = sorted(range(len(x)), key=lambda i: x[i])
    ranks = [0.0] * len(x)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and x[order[j + 1]] == x[order[i]]:
            j += 1
        r = (i + j) / 2.0 + 1
        for t in range(i, j + 1):
            ranks[order[t]] = r
        i = j + 1
    return ranks


def pearson_loop(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def entropy_counts(counts):
    s = sum(counts)
    return -sum(c / s * math.log(c / s) for c in counts if c)
