"""Independent numerical oracles used across the test suite.

Everything here is deliberately built from first principles (dense grids,
direct formulas) and never calls the code paths it is used to check.
"""

import numpy as np


def gmm_density_grid(weights, means, covs, pts):
    """Mixture density at pts (N,2) via direct per-component formulas."""
    out = np.zeros(len(pts))
    for wk, m, c in zip(weights, means, covs):
        diff = pts - m
        prec = np.linalg.inv(c)
        quad = np.einsum("ni,ij,nj->n", diff, prec, diff)
        norm = 1.0 / np.sqrt((2 * np.pi) ** 2 * np.linalg.det(c))
        out += wk * norm * np.exp(-0.5 * quad)
    return out


def convolution_log_density(weights, means, covs, s_mat, w_pts,
                            half_width=9.0, n_grid=721):
    """log of integral N(w - v; 0, S) * gmm(v) dv by 2D trapezoid quadrature."""
    g = np.linspace(-half_width, half_width, n_grid)
    dx = g[1] - g[0]
    xx, yy = np.meshgrid(g, g, indexing="ij")
    vpts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    pv = gmm_density_grid(weights, means, covs, vpts)
    s_inv = np.linalg.inv(s_mat)
    s_norm = 1.0 / np.sqrt((2 * np.pi) ** 2 * np.linalg.det(s_mat))
    out = np.empty(len(w_pts))
    for i, w in enumerate(np.atleast_2d(w_pts)):
        diff = w - vpts
        quad = np.einsum("ni,ij,nj->n", diff, s_inv, diff)
        out[i] = np.log((s_norm * np.exp(-0.5 * quad) * pv).sum() * dx * dx)
    return out


def mixture_cross_entropy(weights, means, covs, half_width=12.0, n_grid=2001):
    """-E_p[log p] for a 2D mixture via grid quadrature (differential entropy)."""
    g = np.linspace(-half_width, half_width, n_grid)
    dx = g[1] - g[0]
    xx, yy = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    p = gmm_density_grid(weights, means, covs, pts)
    mask = p > 0
    return float(-(p[mask] * np.log(p[mask])).sum() * dx * dx)


def density_normalization(log_density_fn, half_width=8.0, n_grid=400):
    """Integral of exp(log_density) over a square grid (cell midpoints)."""
    edges = np.linspace(-half_width, half_width, n_grid + 1)
    mids = 0.5 * (edges[:-1] + edges[1:])
    dx = edges[1] - edges[0]
    xx, yy = np.meshgrid(mids, mids, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    vals = np.exp(log_density_fn(pts))
    return float(vals.sum() * dx * dx)
