"""Compiled SGD inner loops.

All arithmetic is carried out in float64 and stored back into the caller's
arrays, so float32 parameter storage and float64 test arrays share one code
path. Functions release the GIL so trainer threads update the shared V
partition concurrently.
"""
import numpy as np
from numba import njit


@njit(nogil=True, cache=True)
def slice_step(u, v, off, rank, learn_bias, g, p, a, w, n_i, n_j, eta, lam):
    """One SGD update of model slice ``p``; returns the raw residual a - p(i,j).

    Returns NaN (and leaves everything untouched) when the prediction is not
    finite.
    """
    pred = np.float64(g[p])
    if learn_bias:
        pred += np.float64(u[off]) + np.float64(v[off])
    for t in range(1, rank + 1):
        pred += np.float64(u[off + t]) * np.float64(v[off + t])
    r = np.float64(a) - pred
    if not np.isfinite(r):
        return np.nan
    e = np.float64(w) * r
    reg_i = lam / n_i
    reg_j = lam / n_j

    gp = np.float64(g[p])
    g[p] = gp + eta * (e - lam * gp)
    if learn_bias:
        bu = np.float64(u[off])
        bv = np.float64(v[off])
        u[off] = bu + eta * (e - reg_i * bu)
        v[off] = bv + eta * (e - reg_j * bv)
    for t in range(1, rank + 1):
        ut = np.float64(u[off + t])
        vt = np.float64(v[off + t])
        u[off + t] = ut + eta * (e * vt - reg_i * ut)
        v[off + t] = vt + eta * (e * ut - reg_j * vt)
    return r


@njit(nogil=True, cache=True)
def packed_step(u, v, g, a, w, n_i, n_j, eta, lam, rank, learn_bias, stride, residuals):
    """Apply ``slice_step`` to every packed model; returns the skipped-slice count."""
    skipped = 0
    for p in range(g.shape[0]):
        r = slice_step(u, v, p * stride, rank[p], learn_bias[p], g, p,
                       a, w, n_i, n_j, eta[p], lam[p])
        residuals[p] = r
        if np.isnan(r):
            skipped += 1
    return skipped


@njit(nogil=True, cache=True)
def sgd_block(U, u_idx, V, v_idx, a, w, n_i, n_j, g, eta, lam, rank, learn_bias,
              stride, sq_err, skipped):
    """Run packed SGD over a block of edges.

    ``U`` holds the block's fetched row vectors, ``V`` the local partition
    backing; ``u_idx``/``v_idx`` map each edge to its row in those arrays.
    Squared residuals and skipped slices are accumulated per model.
    """
    c = g.shape[0]
    residuals = np.empty(c, dtype=np.float64)
    for e in range(u_idx.shape[0]):
        u = U[u_idx[e]]
        v = V[v_idx[e]]
        packed_step(u, v, g, a[e], w[e], n_i[e], n_j[e], eta, lam, rank,
                    learn_bias, stride, residuals)
        for p in range(c):
            r = residuals[p]
            if np.isnan(r):
                skipped[p] += 1
            else:
                sq_err[p] += r * r
