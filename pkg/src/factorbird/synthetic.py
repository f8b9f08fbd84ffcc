"""Synthetic interaction matrices with known bias and low-rank structure."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .edges import make_edges


@dataclass
class SyntheticSpec:
    rows: int = 2000
    cols: int = 1500
    rank: int = 5
    density: float = 0.1
    global_bias: float = 3.0
    bias_scale: float = 0.5
    factor_scale: float = 1.0
    noise: float = 0.1
    row_offset: int = 0
    col_offset: int = 0


def biased_low_rank(spec: SyntheticSpec, seed: int) -> np.ndarray:
    """Sample observed entries of ``g + b_i + b_j + u_i . v_j + noise``.

    Each cell is observed independently with probability ``density``. The
    low-rank term has standard deviation ``factor_scale``; row and column
    biases have standard deviation ``bias_scale``. Row ids are
    ``row_offset + r`` and column ids ``col_offset + c``.
    """
    rng = np.random.default_rng(seed)
    per_factor = np.sqrt(spec.factor_scale / np.sqrt(spec.rank)) if spec.rank else 0.0
    U = rng.normal(0, per_factor, (spec.rows, spec.rank))
    V = rng.normal(0, per_factor, (spec.cols, spec.rank))
    b_row = rng.normal(0, spec.bias_scale, spec.rows)
    b_col = rng.normal(0, spec.bias_scale, spec.cols)
    mask = rng.random((spec.rows, spec.cols)) < spec.density
    r, c = np.nonzero(mask)
    a = (spec.global_bias + b_row[r] + b_col[c] + np.einsum("nk,nk->n", U[r], V[c])
         + rng.normal(0, spec.noise, len(r)))
    edges = make_edges(r.astype(np.uint64) + np.uint64(spec.row_offset),
                       c.astype(np.uint64) + np.uint64(spec.col_offset), a)
    return edges[rng.permutation(len(edges))]


def binary_low_rank(rows: int, cols: int, rank: int, density: float, seed: int) -> np.ndarray:
    """Binarised interactions: the ``density`` fraction of cells with the highest affinity."""
    rng = np.random.default_rng(seed)
    U = rng.normal(size=(rows, rank))
    V = rng.normal(size=(cols, rank))
    score = U @ V.T + rng.gumbel(size=(rows, cols))
    cut = np.quantile(score, 1 - density)
    r, c = np.nonzero(score > cut)
    edges = make_edges(r, c, np.ones(len(r)))
    return edges[rng.permutation(len(edges))]
