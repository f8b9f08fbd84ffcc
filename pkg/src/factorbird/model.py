"""Biased latent-factor model: prediction, SGD updates, losses and packing.

Each factor vector packs ``c`` independent models. Model ``p`` owns the slice
``[p * (k + 1), (p + 1) * (k + 1))``; slot 0 of a slice is the vertex bias and
slots ``1..k`` are the latent factors. The global bias ``g`` is kept outside
the vectors as a length-``c`` float32 array.
"""
from __future__ import annotations

import itertools
import json
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels

FLOAT = np.float32


@dataclass(frozen=True)
class Hyperparameters:
    """One hyperparameter combination.

    ``rank`` limits the model to its first ``rank`` factors (the remaining
    slots of its slice are ignored by prediction and never updated) and
    ``learn_biases=False`` keeps the vertex biases at zero. Together they
    express the global-bias-only and bias-only baselines inside a packed grid.
    An ``eta0`` of zero freezes the model.
    """

    eta0: float
    lam: float
    decay: float = 1.0
    k: int = 1
    rank: int | None = None
    learn_biases: bool = True

    def __post_init__(self):
        if not self.eta0 >= 0:
            raise ValueError(f"eta0 must be non-negative, got {self.eta0}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must lie in (0, 1], got {self.decay}")
        if self.k < 1:
            raise ValueError(f"k must be positive, got {self.k}")
        if self.rank is not None and not 0 <= self.rank <= self.k:
            raise ValueError(f"rank must lie in [0, k], got {self.rank}")

    @property
    def active_rank(self) -> int:
        return self.k if self.rank is None else self.rank

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: Mapping, k: int | None = None) -> Hyperparameters:
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        if k is not None:
            d.setdefault("k", k)
        return cls(**d)


@dataclass(frozen=True)
class ModelLayout:
    k: int
    num_models: int
    ranks: tuple[int, ...] = ()
    biases: tuple[bool, ...] = ()

    def __post_init__(self):
        if self.k < 1 or self.num_models < 1:
            raise ValueError("k and num_models must be positive")
        if not self.ranks:
            object.__setattr__(self, "ranks", (self.k,) * self.num_models)
        if not self.biases:
            object.__setattr__(self, "biases", (True,) * self.num_models)
        if len(self.ranks) != self.num_models or len(self.biases) != self.num_models:
            raise ValueError("ranks/biases must have one entry per model")

    @property
    def stride(self) -> int:
        return self.k + 1

    @property
    def width(self) -> int:
        return self.num_models * self.stride

    def offset(self, model_index: int) -> int:
        if not 0 <= model_index < self.num_models:
            raise IndexError(f"model index {model_index} outside [0, {self.num_models})")
        return model_index * self.stride

    def slice(self, model_index: int) -> slice:
        off = self.offset(model_index)
        return slice(off, off + self.stride)


@dataclass(frozen=True)
class HyperGrid:
    """Ordered hyperparameter combinations packed into one run.

    ``stream_offset`` shifts the random-initialisation stream of every slice,
    so a single model cut out of a packed grid (see ``subgrid``) starts from
    the same parameters it had inside the pack.
    """

    combos: tuple[Hyperparameters, ...]
    stream_offset: int = 0

    def __post_init__(self):
        combos = tuple(self.combos)
        object.__setattr__(self, "combos", combos)
        if not combos:
            raise ValueError("a grid needs at least one combination")
        ks = {h.k for h in combos}
        if len(ks) != 1:
            raise ValueError(f"all combinations must share one k, got {sorted(ks)}")

    @classmethod
    def product(cls, etas: Iterable[float], lambdas: Iterable[float],
                decays: Iterable[float] = (1.0,), k: int = 1, **extra) -> HyperGrid:
        combos = [Hyperparameters(eta0=e, lam=l, decay=d, k=k, **extra)
                  for e, l, d in itertools.product(etas, lambdas, decays)]
        return cls(tuple(combos))

    @property
    def k(self) -> int:
        return self.combos[0].k

    @property
    def c(self) -> int:
        return len(self.combos)

    def __len__(self):
        return self.c

    def __getitem__(self, p):
        return self.combos[p]

    @property
    def layout(self) -> ModelLayout:
        return ModelLayout(self.k, self.c,
                           tuple(h.active_rank for h in self.combos),
                           tuple(h.learn_biases for h in self.combos))

    def subgrid(self, p: int) -> HyperGrid:
        return HyperGrid((self.combos[p],), self.stream_offset + p)

    def learning_rates(self, pass_index: int) -> np.ndarray:
        return np.array([learning_rate(h, pass_index) for h in self.combos])

    def lambdas(self) -> np.ndarray:
        return np.array([h.lam for h in self.combos], dtype=np.float64)

    def to_json(self) -> dict:
        return {"k": self.k, "stream_offset": self.stream_offset,
                "combos": [{key: val for key, val in h.to_dict().items() if key != "k"}
                           for h in self.combos]}

    @classmethod
    def from_json(cls, obj, k: int | None = None) -> HyperGrid:
        """Accepts either a bare list of combos (needs ``k``) or ``{"k", "combos"}``."""
        if isinstance(obj, list):
            combos, offset = obj, 0
        else:
            k = obj.get("k", k)
            combos, offset = obj["combos"], obj.get("stream_offset", 0)
        if k is None:
            raise ValueError("grid file does not define k")
        return cls(tuple(Hyperparameters.from_dict(d, k=k) for d in combos), offset)

    @classmethod
    def load(cls, path, k: int | None = None) -> HyperGrid:
        with open(path) as fh:
            return cls.from_json(json.load(fh), k=k)


@dataclass
class EdgeContext:
    a_ij: float
    w_ij: float = 1.0
    n_i: int = 1
    n_j: int = 1

    def __post_init__(self):
        if self.n_i < 1 or self.n_j < 1:
            raise ValueError("vertex degrees must be at least 1")
        if not self.w_ij > 0:
            raise ValueError("error weight must be positive")


def new_global_bias(num_models: int, value: float = 0.0) -> np.ndarray:
    return np.full(num_models, value, dtype=FLOAT)


def learning_rate(h: Hyperparameters, pass_index: int) -> float:
    if pass_index < 0:
        raise ValueError("pass index must be non-negative")
    return h.eta0 * h.decay ** pass_index


def predict(u_i, v_j, g: float, layout: ModelLayout, model_index: int = 0) -> float:
    off = layout.offset(model_index)
    if len(u_i) < layout.width or len(v_j) < layout.width:
        raise ValueError("factor vectors are shorter than the layout width")
    pred = float(g)
    if layout.biases[model_index]:
        pred += float(u_i[off]) + float(v_j[off])
    for t in range(1, layout.ranks[model_index] + 1):
        pred += float(u_i[off + t]) * float(v_j[off + t])
    return pred


def predict_rows(U_rows: np.ndarray, V_rows: np.ndarray, g, layout: ModelLayout) -> np.ndarray:
    """Predictions for aligned rows of u and v vectors, shape ``(n, c)``, float64.

    Each model column is accumulated in the same order regardless of how many
    models are packed, so results for a slice do not depend on its neighbours.
    """
    n = U_rows.shape[0]
    out = np.empty((n, layout.num_models))
    for p in range(layout.num_models):
        off = layout.offset(p)
        pred = np.full(n, float(np.asarray(g)[p]))
        if layout.biases[p]:
            pred += U_rows[:, off].astype(np.float64)
            pred += V_rows[:, off].astype(np.float64)
        for t in range(1, layout.ranks[p] + 1):
            pred += U_rows[:, off + t].astype(np.float64) * V_rows[:, off + t].astype(np.float64)
        out[:, p] = pred
    return out


def sgd_step(u_i: np.ndarray, v_j: np.ndarray, g: float, ctx: EdgeContext,
             h: Hyperparameters, eta: float, offset: int = 0) -> tuple[float, float]:
    """Single-model SGD update on the slice starting at ``offset``.

    ``u_i`` and ``v_j`` are updated in place; both factor updates read the
    pre-update peer values. Returns ``(new_g, e)`` with ``e`` the weighted
    residual computed before the update.
    """
    if not eta >= 0:
        raise ValueError("learning rate must be non-negative")
    if len(u_i) < offset + h.k + 1 or len(v_j) < offset + h.k + 1:
        raise ValueError("factor vectors too short for the model slice")
    gbuf = np.array([g], dtype=np.result_type(u_i.dtype, np.float32))
    r = _kernels.slice_step(u_i, v_j, offset, h.active_rank, h.learn_biases, gbuf, 0,
                            float(ctx.a_ij), float(ctx.w_ij), float(ctx.n_i),
                            float(ctx.n_j), float(eta), float(h.lam))
    if math.isnan(r):
        raise FloatingPointError("non-finite prediction in SGD step")
    return gbuf[0].item(), ctx.w_ij * r


def packed_sgd_step(u_i: np.ndarray, v_j: np.ndarray, g: np.ndarray, ctx: EdgeContext,
                    grid: HyperGrid, pass_index: int) -> np.ndarray:
    """Update every model slice of ``u_i``/``v_j`` and the ``g`` array in place.

    Returns the per-model weighted residuals; slices whose prediction is not
    finite are skipped and reported as NaN.
    """
    layout = grid.layout
    if len(u_i) < layout.width or len(v_j) < layout.width or len(g) != grid.c:
        raise ValueError("vectors are not sized to the grid layout")
    residuals = np.empty(grid.c)
    _kernels.packed_step(u_i, v_j, g, float(ctx.a_ij), float(ctx.w_ij), float(ctx.n_i),
                         float(ctx.n_j), grid.learning_rates(pass_index), grid.lambdas(),
                         np.array(layout.ranks, dtype=np.int64),
                         np.array(layout.biases, dtype=np.bool_), layout.stride, residuals)
    return ctx.w_ij * residuals


def init_vector(vector: np.ndarray, seed, stddev: float = 0.01,
                layout: ModelLayout | None = None, stream_offset: int = 0) -> None:
    """Fill factor slots with N(0, stddev) draws; bias slots are zeroed.

    Every model slice draws from its own generator seeded by ``seed`` (an int
    or a sequence of ints) extended with the slice's stream number, so the
    values of a slice never depend on how many models are packed.
    """
    if not stddev > 0:
        raise ValueError("stddev must be positive")
    stride = len(vector) if layout is None else layout.stride
    num_models = 1 if layout is None else layout.num_models
    base = list(seed) if isinstance(seed, Sequence) else [seed]
    for p in range(num_models):
        rng = np.random.default_rng(base + [stream_offset + p])
        off = p * stride
        vector[off] = 0.0
        vector[off + 1:off + stride] = rng.normal(0.0, stddev, stride - 1)


def error_components(edges, U_rows: np.ndarray, V_rows: np.ndarray, g,
                     layout: ModelLayout) -> np.ndarray:
    """Per-model ``0.5 * sum w (p - a)^2`` over edges with aligned factor rows."""
    pred = predict_rows(U_rows, V_rows, g, layout)
    a = edges["a"].astype(np.float64)
    w = edges["w"].astype(np.float64)
    out = np.empty(layout.num_models)
    for p in range(layout.num_models):
        diff = pred[:, p] - a
        out[p] = 0.5 * float(np.sum(w * diff * diff))
    return out


def norm_components(rows: np.ndarray, layout: ModelLayout) -> np.ndarray:
    """Per-model sum of squared active slots (biases and factors) over ``rows``."""
    rows = np.asarray(rows, dtype=np.float64).reshape(-1, layout.width)
    out = np.zeros(layout.num_models)
    for p in range(layout.num_models):
        off = layout.offset(p)
        if layout.biases[p]:
            out[p] += float(np.sum(rows[:, off] ** 2))
        r = layout.ranks[p]
        if r:
            out[p] += float(np.sum(rows[:, off + 1:off + 1 + r] ** 2))
    return out


def _stack(M: Mapping, keys, width: int) -> np.ndarray:
    keys = list(keys)
    if not keys:
        return np.zeros((0, width))
    return np.stack([np.asarray(M[int(key)], dtype=np.float64) for key in keys])


def _single(layout: ModelLayout, model_index: int, g: float) -> np.ndarray:
    gvec = np.zeros(layout.num_models)
    gvec[model_index] = g
    return gvec


def _infer_layout(U: Mapping, V: Mapping) -> ModelLayout:
    for M in (U, V):
        for key in M:
            return ModelLayout(k=len(M[key]) - 1, num_models=1)
    return ModelLayout(k=1, num_models=1)


def exact_loss(edges, U: Mapping, V: Mapping, g: float, lam: float,
               layout: ModelLayout | None = None, model_index: int = 0) -> float:
    """Full regularised weighted squared loss of one model slice.

    ``edges`` is a structured array with fields ``i, j, a, w``; ``U`` and
    ``V`` map vertex ids to factor vectors and contribute every stored vector
    to the regularisation term.
    """
    layout = layout or _infer_layout(U, V)
    w = layout.width
    err = 0.0
    if len(edges):
        err = error_components(edges, _stack(U, edges["i"], w), _stack(V, edges["j"], w),
                               _single(layout, model_index, g), layout)[model_index]
    reg = float(g) ** 2
    reg += norm_components(_stack(U, U, w), layout)[model_index]
    reg += norm_components(_stack(V, V, w), layout)[model_index]
    return float(err + 0.5 * lam * reg)


@dataclass
class LossTotals:
    num_edges: int
    num_rows_U: int
    num_cols_V: int


def estimate_components(edge_sample, U_edge_rows, V_edge_rows, U_sample, V_sample,
                        totals: LossTotals, g, lambdas, layout: ModelLayout):
    """Vectorised loss estimate for every packed model at once.

    ``U_edge_rows``/``V_edge_rows`` are the factor rows aligned with the
    sampled edges. Returns ``(error, regularisation)`` arrays of length c.
    """
    if len(edge_sample) == 0:
        raise ValueError("edge sample is empty")
    if len(U_sample) == 0 or len(V_sample) == 0:
        raise ValueError("factor samples are empty")
    g = np.asarray(g, dtype=np.float64)
    err = error_components(edge_sample, U_edge_rows, V_edge_rows, g, layout)
    err *= totals.num_edges / len(edge_sample)
    reg = g ** 2
    reg = reg + norm_components(U_sample, layout) * (totals.num_rows_U / len(U_sample))
    reg = reg + norm_components(V_sample, layout) * (totals.num_cols_V / len(V_sample))
    return err, 0.5 * np.asarray(lambdas, dtype=np.float64) * reg


def estimate_loss(edge_sample, U: Mapping, V: Mapping, U_sample, V_sample,
                  totals: LossTotals, g: float, lam: float,
                  layout: ModelLayout | None = None, model_index: int = 0) -> tuple[float, float]:
    """Sample-based estimate of one model's loss as ``(error, regularisation)``.

    The error part scales the sampled edges' loss by ``num_edges / |sample|``;
    the regularisation part scales the sampled U rows and V columns by their
    population sizes and adds the exact global-bias term.
    """
    if len(edge_sample) == 0:
        raise ValueError("edge sample is empty")
    layout = layout or _infer_layout(U, V)
    w = layout.width
    U_rows = np.asarray(list(U_sample), dtype=np.float64).reshape(-1, w)
    V_rows = np.asarray(list(V_sample), dtype=np.float64).reshape(-1, w)
    lambdas = np.zeros(layout.num_models)
    lambdas[model_index] = lam
    err, reg = estimate_components(edge_sample, _stack(U, edge_sample["i"], w),
                                   _stack(V, edge_sample["j"], w), U_rows, V_rows,
                                   totals, _single(layout, model_index, g), lambdas, layout)
    return float(err[model_index]), float(reg[model_index])
