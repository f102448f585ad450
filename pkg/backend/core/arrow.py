"""Model-free arrow-of-time diagnostic.

Each series is embedded at several window lengths w, as 2w-long forward
rows F and their full reversals B. A k-nearest-neighbour estimate of the
symmetrized KL divergence between F and B (the J-divergence) is compared
against a block-permutation null in which contiguous blocks of w rows swap
their F and B members with probability 1/2. The process is GO for
retrodiction when some representation is significant at >= c_min scales.
"""
from __future__ import annotations

import logging
import math
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial import cKDTree
from numpy.lib.stride_tricks import sliding_window_view
from tqdm import tqdm

from .errors import InsufficientDataError, ShapeError
from .procgen import TimeSeries
from .rng import make_rng

logger = logging.getLogger(__name__)

Representation = Literal["LEVEL", "DIFF"]
_REP_KEY = {"LEVEL": 0, "DIFF": 1}

# Stream tags for make_rng(seed, tag, ...)
_SUBSAMPLE_STREAM = 10
_PERMUTATION_STREAM = 20

ZERO_DISTANCE_FALLBACK = 1e-12


class ArrowConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    windows: Tuple[int, ...] = (2, 4, 8)
    representations: Tuple[Representation, ...] = ("LEVEL", "DIFF")
    k_nn: int = Field(5, ge=1)
    n_perm: int = Field(500, ge=1)
    alpha: float = Field(0.05, gt=0.0, lt=1.0)
    c_min: int = Field(2, ge=1)
    seed: int = 42
    max_embed: int = Field(4000, ge=2)

    @model_validator(mode="after")
    def _check(self) -> "ArrowConfig":
        if not self.windows or min(self.windows) < 1:
            raise ValueError("windows must be a non-empty set of positive lengths")
        if len(set(self.windows)) != len(self.windows):
            raise ValueError("windows must not repeat")
        if not self.representations:
            raise ValueError("at least one representation is required")
        if self.c_min > len(self.windows):
            raise ValueError(f"c_min={self.c_min} exceeds the number of windows ({len(self.windows)})")
        return self


class ScaleResult(BaseModel):
    representation: Representation
    w: int
    j_obs: float = Field(..., ge=0.0)
    p_perm: float = Field(..., gt=0.0, le=1.0)
    n_embeddings: int
    null_mean: float = 0.0


class ArrowReport(BaseModel):
    series: str = ""
    scale_results: List[ScaleResult]
    verdict: Literal["GO", "NOGO"]
    delta_arrow: float
    significant_counts: Dict[str, int]
    config: ArrowConfig

    @property
    def is_go(self) -> bool:
        return self.verdict == "GO"


def _values(series: Union[TimeSeries, np.ndarray]) -> np.ndarray:
    if isinstance(series, TimeSeries):
        return series.values
    return np.asarray(series, dtype=np.float64).reshape(-1)


def build_embeddings(
    series: Union[TimeSeries, np.ndarray],
    w: int,
    rep: Representation = "LEVEL",
    max_embed: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Forward rows [s_t .. s_{t+2w-1}] and their reversals.

    Rows beyond ``max_embed`` are thinned by a seeded uniform draw that
    keeps time order.
    """
    if rep not in _REP_KEY:
        raise ShapeError(f"unknown representation '{rep}'")
    values = _values(series)
    need = 2 * w + (1 if rep == "DIFF" else 0)
    if values.size < need:
        raise InsufficientDataError(f"series of length {values.size} too short for w={w} {rep} (need {need})")
    if rep == "DIFF":
        values = np.diff(values)
    F = sliding_window_view(values, 2 * w)
    if max_embed is not None and F.shape[0] > max_embed:
        rng = rng if rng is not None else np.random.default_rng(0)
        keep = np.sort(rng.choice(F.shape[0], size=max_embed, replace=False))
        F = F[keep]
    F = np.ascontiguousarray(F)
    B = np.ascontiguousarray(F[:, ::-1])
    return F, B


def _positive_floor(*dists: np.ndarray) -> float:
    pos = [d[d > 0] for d in dists]
    pos = [p for p in pos if p.size]
    return float(min(p.min() for p in pos)) if pos else ZERO_DISTANCE_FALLBACK


def _kth(tree: cKDTree, points: np.ndarray, k: int) -> np.ndarray:
    d, _ = tree.query(points, k=k)
    return d if d.ndim == 1 else d[:, -1]


def knn_kl(X: np.ndarray, Y: np.ndarray, k: int = 5, clamp: bool = True) -> float:
    """k-NN estimate of KL(P_X || P_Y) (Perez-Cruz).

    D = (d/N) sum_i log(nu_k(x_i) / rho_k(x_i)) + log(M / (N - 1))
    with rho_k the k-th neighbour distance inside X (self excluded) and nu_k
    the k-th neighbour distance in Y. Zero distances are replaced by the
    smallest positive distance seen.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ShapeError(f"knn_kl needs two matrices of equal width, got {X.shape} and {Y.shape}")
    N, d = X.shape
    M = Y.shape[0]
    if N <= k or M < k:
        raise InsufficientDataError(f"knn_kl needs |X| > k and |Y| >= k (|X|={N}, |Y|={M}, k={k})")
    rho = _kth(cKDTree(X), X, k + 1)
    nu = _kth(cKDTree(Y), X, k)
    floor = _positive_floor(rho, nu)
    rho = np.where(rho > 0, rho, floor)
    nu = np.where(nu > 0, nu, floor)
    est = d / N * float(np.sum(np.log(nu / rho))) + math.log(M / (N - 1))
    return max(est, 0.0) if clamp else est


def j_divergence(F: np.ndarray, B: np.ndarray, k: int = 5, clamp: bool = True) -> float:
    return 0.5 * knn_kl(F, B, k, clamp) + 0.5 * knn_kl(B, F, k, clamp)


class _PooledNeighbours:
    """Neighbour lists over F u B, reused by every permutation replicate.

    Swapping F/B members never changes the pooled point set, only labels,
    so per-label k-th distances can be read off one sorted neighbour list.
    Points whose list runs out of same- or other-label neighbours fall back
    to exact per-label tree queries.
    """

    def __init__(self, F: np.ndarray, B: np.ndarray, k: int) -> None:
        self.k = k
        self.n = F.shape[0]
        self.dim = F.shape[1]
        self.pool = np.vstack([F, B])
        total = self.pool.shape[0]
        depth = min(max(8 * k, 32), total - 1)
        dist, idx = cKDTree(self.pool).query(self.pool, k=depth + 1)
        own = idx == np.arange(total)[:, None]
        missing = ~own.any(axis=1)
        own[missing, -1] = True
        self.idx = idx[~own].reshape(total, depth)
        self.dist = dist[~own].reshape(total, depth)
        self.floor = _positive_floor(self.dist)

    def _exact(self, labels: np.ndarray, rows: np.ndarray, same: bool) -> np.ndarray:
        out = np.empty(rows.size)
        for lab in (0, 1):
            sel = rows[labels[rows] == lab]
            if not sel.size:
                continue
            target = lab if same else 1 - lab
            members = self.pool[labels == target]
            kk = self.k + 1 if same else self.k
            out[np.searchsorted(rows, sel)] = _kth(cKDTree(members), self.pool[sel], kk)
        return out

    def _kth_by_label(self, labels: np.ndarray, same: bool) -> np.ndarray:
        nb = labels[self.idx]
        hit = (nb == labels[:, None]) if same else (nb != labels[:, None])
        count = np.cumsum(hit, axis=1)
        reached = count[:, -1] >= self.k
        pos = np.argmax(count >= self.k, axis=1)
        out = self.dist[np.arange(labels.size), pos]
        if not reached.all():
            rows = np.flatnonzero(~reached)
            out[rows] = self._exact(labels, rows, same)
        return out

    def statistic(self, labels: np.ndarray) -> float:
        """Unclamped J-divergence for the partition given by ``labels``."""
        rho = self._kth_by_label(labels, same=True)
        nu = self._kth_by_label(labels, same=False)
        rho = np.where(rho > 0, rho, self.floor)
        nu = np.where(nu > 0, nu, self.floor)
        ratio = np.log(nu / rho)
        n = self.n
        offset = math.log(n / (n - 1))
        kl_fb = self.dim / n * float(ratio[labels == 0].sum()) + offset
        kl_bf = self.dim / n * float(ratio[labels == 1].sum()) + offset
        return 0.5 * kl_fb + 0.5 * kl_bf


def _swap_labels(n: int, w: int, rng: np.random.Generator) -> np.ndarray:
    n_blocks = -(-n // w)
    swap = (rng.random(n_blocks) < 0.5)[np.arange(n) // w]
    return np.concatenate([swap, ~swap]).astype(np.int8)


def permutation_p_value(null: np.ndarray, observed: float) -> float:
    null = np.asarray(null, dtype=np.float64)
    return float((1 + np.count_nonzero(null >= observed)) / (null.size + 1))


def block_permutation_test(
    series: Union[TimeSeries, np.ndarray],
    w: int,
    rep: Representation,
    config: ArrowConfig = ArrowConfig(),
    progress: bool = False,
) -> ScaleResult:
    rep_key = _REP_KEY[rep]
    F, B = build_embeddings(series, w, rep, config.max_embed, make_rng(config.seed, _SUBSAMPLE_STREAM, w, rep_key))
    n = F.shape[0]
    if n <= config.k_nn:
        raise InsufficientDataError(f"{n} embedding(s) at w={w} {rep}; need more than k={config.k_nn}")

    j_obs = j_divergence(F, B, config.k_nn)
    pooled = _PooledNeighbours(F, B, config.k_nn)
    observed = pooled.statistic(np.concatenate([np.zeros(n, np.int8), np.ones(n, np.int8)]))

    null = np.empty(config.n_perm)
    reps = range(config.n_perm)
    for r in tqdm(reps, desc=f"perm {rep} w={w}", disable=not progress, leave=False):
        rng = make_rng(config.seed, _PERMUTATION_STREAM, w, rep_key, r)
        null[r] = pooled.statistic(_swap_labels(n, w, rng))

    p = permutation_p_value(null, observed)
    logger.info("  [Arrow] %s w=%d N=%d J_obs=%.4f p=%.4f", rep, w, n, j_obs, p)
    return ScaleResult(
        representation=rep, w=w, j_obs=j_obs, p_perm=p, n_embeddings=n, null_mean=float(max(null.mean(), 0.0)),
    )


def arrow_verdict(
    series: Union[TimeSeries, np.ndarray], config: ArrowConfig = ArrowConfig(), progress: bool = False
) -> ArrowReport:
    results = [
        block_permutation_test(series, w, rep, config, progress)
        for rep in config.representations
        for w in config.windows
    ]
    counts = {
        rep: sum(1 for r in results if r.representation == rep and r.p_perm < config.alpha)
        for rep in config.representations
    }
    verdict = "GO" if any(c >= config.c_min for c in counts.values()) else "NOGO"
    delta = float(np.median([r.j_obs for r in results]))
    name = series.name if isinstance(series, TimeSeries) else ""
    mark = "✅" if verdict == "GO" else "❌"
    logger.info("  [Arrow] %s %s verdict=%s delta_arrow=%.4f counts=%s", mark, name, verdict, delta, counts)
    return ArrowReport(
        series=name, scale_results=results, verdict=verdict, delta_arrow=delta, significant_counts=counts, config=config,
    )
