"""Two-tower network: embedding tables, tower MLPs, task heads, dot scoring.

Both towers map their inputs into a common k-dimensional space. The
retrieval score is the dot product of the two tower outputs after each
passes its retrieval-head projection; the rating prediction is a dense
head over the elementwise product of the raw tower outputs, so the rating
task can calibrate scale and offset onto the star range.

Tower shape (fixed): input -> 2k hidden with rectifier -> linear k.
User tower input is user embedding (+3 date slots, zeroed when absent);
business tower input is business embedding (+k pooled text slots, zeroed
when absent).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .features import CandidateFeatures, QueryFeatures

DATE_DIM = 3

TOWER_LAYER_NAMES = ("0.w", "0.b", "1.w", "1.b")


class IndexOutOfBounds(Exception):
    pass


@dataclass
class ModelParams:
    """All trainable tensors, addressed by name.

    Names: user_table, business_table, text_table (iff use_text),
    {user,business}_tower.{0,1}.{w,b}, rating_head.{w,b},
    retrieval_head.{user,item}.{w,b}.
    """

    k: int
    use_text: bool
    use_date: bool
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    hidden_activation: str = "relu"  # "relu" | "none"

    def clone(self) -> "ModelParams":
        return ModelParams(
            k=self.k,
            use_text=self.use_text,
            use_date=self.use_date,
            tensors={n: t.copy() for n, t in self.tensors.items()},
            hidden_activation=self.hidden_activation,
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            k=self.k,
            use_text=self.use_text,
            use_date=self.use_date,
            tensors={n: t.astype(dtype) for n, t in self.tensors.items()},
            hidden_activation=self.hidden_activation,
        )

    @property
    def dtype(self):
        return self.tensors["user_table"].dtype

    def zeros_like_tensors(self) -> dict[str, np.ndarray]:
        return {n: np.zeros_like(t) for n, t in self.tensors.items()}


def init_params(
    seed: int,
    num_users: int,
    num_businesses: int,
    k: int = 32,
    use_text: bool = True,
    use_date: bool = True,
    text_buckets: int = 4096,
    dtype=np.float32,
) -> ModelParams:
    """Seeded init: weights/embeddings uniform +-1/sqrt(fan_in), biases zero."""
    if min(num_users, num_businesses, k) < 1:
        raise ValueError("all dimensions must be positive")
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    def dense(name, d_in, d_out, tensors):
        tensors[f"{name}.w"] = uniform((d_in, d_out), d_in)
        tensors[f"{name}.b"] = np.zeros(d_out, dtype=dtype)

    tensors: dict[str, np.ndarray] = {}
    tensors["user_table"] = uniform((num_users, k), k)
    tensors["business_table"] = uniform((num_businesses, k), k)
    if use_text:
        tensors["text_table"] = uniform((text_buckets, k), k)
    dense("user_tower.0", k + DATE_DIM, 2 * k, tensors)
    dense("user_tower.1", 2 * k, k, tensors)
    dense("business_tower.0", 2 * k, 2 * k, tensors)
    dense("business_tower.1", 2 * k, k, tensors)
    dense("rating_head", k, 1, tensors)
    dense("retrieval_head.user", k, k, tensors)
    dense("retrieval_head.item", k, k, tensors)
    return ModelParams(k=k, use_text=use_text, use_date=use_date, tensors=tensors)


# ---------------------------------------------------------------------------
# Batched feature blocks and forward passes (shared with the trainer).
# ---------------------------------------------------------------------------


@dataclass
class QueryBlock:
    user_idx: np.ndarray  # [n] int
    date: np.ndarray  # [n, 3] float64 (zeros when absent)

    @classmethod
    def from_features(cls, queries: Sequence[QueryFeatures]) -> "QueryBlock":
        n = len(queries)
        user_idx = np.fromiter((q.user_index for q in queries), dtype=np.int64, count=n)
        date = np.zeros((n, DATE_DIM), dtype=np.float64)
        for i, q in enumerate(queries):
            if q.date_features is not None:
                date[i, :] = q.date_features
        return cls(user_idx=user_idx, date=date)


@dataclass
class CandidateBlock:
    """CSR-style layout of sparse per-candidate text counts."""

    business_idx: np.ndarray  # [m] int
    indptr: np.ndarray  # [m+1] int
    buckets: np.ndarray  # [nnz] int
    counts: np.ndarray  # [nnz] float64
    totals: np.ndarray  # [m] float64 (0 where no text)

    @classmethod
    def from_features(cls, candidates: Sequence[CandidateFeatures]) -> "CandidateBlock":
        m = len(candidates)
        business_idx = np.fromiter(
            (c.business_index for c in candidates), dtype=np.int64, count=m
        )
        indptr = np.zeros(m + 1, dtype=np.int64)
        buckets: list[int] = []
        counts: list[float] = []
        for i, c in enumerate(candidates):
            if c.text_counts:
                for b, v in c.text_counts.items():
                    buckets.append(b)
                    counts.append(float(v))
            indptr[i + 1] = len(buckets)
        bucket_arr = np.asarray(buckets, dtype=np.int64)
        count_arr = np.asarray(counts, dtype=np.float64)
        rows = np.repeat(np.arange(m), np.diff(indptr))
        totals = np.zeros(m, dtype=np.float64)
        np.add.at(totals, rows, count_arr)
        return cls(
            business_idx=business_idx,
            indptr=indptr,
            buckets=bucket_arr,
            counts=count_arr,
            totals=totals,
        )

    def __len__(self) -> int:
        return len(self.business_idx)


@dataclass
class TowerCache:
    """Forward intermediates needed by backprop."""

    x: np.ndarray  # tower input [n, d_in]
    pre1: np.ndarray  # hidden preactivation [n, 2k]
    h1: np.ndarray  # hidden activation [n, 2k]
    out: np.ndarray  # tower output [n, k]


def _tower_forward(params: ModelParams, prefix: str, x: np.ndarray) -> TowerCache:
    t = params.tensors
    pre1 = x @ t[f"{prefix}.0.w"] + t[f"{prefix}.0.b"]
    if params.hidden_activation == "relu":
        h1 = np.maximum(pre1, 0)
    else:
        h1 = pre1
    out = h1 @ t[f"{prefix}.1.w"] + t[f"{prefix}.1.b"]
    return TowerCache(x=x, pre1=pre1, h1=h1, out=out)


def forward_users(params: ModelParams, block: QueryBlock) -> TowerCache:
    table = params.tensors["user_table"]
    if block.user_idx.size and (block.user_idx.min() < 0 or block.user_idx.max() >= table.shape[0]):
        raise IndexOutOfBounds("user index outside embedding table")
    dt = params.dtype
    x = np.concatenate([table[block.user_idx], block.date.astype(dt)], axis=1)
    return _tower_forward(params, "user_tower", x)


def pooled_text(params: ModelParams, block: CandidateBlock) -> np.ndarray:
    """Count-weighted mean of text-bucket embeddings, zero where no text."""
    m = len(block)
    k = params.k
    pooled = np.zeros((m, k), dtype=params.dtype)
    if not params.use_text or block.buckets.size == 0:
        return pooled
    table = params.tensors["text_table"]
    weighted = table[block.buckets] * block.counts[:, None].astype(params.dtype)
    rows = np.repeat(np.arange(m), np.diff(block.indptr))
    np.add.at(pooled, rows, weighted)
    nonzero = block.totals > 0
    pooled[nonzero] /= block.totals[nonzero, None].astype(params.dtype)
    return pooled


def forward_candidates(params: ModelParams, block: CandidateBlock) -> TowerCache:
    table = params.tensors["business_table"]
    if block.business_idx.size and (
        block.business_idx.min() < 0 or block.business_idx.max() >= table.shape[0]
    ):
        raise IndexOutOfBounds("business index outside embedding table")
    x = np.concatenate([table[block.business_idx], pooled_text(params, block)], axis=1)
    return _tower_forward(params, "business_tower", x)


def retrieval_project(params: ModelParams, side: str, out: np.ndarray) -> np.ndarray:
    t = params.tensors
    return out @ t[f"retrieval_head.{side}.w"] + t[f"retrieval_head.{side}.b"]


def rating_predict(params: ModelParams, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rating head over the elementwise product of the tower outputs."""
    t = params.tensors
    return ((u * v) @ t["rating_head.w"] + t["rating_head.b"])[:, 0]


# ---------------------------------------------------------------------------
# Single-example contract surface.
# ---------------------------------------------------------------------------


def user_encode(x: QueryFeatures, params: ModelParams, task: str = "retrieval") -> np.ndarray:
    """Encode one query into the common k-space (retrieval head iff asked)."""
    cache = forward_users(params, QueryBlock.from_features([x]))
    out = cache.out
    if task == "retrieval":
        out = retrieval_project(params, "user", out)
    return out[0]


def location_encode(
    y: CandidateFeatures, params: ModelParams, task: str = "retrieval"
) -> np.ndarray:
    cache = forward_candidates(params, CandidateBlock.from_features([y]))
    out = cache.out
    if task == "retrieval":
        out = retrieval_project(params, "item", out)
    return out[0]


def score(
    x: QueryFeatures, y: CandidateFeatures, params: ModelParams, task: str = "retrieval"
) -> float:
    """Dot-product affinity (retrieval) or calibrated rating prediction."""
    if task == "rating":
        u = user_encode(x, params, task="rating")
        v = location_encode(y, params, task="rating")
        return float(rating_predict(params, u[None, :], v[None, :])[0])
    u = user_encode(x, params, task="retrieval")
    v = location_encode(y, params, task="retrieval")
    return float(u @ v)


def score_all(
    x: QueryFeatures,
    candidates: Sequence[CandidateFeatures] | CandidateBlock,
    params: ModelParams,
) -> np.ndarray:
    """Retrieval scores of one query against every candidate."""
    if not isinstance(candidates, CandidateBlock):
        candidates = CandidateBlock.from_features(candidates)
    u = user_encode(x, params, task="retrieval")
    v = retrieval_project(params, "item", forward_candidates(params, candidates).out)
    return v @ u


def candidate_embeddings(
    params: ModelParams, candidates: Sequence[CandidateFeatures] | CandidateBlock
) -> np.ndarray:
    """Precompute retrieval-side candidate embeddings [m, k]."""
    if not isinstance(candidates, CandidateBlock):
        candidates = CandidateBlock.from_features(candidates)
    return retrieval_project(params, "item", forward_candidates(params, candidates).out)
