"""Relationship Attention: subject/object projections, pair scoring, hard
top-k selection, relationship embeddings, boxes and text classification.

The score matrix ``p = S O^T`` is computed for all token pairs. Two rounds of
selection follow: the top-M diagonal entries (objectness) pick instances, then
the top-k off-diagonal entries among those instances pick pairs. Only
selected entries are embedded, classified and supervised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .numerics import (
    MLP,
    LayerNorm,
    Linear,
    Module,
    Tensor,
    exp,
    gelu,
    l2_normalize,
    maximum,
    sigmoid,
)

MIN_BOX_SIZE = 1e-3


class ProjectionMLP(Module):
    """3-layer d -> d MLP with GeLU hiddens, input skip, LayerNorm on the output."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)
        self.fc3 = Linear(dim, dim, rng)
        self.norm = LayerNorm(dim)
        # keeps p = s.o near unit scale at init instead of ~d
        self.norm.scale.data[:] = 1.0 / np.sqrt(dim)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.fc3(gelu(self.fc2(gelu(self.fc1(x)))))
        return self.norm(x + h)


class SubjectObjectProjector(Module):
    """Separate subject and object MLPs; ``shared=True`` is the symmetric ablation."""

    def __init__(self, dim: int, rng: np.random.Generator, shared: bool = False):
        self.subject_mlp = ProjectionMLP(dim, rng)
        self.object_mlp = self.subject_mlp if shared else ProjectionMLP(dim, rng)
        self.shared = shared

    def __call__(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        s = self.subject_mlp(tokens)
        o = s if self.shared else self.object_mlp(tokens)
        return s, o


def relationship_scores(s: Tensor, o: Tensor) -> Tensor:
    """p[..., i, j] = <s_i, o_j>, raw logits."""
    if s.shape != o.shape:
        raise ContractError(f"subject/object shapes differ: {s.shape} vs {o.shape}")
    return s @ o.swapaxes(-1, -2)


@dataclass(frozen=True)
class SelectionResult:
    """Selected instance tokens (descending objectness) and ordered pairs (descending score)."""

    instances: np.ndarray          # (M,) token indices
    pairs: np.ndarray              # (k, 2) token indices, i != j

    @property
    def self_pairs(self) -> np.ndarray:
        return np.stack([self.instances, self.instances], axis=1)

    def all_pairs(self) -> np.ndarray:
        """Self-pairs first, then relationship pairs: the embedding order."""
        return np.concatenate([self.self_pairs, self.pairs.reshape(-1, 2)], axis=0)


def select(p: np.ndarray, m: int, k: int) -> SelectionResult:
    """Two-round hard top-k selection on one N x N score matrix.

    Ties go to the lower token index (instances) and to the lexicographically
    smaller (i, j) token pair (pairs).
    """
    p = np.asarray(p)
    n = p.shape[0]
    if p.shape != (n, n):
        raise ContractError(f"score matrix must be square, got {p.shape}")
    if not 1 <= m <= n:
        raise ContractError(f"M={m} outside [1, {n}]")
    if not 0 <= k <= m * (m - 1):
        raise ContractError(f"k={k} outside [0, {m * (m - 1)}]")
    diag = np.diagonal(p)
    instances = np.argsort(-diag, kind="stable")[:m]
    members = np.sort(instances)
    ii, jj = np.meshgrid(members, members, indexing="ij")
    off = ii != jj
    cand_i, cand_j = ii[off], jj[off]            # lexicographic (i, j) order
    order = np.argsort(-p[cand_i, cand_j], kind="stable")[:k]
    pairs = np.stack([cand_i[order], cand_j[order]], axis=1).astype(np.int64)
    return SelectionResult(instances=instances.astype(np.int64), pairs=pairs.reshape(k, 2))


def pair_reduction(n: int, m: int, k: int) -> float:
    """Fraction of the N^2 score entries that are never embedded (k pairs + M self-pairs kept)."""
    return 1.0 - (k + m) / float(n * n)


def patch_centers(grid: int) -> np.ndarray:
    """(N, 2) normalized (cx, cy) of every patch, row-major."""
    idx = np.arange(grid * grid)
    rows, cols = np.divmod(idx, grid)
    return np.stack([(cols + 0.5) / grid, (rows + 0.5) / grid], axis=1)


class RelationHead(Module):
    def __init__(self, dim: int, grid: int, rng: np.random.Generator, shared_mlp: bool = False):
        self.projector = SubjectObjectProjector(dim, rng, shared=shared_mlp)
        self.fuse_norm = LayerNorm(dim)
        self.post_mlp = MLP([dim, dim, dim], rng)
        self.box_head = Linear(dim, 4, rng)
        self.grid = grid
        centers = patch_centers(grid)
        self._center_logits = np.log(centers / (1.0 - centers)).astype(np.float32)

    def project_subject_object(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        return self.projector(tokens)

    def relationship_embedding(self, s_sel: Tensor, o_sel: Tensor) -> Tensor:
        """r_ij = PostMLP(LayerNorm(s_i + o_j)) for already-gathered rows."""
        return self.post_mlp(self.fuse_norm(s_sel + o_sel))

    def predict_boxes(self, inst_tokens: Tensor, inst_index: np.ndarray) -> Tensor:
        """(cx, cy, w, h) in [0, 1] for instance tokens; centers are offsets from the patch centre."""
        raw = self.box_head(inst_tokens)
        offset = np.zeros(raw.shape, raw.data.dtype)
        offset[..., :2] = self._center_logits[inst_index]
        floor = np.zeros(raw.shape[-1], raw.data.dtype)
        floor[2:] = MIN_BOX_SIZE
        return maximum(sigmoid(raw + offset), floor)


def classify(r: Tensor, queries: Tensor, log_temperature: Tensor, bias: Tensor) -> Tensor:
    """logit_q = temperature * cos(r, Q_q) + bias, with Q rows already unit length."""
    if r.shape[-1] != queries.shape[-1]:
        raise ContractError(f"embedding dim {r.shape[-1]} != query dim {queries.shape[-1]}")
    cos = l2_normalize(r) @ queries.swapaxes(-1, -2)
    return cos * exp(log_temperature) + bias
