"""Scoring, triplet sampling and the composite training loss."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError, SamplingError, TrainingError
from .numerics import Tensor

MAX_REJECTIONS = 100


def score(users: Tensor, items: Tensor, pairs) -> Tensor:
    """Dot-product relevance for each (user, item) pair, shape (n, 1)."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) and (
        pairs[:, 0].min() < 0 or pairs[:, 0].max() >= users.shape[0] or pairs[:, 1].min() < 0 or pairs[:, 1].max() >= items.shape[0]
    ):
        raise ContractError("score: pair index out of range")
    return nx.sum_rows(nx.mul(nx.gather_rows(users, pairs[:, 0]), nx.gather_rows(items, pairs[:, 1])))


@dataclass(frozen=True, eq=False)
class TripletBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


def sample_triplets(ds, batch_size: int, rng: np.random.Generator, train_sets=None) -> TripletBatch:
    """Uniform positives over train edges; uniform negatives rejected while they are train items."""
    train = ds.train
    if len(train) == 0:
        raise SamplingError("no training edges to sample from")
    train_sets = train_sets if train_sets is not None else ds.train_sets()
    pick = rng.integers(0, len(train), size=batch_size)
    users = train[pick, 0].copy()
    pos = train[pick, 1].copy()
    neg = rng.integers(0, ds.n_items, size=batch_size)
    for b in range(batch_size):
        seen = train_sets[users[b]]
        if len(seen) >= ds.n_items:
            raise SamplingError(f"user {users[b]} interacted with every item")
        tries = 0
        while int(neg[b]) in seen and tries < MAX_REJECTIONS:
            neg[b] = rng.integers(0, ds.n_items)
            tries += 1
        if int(neg[b]) in seen:
            candidates = np.setdiff1d(np.arange(ds.n_items), np.fromiter(seen, dtype=np.int64))
            neg[b] = candidates[rng.integers(len(candidates))]
    return TripletBatch(users, pos, neg)


def bpr_loss(pos_scores: Tensor, neg_scores: Tensor, reduction: str = "mean") -> Tensor:
    """-log sigmoid(pos - neg) = softplus(neg - pos), summed or averaged over triplets."""
    if pos_scores.shape != neg_scores.shape:
        raise ContractError(f"bpr: {pos_scores.shape} positive vs {neg_scores.shape} negative scores")
    losses = nx.softplus(nx.sub(neg_scores, pos_scores))
    total = nx.total_sum(losses)
    if reduction == "sum":
        return total
    if reduction == "mean":
        return nx.scale(total, 1.0 / max(pos_scores.shape[0], 1))
    raise ContractError(f"unknown reduction {reduction!r}")


def infonce_loss(view1: Tensor, view2: Tensor, temperature: float = 0.2) -> Tensor:
    """Mean over anchors of -log softmax of cosine similarities, positives on the diagonal."""
    if view1.shape != view2.shape:
        raise ContractError(f"infonce: view shapes differ {view1.shape} vs {view2.shape}")
    if temperature <= 0:
        raise ContractError("infonce temperature must be positive")
    for v in (view1, view2):
        if np.any((v.value * v.value).sum(axis=1) == 0):
            raise ContractError("infonce: zero-norm embedding has no cosine similarity")
    a = nx.normalize_rows(view1)
    b = nx.normalize_rows(view2)
    sim = nx.scale(nx.matmul(a, nx.transpose(b)), 1.0 / temperature)
    n = sim.shape[0]
    positives = nx.scale(nx.sum_rows(nx.mul(a, b)), 1.0 / temperature)
    return nx.scale(nx.total_sum(nx.sub(nx.logsumexp_rows(sim), positives)), 1.0 / n)


def l2_penalty(params) -> Tensor:
    """Sum of squared entries over every parameter, in a fixed (sorted-name) order."""
    out = None
    for p in sorted(params, key=lambda t: t.name or ""):
        term = nx.total_sum(nx.square(p))
        out = term if out is None else nx.add(out, term)
    return out if out is not None else nx.constant(0.0)


@dataclass
class LossBreakdown:
    bpr: float
    cl: float
    rq_visual: float
    rq_textual: float
    l2: float
    total: float

    def as_row(self) -> list[float]:
        return [self.bpr, self.cl, self.rq_visual, self.rq_textual, self.l2, self.total]


def total_loss(
    bpr: Tensor,
    cl: Tensor | None,
    rq_visual: Tensor | None,
    rq_textual: Tensor | None,
    l2: Tensor,
    lambda_cl: float,
    lambda_rq: float,
    lambda_reg: float,
) -> tuple[Tensor, LossBreakdown]:
    """bpr + lambda_cl * cl + lambda_rq * (rq_v + rq_t) + lambda_reg * l2.

    Absent components (ablated terms) contribute exactly 0. The tokenizer terms
    arrive already rarity-weighted and batch-averaged.
    """
    parts = {"bpr": bpr, "cl": cl, "rq_visual": rq_visual, "rq_textual": rq_textual, "l2": l2}
    for name, t in parts.items():
        if t is not None and not np.isfinite(t.item()):
            raise TrainingError(f"loss component {name} is not finite")
    val = {k: (t.item() if t is not None else 0.0) for k, t in parts.items()}

    total = bpr
    if cl is not None and lambda_cl != 0:
        total = nx.add(total, nx.scale(cl, lambda_cl))
    rq = None
    if rq_visual is not None:
        rq = rq_visual
    if rq_textual is not None:
        rq = rq_textual if rq is None else nx.add(rq, rq_textual)
    if rq is not None and lambda_rq != 0:
        total = nx.add(total, nx.scale(rq, lambda_rq))
    if lambda_reg != 0:
        total = nx.add(total, nx.scale(l2, lambda_reg))
    if not math.isfinite(total.item()):
        raise TrainingError("total loss is not finite")
    return total, LossBreakdown(val["bpr"], val["cl"], val["rq_visual"], val["rq_textual"], val["l2"], total.item())


def recombine(b: LossBreakdown, lambda_cl: float, lambda_rq: float, lambda_reg: float) -> float:
    """Rebuild ``b.total`` from its components in the same summation order as ``total_loss``."""
    total = b.bpr
    if lambda_cl != 0:
        total = total + b.cl * lambda_cl
    if lambda_rq != 0:
        total = total + (b.rq_visual + b.rq_textual) * lambda_rq
    if lambda_reg != 0:
        total = total + b.l2 * lambda_reg
    return total
