"""Losses, gradients, negative mining, and the encoder training loops.

The bi-encoder trains with a margin ranking loss over L2 distances,
max[L2(q, d+) - L2(q, d-) + margin, 0]; the cross-encoder trains with a
softmax cross-entropy loss over one positive and n mined negatives. Gradients
touch only the embedding rows that appear in an example and are applied
sparsely; adaptive-moment state is allocated lazily per row.
"""

from __future__ import annotations

import logging
import random
import time
from dataclasses import dataclass, field

import numpy as np

from .corpus import ReviewDoc
from .encoder import (CrossEncoderModel, EncoderModel, dropout_mask, embed_tokens,
                      joint_tokens)
from .qgen import SyntheticQuery
from .util import derive_seed

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Non-finite loss during training; carries the offending batch context."""


@dataclass
class TrainingExample:
    query_text: str
    positive_text: str
    negative_texts: list[str]
    query_id: str = ""

    def __post_init__(self):
        if not self.query_text.strip() or not self.positive_text.strip():
            raise ValueError("query and positive texts must be non-empty")
        if not self.negative_texts:
            raise ValueError("at least one negative is required")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 5
    margin: float = 1.0
    n_negatives: int = 4
    seed: int = 0
    optimizer: str = "adam"  # or "sgd"
    hard_negative_rank_range: tuple[int, int] = (100, 300)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        lo, hi = self.hard_negative_rank_range
        if lo >= hi:
            raise ValueError(f"rank range lo {lo} must be < hi {hi}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def _accumulate_rows(grads: dict[int, np.ndarray], tokens: list[int],
                     upstream: np.ndarray) -> None:
    """Distribute a mean-pooled embedding gradient onto its token rows."""
    if not tokens:
        return
    share = upstream / len(tokens)
    for t in tokens:
        if t in grads:
            grads[t] = grads[t] + share
        else:
            grads[t] = share.copy()


def margin_loss_and_grad(model: EncoderModel, ex: TrainingExample,
                         margin: float = 1.0) -> tuple[float, dict[int, np.ndarray]]:
    """Margin ranking loss and its sparse gradient over embedding rows.

    Returns gradient {} when the hinge is inactive. A zero-distance pair
    (identical token multisets) contributes a zero subgradient for that
    distance term and is logged.
    """
    if len(ex.negative_texts) != 1:
        raise ValueError("bi-encoder training uses exactly one negative per example")
    q_tok = model.tokenize(ex.query_text)
    p_tok = model.tokenize(ex.positive_text)
    n_tok = model.tokenize(ex.negative_texts[0])
    q, p, n = (embed_tokens(model, t) for t in (q_tok, p_tok, n_tok))

    diff_pos = q - p
    diff_neg = q - n
    d_pos = float(np.linalg.norm(diff_pos))
    d_neg = float(np.linalg.norm(diff_neg))
    loss = d_pos - d_neg + margin
    if loss <= 0:
        return 0.0, {}

    if d_pos > 0:
        u_pos = diff_pos / d_pos
    else:
        u_pos = np.zeros(model.dim)
        log.warning("margin loss: zero-distance (query, positive) pair; subgradient 0 used")
    if d_neg > 0:
        u_neg = diff_neg / d_neg
    else:
        u_neg = np.zeros(model.dim)
        log.warning("margin loss: zero-distance (query, negative) pair; subgradient 0 used")

    grads: dict[int, np.ndarray] = {}
    _accumulate_rows(grads, q_tok, u_pos - u_neg)
    _accumulate_rows(grads, p_tok, -u_pos)
    _accumulate_rows(grads, n_tok, u_neg)
    return float(loss), grads


@dataclass
class CrossGrad:
    emb: dict[int, np.ndarray]
    W: np.ndarray
    w: np.ndarray


def ce_loss_and_grad(model: CrossEncoderModel, ex: TrainingExample,
                     seed: int = 0, training_mode: bool = True
                     ) -> tuple[float, CrossGrad]:
    """Softmax cross-entropy loss over [positive] + negatives, with the
    gradient for embedding rows (sparse), W, and w. The dropout masks are
    fixed by the seed and shared between forward and backward."""
    candidates = [ex.positive_text] + list(ex.negative_texts)
    token_lists = [joint_tokens(model, ex.query_text, c) for c in candidates]
    pooled = [embed_tokens(model.base, toks) for toks in token_lists]

    hidden = model.hidden
    masks = []
    for j in range(len(candidates)):
        if training_mode and model.dropout_rate > 0:
            masks.append(dropout_mask(hidden, model.dropout_rate, derive_seed(seed, j)))
        else:
            masks.append(np.ones(hidden))

    z = [model.W.T @ h for h in pooled]
    z_dropped = [z_j * m for z_j, m in zip(z, masks)]
    scores = np.array([model.w @ zd for zd in z_dropped])

    shifted = scores - scores.max()
    exp = np.exp(shifted)
    probs = exp / exp.sum()
    loss = float(-shifted[0] + np.log(exp.sum()))

    grad_scores = probs.copy()
    grad_scores[0] -= 1.0

    grad_w = np.zeros_like(model.w)
    grad_W = np.zeros_like(model.W)
    emb_grads: dict[int, np.ndarray] = {}
    for j, gs in enumerate(grad_scores):
        grad_w += gs * z_dropped[j]
        grad_z = gs * (model.w * masks[j])       # d loss / d z_j (pre-dropout)
        grad_W += np.outer(pooled[j], grad_z)
        grad_h = model.W @ grad_z
        _accumulate_rows(emb_grads, token_lists[j], grad_h)
    return loss, CrossGrad(emb=emb_grads, W=grad_W, w=grad_w)


def sample_random_negatives(examples: list[tuple[SyntheticQuery, ReviewDoc]],
                            pool: list[ReviewDoc], seed: int) -> list[TrainingExample]:
    """One uniform random negative per (query, positive), drawn from the pool
    excluding the query's own user's docs."""
    rng = random.Random(derive_seed(seed, "random-negatives"))
    out = []
    for query, positive in examples:
        eligible = [d for d in pool if d.user_id != query.user_id]
        if not eligible:
            raise ValueError(f"no eligible negatives for user {query.user_id}")
        negative = eligible[rng.randrange(len(eligible))]
        out.append(TrainingExample(query_text=query.text, positive_text=positive.text,
                                   negative_texts=[negative.text], query_id=query.query_id))
    return out


def rank_pool(model: EncoderModel, query_text: str, pool: list[ReviewDoc],
              pool_vectors: np.ndarray | None = None) -> list[int]:
    """Pool indices sorted by ascending L2 distance to the query (ties by
    item_id then doc_id). pool_vectors, if given, must be the pool's
    embeddings row by row."""
    if pool_vectors is None:
        pool_vectors = np.stack([embed_tokens(model, model.tokenize(d.text)) for d in pool])
    qv = embed_tokens(model, model.tokenize(query_text))
    dists = np.linalg.norm(pool_vectors - qv, axis=1)
    return sorted(range(len(pool)), key=lambda i: (dists[i], pool[i].item_id, pool[i].doc_id))


def hard_negative_window(pool_size: int, rank_range: tuple[int, int], k: int) -> tuple[int, int]:
    """1-indexed mining window, clipped to [min(lo, pool-k), pool] for pools
    smaller than the nominal upper rank."""
    lo, hi = rank_range
    if pool_size < hi:
        return max(1, min(lo, pool_size - k)), pool_size
    return lo, hi


def mine_hard_negatives(biencoder: EncoderModel, query: SyntheticQuery,
                        pool: list[ReviewDoc], rank_range: tuple[int, int],
                        k: int, seed: int, positive: ReviewDoc,
                        pool_vectors: np.ndarray | None = None) -> TrainingExample:
    """Sample k negatives uniformly from the query's mid-rank window of the
    bi-encoder's own ranking of the pool, excluding the query's user's docs."""
    order = rank_pool(biencoder, query.text, pool, pool_vectors)
    return _example_from_ranking(order, query, pool, rank_range, k, seed, positive)


def _example_from_ranking(order: list[int], query: SyntheticQuery, pool: list[ReviewDoc],
                          rank_range: tuple[int, int], k: int, seed: int,
                          positive: ReviewDoc) -> TrainingExample:
    lo, hi = hard_negative_window(len(pool), rank_range, k)
    window = [pool[i] for i in order[lo - 1:hi] if pool[i].user_id != query.user_id]
    rng = random.Random(derive_seed(seed, "hard-negatives", query.query_id, positive.doc_id))
    if len(window) < k:
        log.warning("query %s: only %d candidates in rank window [%d, %d], taking all",
                    query.query_id, len(window), lo, hi)
        chosen = list(window)
    else:
        chosen = rng.sample(window, k)
    return TrainingExample(query_text=query.text, positive_text=positive.text,
                           negative_texts=[d.text for d in chosen], query_id=query.query_id)


def mine_hard_negatives_for_query(biencoder: EncoderModel, query: SyntheticQuery,
                                  pool: list[ReviewDoc], rank_range: tuple[int, int],
                                  k: int, seed: int, positives: list[ReviewDoc],
                                  pool_vectors: np.ndarray | None = None
                                  ) -> list[TrainingExample]:
    """Batched mining: ranks the pool once and draws negatives per positive."""
    order = rank_pool(biencoder, query.text, pool, pool_vectors)
    return [_example_from_ranking(order, query, pool, rank_range, k, seed, pos)
            for pos in positives]


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class _RowAdam:
    """Adaptive-moment updates for embedding rows, state allocated lazily."""

    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    def step(self, table: np.ndarray, grads: dict[int, np.ndarray], t: int) -> None:
        b1t = 1 - self.beta1 ** t
        b2t = 1 - self.beta2 ** t
        for row, g in grads.items():
            m = self.m.get(row)
            if m is None:
                m = np.zeros_like(g)
                self.v[row] = np.zeros_like(g)
            v = self.v[row]
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[row], self.v[row] = m, v
            table[row] -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


class _DenseAdam:
    def __init__(self, shape, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)

    def step(self, param: np.ndarray, grad: np.ndarray, t: int) -> None:
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** t)
        v_hat = self.v / (1 - self.beta2 ** t)
        param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainResult:
    epoch_losses: list[float]
    metrics: list[dict] = field(default_factory=list)  # step, epoch, mean_loss, wall_ms


def _epoch_order(n: int, seed: int, epoch: int) -> list[int]:
    order = list(range(n))
    random.Random(derive_seed(seed, "shuffle", epoch)).shuffle(order)
    return order


def _check_finite(loss: float, batch_index: int, ids: list[str]) -> None:
    if not np.isfinite(loss):
        raise NumericalError(
            f"non-finite loss {loss} in batch {batch_index} (examples: {ids[:5]})")


def train_biencoder(dataset: list[TrainingExample], cfg: TrainConfig,
                    model: EncoderModel,
                    resample=None) -> TrainResult:
    """Mini-batch training with the margin ranking loss. `resample(epoch)`
    may supply a fresh dataset per epoch (used to redraw random negatives);
    otherwise the given dataset is reused. Deterministic for a fixed seed."""
    if not dataset and resample is None:
        raise ValueError("dataset must be non-empty")
    row_opt = _RowAdam(cfg.learning_rate) if cfg.optimizer == "adam" else None
    result = TrainResult(epoch_losses=[])
    t0 = time.monotonic()
    step = 0
    for epoch in range(cfg.epochs):
        data = resample(epoch) if resample is not None else dataset
        order = _epoch_order(len(data), cfg.seed, epoch)
        epoch_loss = 0.0
        for b0 in range(0, len(order), cfg.batch_size):
            batch = [data[i] for i in order[b0:b0 + cfg.batch_size]]
            step += 1
            batch_grads: dict[int, np.ndarray] = {}
            batch_loss = 0.0
            for ex in batch:
                loss, grads = margin_loss_and_grad(model, ex, cfg.margin)
                batch_loss += loss
                for row, g in grads.items():
                    if row in batch_grads:
                        batch_grads[row] = batch_grads[row] + g
                    else:
                        batch_grads[row] = g
            mean_loss = batch_loss / len(batch)
            _check_finite(mean_loss, step, [ex.query_id for ex in batch])
            scaled = {row: g / len(batch) for row, g in batch_grads.items()}
            if row_opt is not None:
                row_opt.step(model.embedding, scaled, step)
            else:
                for row, g in scaled.items():
                    model.embedding[row] -= cfg.learning_rate * g
            epoch_loss += batch_loss
            result.metrics.append({"step": step, "epoch": epoch, "mean_loss": mean_loss,
                                   "wall_ms": int((time.monotonic() - t0) * 1000)})
        result.epoch_losses.append(epoch_loss / len(data))
    return result


def train_crossencoder(dataset: list[TrainingExample], cfg: TrainConfig,
                       model: CrossEncoderModel) -> TrainResult:
    """Mini-batch training with the cross-entropy loss; per-step dropout seeds
    derive from (cfg.seed, step)."""
    if not dataset:
        raise ValueError("dataset must be non-empty")
    for ex in dataset:
        if len(ex.negative_texts) != cfg.n_negatives:
            raise ValueError(
                f"example {ex.query_id!r} has {len(ex.negative_texts)} negatives, "
                f"expected {cfg.n_negatives}")
    adam = cfg.optimizer == "adam"
    row_opt = _RowAdam(cfg.learning_rate) if adam else None
    W_opt = _DenseAdam(model.W.shape, cfg.learning_rate) if adam else None
    w_opt = _DenseAdam(model.w.shape, cfg.learning_rate) if adam else None
    result = TrainResult(epoch_losses=[])
    t0 = time.monotonic()
    step = 0
    for epoch in range(cfg.epochs):
        order = _epoch_order(len(dataset), cfg.seed, epoch)
        epoch_loss = 0.0
        for b0 in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[b0:b0 + cfg.batch_size]]
            step += 1
            emb_grads: dict[int, np.ndarray] = {}
            grad_W = np.zeros_like(model.W)
            grad_w = np.zeros_like(model.w)
            batch_loss = 0.0
            for j, ex in enumerate(batch):
                loss, grad = ce_loss_and_grad(model, ex,
                                              seed=derive_seed(cfg.seed, "dropout", step, j))
                batch_loss += loss
                grad_W += grad.W
                grad_w += grad.w
                for row, g in grad.emb.items():
                    if row in emb_grads:
                        emb_grads[row] = emb_grads[row] + g
                    else:
                        emb_grads[row] = g
            mean_loss = batch_loss / len(batch)
            _check_finite(mean_loss, step, [ex.query_id for ex in batch])
            inv = 1.0 / len(batch)
            scaled = {row: g * inv for row, g in emb_grads.items()}
            if adam:
                row_opt.step(model.base.embedding, scaled, step)
                W_opt.step(model.W, grad_W * inv, step)
                w_opt.step(model.w, grad_w * inv, step)
            else:
                for row, g in scaled.items():
                    model.base.embedding[row] -= cfg.learning_rate * g
                model.W -= cfg.learning_rate * grad_W * inv
                model.w -= cfg.learning_rate * grad_w * inv
            epoch_loss += batch_loss
            result.metrics.append({"step": step, "epoch": epoch, "mean_loss": mean_loss,
                                   "wall_ms": int((time.monotonic() - t0) * 1000)})
        result.epoch_losses.append(epoch_loss / len(dataset))
    return result
