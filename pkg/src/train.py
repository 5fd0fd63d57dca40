"""
BPR training for QGCN
Negative sampling, the BPR objective, exact gradients and Adam updates
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from config import ModelConfig, TrainConfig
from graph import InteractionSet, NormalizedAdjacency
from model import ModelParams, backpropagate, forward

logger = logging.getLogger(__name__)


class Triple(NamedTuple):
    """One BPR sample: user, observed item, unobserved item"""
    user: int
    pos: int
    neg: int


class SaturatedUserError(ValueError):
    """Raised when no user in the training graph has an unobserved item"""


def sample_batch(train: InteractionSet, size: int, rng: np.random.Generator) -> List[Triple]:
    """
    Draw `size` triples: a training edge uniformly, then a negative item by
    rejection sampling over the user's unobserved items.

    Users who have consumed every item are skipped and the edge is redrawn.
    """
    if train.n_edges == 0:
        raise ValueError("Cannot sample triples from an empty training graph")
    degrees = train.user_degrees()
    if np.all(degrees[train.edges[:, 0]] >= train.n_items):
        raise SaturatedUserError("Every training user has interacted with every item")

    triples = []
    while len(triples) < size:
        user, pos = train.edges[rng.integers(train.n_edges)]
        if degrees[user] >= train.n_items:
            continue
        neg = rng.integers(train.n_items)
        while train.has_edge(user, neg):
            neg = rng.integers(train.n_items)
        triples.append(Triple(int(user), int(pos), int(neg)))
    return triples


def _batch_arrays(batch: Sequence[Triple]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    arr = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    return arr[:, 0], arr[:, 1], arr[:, 2]


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def regularization(params: ModelParams, reg: float, scope: str,
                   batch: Optional[Sequence[Triple]] = None, n_users: int = 0) -> float:
    """
    L2 penalty: squared norms of the batch's layer-0 rows averaged over the
    batch ('ego'), or of every trainable tensor ('all').
    """
    if reg == 0:
        return 0.0
    if scope == 'all':
        return reg * float(sum(np.sum(t * t) for t in params.tensors()))
    users, pos, neg = _batch_arrays(batch)
    table = params.embedding_table()
    rows = np.concatenate([users, n_users + pos, n_users + neg])
    return reg * float(np.sum(table[rows] ** 2)) / len(users)


def _regularization_grad(grads: ModelParams, params: ModelParams, reg: float, scope: str,
                         batch: Sequence[Triple], n_users: int):
    if reg == 0:
        return
    if scope == 'all':
        for g, t in zip(grads.tensors(), params.tensors()):
            g += 2.0 * reg * t
        return
    users, pos, neg = _batch_arrays(batch)
    rows = np.concatenate([users, n_users + pos, n_users + neg])
    coef = 2.0 * reg / len(users)
    if params.embedding.ndim == 3:
        np.add.at(grads.embedding, (slice(None), rows), coef * params.embedding[:, rows, :])
    else:
        np.add.at(grads.embedding, rows, coef * params.embedding[rows])


def bpr_loss(scores_pos: np.ndarray, scores_neg: np.ndarray,
             params: Optional[ModelParams] = None, reg: float = 0.0, scope: str = 'ego',
             batch: Optional[Sequence[Triple]] = None, n_users: int = 0) -> float:
    """
    Mean of -ln σ(ŷ_ui - ŷ_uj) over the batch plus the L2 penalty.

    Args:
        scores_pos: Scores of the observed items
        scores_neg: Scores of the sampled negatives
        params: Parameters, needed when reg > 0
        reg: L2 coefficient λ
        scope: 'ego' or 'all'
        batch: Triples, needed for the 'ego' scope
        n_users: M, needed for the 'ego' scope
    """
    scores_pos = np.asarray(scores_pos, dtype=np.float64)
    scores_neg = np.asarray(scores_neg, dtype=np.float64)
    if scores_pos.shape != scores_neg.shape:
        raise ValueError("Positive and negative score vectors must have equal length")
    loss = float(np.mean(_softplus(-(scores_pos - scores_neg))))
    if reg > 0:
        loss += regularization(params, reg, scope, batch, n_users)
    return loss


def batch_scores(final: np.ndarray, batch: Sequence[Triple], n_users: int
                 ) -> Tuple[np.ndarray, np.ndarray]:
    users, pos, neg = _batch_arrays(batch)
    user_rows = final[users]
    return (np.sum(user_rows * final[n_users + pos], axis=1),
            np.sum(user_rows * final[n_users + neg], axis=1))


def batch_loss(cfg: ModelConfig, params: ModelParams, adj: NormalizedAdjacency,
               batch: Sequence[Triple], train_cfg: TrainConfig, seed: Optional[int] = None) -> float:
    """Loss of one batch under a train-mode forward with the given dropout seed"""
    final, _ = forward(cfg, params, adj, mode='train', seed=seed)
    pos, neg = batch_scores(final, batch, adj.n_users)
    return bpr_loss(pos, neg, params, train_cfg.reg, train_cfg.reg_scope, batch, adj.n_users)


def backward(trace, batch: Sequence[Triple], params: ModelParams,
             reg: float = 0.0, scope: str = 'ego') -> ModelParams:
    """
    Exact gradients of the batch loss with respect to every parameter.

    Differentiates the BPR term into the final table, then hands over to the
    model's reverse pass and adds the regularization gradient.
    """
    n_users = trace.adj.n_users
    final = trace.final
    users, pos, neg = _batch_arrays(batch)
    pos_rows, neg_rows = n_users + pos, n_users + neg
    diff = (np.sum(final[users] * final[pos_rows], axis=1) -
            np.sum(final[users] * final[neg_rows], axis=1))
    # d/dx softplus(-x) = -σ(-x), averaged over the batch
    coef = (-expit(-diff) / len(users))[:, None]

    grad_final = np.zeros_like(final)
    np.add.at(grad_final, users, coef * (final[pos_rows] - final[neg_rows]))
    np.add.at(grad_final, pos_rows, coef * final[users])
    np.add.at(grad_final, neg_rows, -coef * final[users])

    grads = backpropagate(trace, params, grad_final)
    _regularization_grad(grads, params, reg, scope, batch, n_users)
    return grads


@dataclass
class AdamState:
    """First and second moments mirroring the parameter tensors"""
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> 'AdamState':
        return cls([np.zeros_like(t) for t in params.tensors()],
                   [np.zeros_like(t) for t in params.tensors()])


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
              ) -> Tuple[ModelParams, AdamState]:
    """Bias-corrected Adam update applied in place"""
    tensors, grad_tensors = params.tensors(), grads.tensors()
    if len(tensors) != len(grad_tensors) or len(tensors) != len(state.m):
        raise ValueError("Parameters, gradients and Adam state do not line up")

    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    step_size = lr / bc1

    for p, g, m, v in zip(tensors, grad_tensors, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"Gradient shape {g.shape} does not match parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= step_size * m / (np.sqrt(v / bc2) + eps)
    params.version += 1
    return params, state


def train_epoch(train: InteractionSet, adj: NormalizedAdjacency, params: ModelParams,
                state: AdamState, cfg: ModelConfig, train_cfg: TrainConfig,
                rng: np.random.Generator, dropout_rng: Optional[np.random.Generator] = None
                ) -> Tuple[ModelParams, AdamState, float]:
    """
    One epoch of E_train sampled triples in ⌈E_train / batch⌉ batches.

    Each batch gets a fresh dropout seed from `dropout_rng` (default: the
    sampling stream).

    Returns:
        (params, state, mean batch loss)
    """
    n_edges = train.n_edges
    if n_edges == 0:
        raise ValueError("Cannot train on an empty training graph")
    dropout_rng = rng if dropout_rng is None else dropout_rng
    n_batches = math.ceil(n_edges / train_cfg.batch_size)
    losses = []
    for b in range(n_batches):
        size = min(train_cfg.batch_size, n_edges - b * train_cfg.batch_size)
        batch = sample_batch(train, size, rng)
        dropout_seed = int(dropout_rng.integers(2 ** 31))
        final, trace = forward(cfg, params, adj, mode='train', seed=dropout_seed)
        pos, neg = batch_scores(final, batch, adj.n_users)
        losses.append(bpr_loss(pos, neg, params, train_cfg.reg, train_cfg.reg_scope,
                               batch, adj.n_users))
        grads = backward(trace, batch, params, train_cfg.reg, train_cfg.reg_scope)
        adam_step(params, grads, state, train_cfg.lr)
    return params, state, float(np.mean(losses))


class BPRTrainer:
    """Owns the parameters, Adam state and sampling stream of one training run"""

    def __init__(self, cfg: ModelConfig, train_cfg: TrainConfig, train: InteractionSet,
                 adj: NormalizedAdjacency, params: ModelParams, sampling_seed: int,
                 dropout_seed: Optional[int] = None):
        self.cfg = cfg
        self.train_cfg = train_cfg
        self.train = train
        self.adj = adj
        self.params = params
        self.state = AdamState.for_params(params)
        self.rng = np.random.default_rng(sampling_seed)
        self.dropout_rng = (self.rng if dropout_seed is None
                            else np.random.default_rng(dropout_seed))
        self.epoch = 0

    def run_epoch(self) -> Tuple[float, float]:
        """Train one epoch; returns (loss, wall seconds)"""
        start = time.time()
        self.params, self.state, loss = train_epoch(
            self.train, self.adj, self.params, self.state, self.cfg, self.train_cfg, self.rng,
            self.dropout_rng
        )
        self.epoch += 1
        seconds = time.time() - start
        logger.info("epoch %d loss %.6f (%.2fs)", self.epoch, loss, seconds)
        return loss, seconds
