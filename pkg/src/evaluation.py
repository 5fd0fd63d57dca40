"""
Full-ranking top-K evaluation
Recall@K and NDCG@K over every item a user has not consumed
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from config import ModelConfig
from data import SplitDataset
from graph import NormalizedAdjacency
from model import ModelParams, forward

logger = logging.getLogger(__name__)

# users scored per dense block
USER_CHUNK = 256


@dataclass
class RankedList:
    """Top-K items of one user, best first"""
    user: int
    items: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.items)


@dataclass
class MetricReport:
    """Averaged Recall@K / NDCG@K over users with a non-empty held-out set"""
    k: int
    recall: float
    ndcg: float
    per_user_recall: Dict[int, float] = field(default_factory=dict)
    per_user_ndcg: Dict[int, float] = field(default_factory=dict)
    split: str = 'test'

    @property
    def n_users(self) -> int:
        return len(self.per_user_recall)

    def to_dict(self, per_user: bool = False):
        data = {
            'k': self.k,
            'split': self.split,
            'recall': self.recall,
            'ndcg': self.ndcg,
            'n_users': self.n_users,
        }
        if per_user:
            data['per_user_recall'] = {str(u): v for u, v in self.per_user_recall.items()}
            data['per_user_ndcg'] = {str(u): v for u, v in self.per_user_ndcg.items()}
        return data


def _topk_from_scores(user: int, scores: np.ndarray, k: int, exclude: Iterable[int]) -> RankedList:
    scores = np.asarray(scores, dtype=np.float64).copy()
    excluded = np.fromiter(exclude, dtype=np.int64)
    scores[excluded] = -np.inf
    available = len(scores) - len(np.unique(excluded))
    # stable sort keeps ties in ascending item order
    order = np.argsort(-scores, kind='stable')[:min(k, available)]
    return RankedList(user, order, scores[order])


def rank_topk(final: np.ndarray, n_users: int, user: int, k: int,
              exclude: Iterable[int] = ()) -> RankedList:
    """
    Top-K items for one user by inner-product score.

    Items in `exclude` never appear; when fewer than K items remain, all
    of them are returned.
    """
    if k < 1:
        raise ValueError(f"K must be at least 1, got {k}")
    scores = final[n_users:] @ final[user]
    return _topk_from_scores(user, scores, k, exclude)


def recall_at_k(ranked: RankedList, relevant: Iterable[int]) -> float:
    """|T ∩ R_K| / |T|"""
    relevant = set(int(i) for i in relevant)
    if not relevant:
        raise ValueError("Recall is undefined for an empty held-out set")
    hits = sum(1 for item in ranked.items if int(item) in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked: RankedList, relevant: Iterable[int], k: Optional[int] = None) -> float:
    """Binary-relevance NDCG with the ideal DCG truncated at min(K, |T|)"""
    relevant = set(int(i) for i in relevant)
    if not relevant:
        raise ValueError("NDCG is undefined for an empty held-out set")
    k = len(ranked.items) if k is None else k
    items = ranked.items[:k]
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    gains = np.array([1.0 if int(item) in relevant else 0.0 for item in items])
    dcg = float(np.sum(gains * discounts[:len(gains)]))
    idcg = float(np.sum(discounts[:min(k, len(relevant))]))
    return dcg / idcg


def exclusion_sets(split: SplitDataset, split_name: str) -> List[np.ndarray]:
    """Per-user items withheld from ranking: train, plus validation when testing"""
    excluded = [split.train.user_items[u] for u in range(split.n_users)]
    if split_name == 'test':
        excluded = [np.union1d(a, split.validation.user_items[u]) for u, a in enumerate(excluded)]
    return excluded


def evaluate_final(final: np.ndarray, split: SplitDataset, ks: Sequence[int],
                   split_name: str = 'test') -> List[MetricReport]:
    """Metrics for each K from an already computed final table"""
    ks = [int(k) for k in ks]
    if not ks or min(ks) < 1:
        raise ValueError(f"K values must be positive, got {ks}")
    n_users = split.n_users
    held_out = split.get(split_name)
    excluded = exclusion_sets(split, split_name)
    users = [u for u in range(n_users) if len(held_out.user_items[u]) > 0]
    max_k = max(ks)

    per_recall = {k: {} for k in ks}
    per_ndcg = {k: {} for k in ks}
    items_table = final[n_users:]
    for start in range(0, len(users), USER_CHUNK):
        chunk = users[start:start + USER_CHUNK]
        block = final[chunk] @ items_table.T
        for row, user in enumerate(chunk):
            ranked = _topk_from_scores(user, block[row], max_k, excluded[user])
            relevant = held_out.user_items[user]
            for k in ks:
                head = RankedList(user, ranked.items[:k], ranked.scores[:k])
                per_recall[k][user] = recall_at_k(head, relevant)
                per_ndcg[k][user] = ndcg_at_k(head, relevant, k)

    if not users:
        logger.warning("No users with %s interactions; metrics default to 0", split_name)
    reports = []
    for k in ks:
        recall = float(np.mean(list(per_recall[k].values()))) if users else 0.0
        ndcg = float(np.mean(list(per_ndcg[k].values()))) if users else 0.0
        reports.append(MetricReport(k, recall, ndcg, per_recall[k], per_ndcg[k], split_name))
    return reports


def evaluate(cfg: ModelConfig, params: ModelParams, adj: NormalizedAdjacency,
             split: SplitDataset, k: int = 20, split_name: str = 'test') -> MetricReport:
    """
    Eval-mode forward followed by full ranking for every user with held-out
    items in `split_name`.
    """
    return evaluate_many(cfg, params, adj, split, [k], split_name)[0]


def evaluate_many(cfg: ModelConfig, params: ModelParams, adj: NormalizedAdjacency,
                  split: SplitDataset, ks: Sequence[int], split_name: str = 'test'
                  ) -> List[MetricReport]:
    final, _ = forward(cfg, params, adj, mode='eval')
    reports = evaluate_final(final, split, ks, split_name)
    for report in reports:
        logger.debug("%s recall@%d=%.5f ndcg@%d=%.5f over %d users", split_name,
                     report.k, report.recall, report.k, report.ndcg, report.n_users)
    return reports
