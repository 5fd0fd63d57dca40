"""
User-item bipartite graph for QGCN
Interaction sets, the symmetric-normalized adjacency and edge perturbations
"""

import logging
import math
from typing import Iterable, List, Tuple

import numpy as np
import scipy.sparse as sp

from quaternion import DimensionError, QuaternionVector

logger = logging.getLogger(__name__)


class InputError(ValueError):
    """Raised for invalid graph input (ids out of range, impossible requests)"""


def ratio_count(ratio: float, total: int) -> int:
    """⌊ratio·total⌋, tolerant of binary rounding in decimal ratios"""
    return int(math.floor(ratio * total + 1e-9))


class InteractionSet:
    """
    Immutable set of observed (user, item) edges.

    Holds both the per-user and per-item sorted neighbour lists.
    """

    def __init__(self, n_users: int, n_items: int, edges: np.ndarray):
        self.n_users = int(n_users)
        self.n_items = int(n_items)
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        # lexicographic order, users first
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        self._edges = edges[order]
        self._edges.setflags(write=False)
        self._keys = frozenset(
            (self._edges[:, 0] * self.n_items + self._edges[:, 1]).tolist()
        )

        users, items = self._edges[:, 0], self._edges[:, 1]
        user_bounds = np.searchsorted(users, np.arange(self.n_users + 1))
        self.user_items: List[np.ndarray] = [
            items[user_bounds[u]:user_bounds[u + 1]] for u in range(self.n_users)
        ]
        by_item = np.lexsort((users, items))
        item_sorted = items[by_item]
        item_bounds = np.searchsorted(item_sorted, np.arange(self.n_items + 1))
        users_by_item = users[by_item]
        self.item_users: List[np.ndarray] = [
            users_by_item[item_bounds[i]:item_bounds[i + 1]] for i in range(self.n_items)
        ]

    @property
    def n_edges(self) -> int:
        return len(self._edges)

    @property
    def edges(self) -> np.ndarray:
        """(E, 2) array of (user, item) pairs in lexicographic order"""
        return self._edges

    def user_degrees(self) -> np.ndarray:
        return np.array([len(items) for items in self.user_items], dtype=np.int64)

    def item_degrees(self) -> np.ndarray:
        return np.array([len(users) for users in self.item_users], dtype=np.int64)

    def has_edge(self, user: int, item: int) -> bool:
        return int(user) * self.n_items + int(item) in self._keys

    def edge_keys(self) -> frozenset:
        """Edges encoded as user * n_items + item"""
        return self._keys

    def edge_set(self) -> set:
        return {(int(u), int(i)) for u, i in self._edges}

    def __len__(self):
        return self.n_edges

    def __repr__(self):
        return (f"InteractionSet(n_users={self.n_users}, n_items={self.n_items}, "
                f"n_edges={self.n_edges})")


def build_interactions(edges: Iterable[Tuple[int, int]], n_users: int,
                       n_items: int) -> InteractionSet:
    """
    Build a deduplicated interaction set.

    Args:
        edges: Iterable of (user, item) index pairs
        n_users: Number of users M
        n_items: Number of items N

    Returns:
        InteractionSet over M users and N items
    """
    pairs = np.array(list(edges), dtype=np.int64).reshape(-1, 2)
    if len(pairs):
        bad_users = (pairs[:, 0] < 0) | (pairs[:, 0] >= n_users)
        bad_items = (pairs[:, 1] < 0) | (pairs[:, 1] >= n_items)
        if bad_users.any():
            raise InputError(f"User id {int(pairs[bad_users][0, 0])} outside [0, {n_users})")
        if bad_items.any():
            raise InputError(f"Item id {int(pairs[bad_items][0, 1])} outside [0, {n_items})")
        pairs = np.unique(pairs, axis=0)
    return InteractionSet(n_users, n_items, pairs)


class NormalizedAdjacency:
    """
    Symmetric-normalized (M+N) x (M+N) adjacency D^{-1/2} A D^{-1/2}.

    Users occupy rows 0..M-1 and items rows M..M+N-1. Isolated nodes keep
    empty rows.
    """

    def __init__(self, matrix: sp.csr_matrix, n_users: int, n_items: int):
        self.matrix = matrix
        self.n_users = n_users
        self.n_items = n_items

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def matmul(self, table: np.ndarray) -> np.ndarray:
        """L @ table for a real (M+N, width) table"""
        if table.shape[0] != self.n_nodes:
            raise DimensionError(
                f"Table has {table.shape[0]} rows, graph has {self.n_nodes} nodes"
            )
        return np.asarray(self.matrix @ table)


def build_normalized_adjacency(g: InteractionSet) -> NormalizedAdjacency:
    """Build the normalized Laplacian-style adjacency of a bipartite graph"""
    n_nodes = g.n_users + g.n_items
    users = g.edges[:, 0]
    items = g.edges[:, 1] + g.n_users
    rows = np.concatenate([users, items])
    cols = np.concatenate([items, users])
    adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_nodes, n_nodes))

    degree = np.asarray(adj.sum(axis=1)).flatten()
    with np.errstate(divide='ignore'):
        d_inv_sqrt = np.power(degree, -0.5)
    d_inv_sqrt[np.isinf(d_inv_sqrt)] = 0.0
    d_mat_inv_sqrt = sp.diags(d_inv_sqrt)

    norm_adj = (d_mat_inv_sqrt @ adj @ d_mat_inv_sqrt).tocsr()
    norm_adj.sort_indices()
    return NormalizedAdjacency(norm_adj, g.n_users, g.n_items)


def spmv_block(adj: NormalizedAdjacency, embeddings: QuaternionVector) -> QuaternionVector:
    """Aggregate neighbour rows with the normalized weights, block by block"""
    if len(embeddings.shape) != 2 or embeddings.shape[0] != adj.n_nodes:
        raise DimensionError(
            f"Embedding table of shape {embeddings.shape} does not match "
            f"{adj.n_nodes} graph nodes"
        )
    return QuaternionVector(*(adj.matmul(block) for block in embeddings.blocks))


def inject_edges(g: InteractionSet, ratio: float, seed: int) -> InteractionSet:
    """
    Add ⌊ratio·E⌋ previously unobserved edges, uniformly without replacement.

    Candidates are drawn by rejection sampling over (user, item) pairs.
    """
    if ratio < 0:
        raise InputError(f"Injection ratio must be non-negative, got {ratio}")
    count = ratio_count(ratio, g.n_edges)
    available = g.n_users * g.n_items - g.n_edges
    if count > available:
        raise InputError(
            f"Cannot inject {count} edges: only {available} unobserved pairs exist"
        )
    if count == 0:
        return g

    rng = np.random.default_rng(seed)
    existing = set(g.edge_keys())
    added: List[int] = []
    while len(added) < count:
        users = rng.integers(0, g.n_users, size=count - len(added))
        items = rng.integers(0, g.n_items, size=count - len(added))
        for key in (users * g.n_items + items).tolist():
            if key not in existing:
                existing.add(key)
                added.append(key)
    new_edges = np.array([(key // g.n_items, key % g.n_items) for key in added],
                         dtype=np.int64)
    logger.debug("Injected %d noisy edges into %r", count, g)
    return InteractionSet(g.n_users, g.n_items, np.vstack([g.edges, new_edges]))


def discard_edges(g: InteractionSet, ratio: float, seed: int) -> InteractionSet:
    """Remove ⌊ratio·E⌋ existing edges, uniformly without replacement"""
    if not 0 <= ratio < 1:
        raise InputError(f"Discard ratio must lie in [0, 1), got {ratio}")
    count = ratio_count(ratio, g.n_edges)
    if count == 0:
        return g
    rng = np.random.default_rng(seed)
    removed = rng.choice(g.n_edges, size=count, replace=False)
    keep = np.ones(g.n_edges, dtype=bool)
    keep[removed] = False
    logger.debug("Discarded %d edges from %r", count, g)
    return InteractionSet(g.n_users, g.n_items, g.edges[keep])


def perturb(g: InteractionSet, mode: str, ratio: float, seed: int) -> InteractionSet:
    """Dispatch to inject_edges or discard_edges"""
    if mode == 'inject':
        return inject_edges(g, ratio, seed)
    if mode == 'discard':
        return discard_edges(g, ratio, seed)
    raise InputError(f"Unknown perturbation mode: {mode}")

