"""
Dataset preparation for QGCN
Parsing, k-core filtering, per-user splitting and split persistence
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from graph import InteractionSet, build_interactions

logger = logging.getLogger(__name__)

SPLIT_FILES = {
    'train': 'train.txt',
    'validation': 'valid.txt',
    'test': 'test.txt',
}
MANIFEST_FILE = 'manifest.json'


class ParseError(ValueError):
    """Raised for a malformed interaction file line"""

    def __init__(self, path, line_number: int, message: str):
        super().__init__(f"{path}:{line_number}: {message}")
        self.path = path
        self.line_number = line_number


class EmptyDatasetError(ValueError):
    """Raised when filtering leaves no interactions"""


def _id_key(token: str):
    return (int(token), token)


class RawDataset:
    """
    Interactions keyed by external ids, with dense remapping tables.

    Users and items are indexed densely from 0 in ascending order of their
    integer external ids.
    """

    def __init__(self, interactions: Dict[str, Sequence[str]]):
        self.interactions: Dict[str, List[str]] = {
            user: sorted(set(items), key=_id_key)
            for user, items in interactions.items()
        }
        self.user_ids: List[str] = sorted(self.interactions, key=_id_key)
        items = {item for values in self.interactions.values() for item in values}
        self.item_ids: List[str] = sorted(items, key=_id_key)
        self.user_index = {user: idx for idx, user in enumerate(self.user_ids)}
        self.item_index = {item: idx for idx, item in enumerate(self.item_ids)}

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_edges(self) -> int:
        return sum(len(items) for items in self.interactions.values())

    def dense_edges(self) -> np.ndarray:
        pairs = [
            (self.user_index[user], self.item_index[item])
            for user in self.user_ids
            for item in self.interactions[user]
        ]
        return np.array(pairs, dtype=np.int64).reshape(-1, 2)

    def to_interactions(self) -> InteractionSet:
        return build_interactions(self.dense_edges(), self.n_users, self.n_items)

    def __repr__(self):
        return (f"RawDataset(n_users={self.n_users}, n_items={self.n_items}, "
                f"n_edges={self.n_edges})")


def parse_interactions(path) -> RawDataset:
    """
    Read a file with one user per line: `user item item ...`.

    Args:
        path: Path to a UTF-8 text file

    Returns:
        RawDataset with duplicate items collapsed
    """
    interactions: Dict[str, List[str]] = {}
    with open(path, 'r', encoding='utf-8') as handle:
        for line_number, line in enumerate(handle, start=1):
            tokens = line.split()
            if not tokens:
                continue
            for token in tokens:
                try:
                    value = int(token)
                except ValueError:
                    raise ParseError(path, line_number, f"non-integer token {token!r}")
                if value < 0:
                    raise ParseError(path, line_number, f"negative id {token!r}")
            user = str(int(tokens[0]))
            items = [str(int(token)) for token in tokens[1:]]
            interactions.setdefault(user, []).extend(items)
    dataset = RawDataset(interactions)
    logger.info("Parsed %s: %r", path, dataset)
    return dataset


def write_interactions(path, rows: Dict[int, Sequence[int]]):
    """Write `user item item ...` lines, skipping users without items"""
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        for user in sorted(rows):
            items = rows[user]
            if len(items):
                handle.write(' '.join(str(v) for v in [user, *items]) + '\n')


def kcore_filter(d: RawDataset, k: int) -> RawDataset:
    """
    Iteratively drop users and items with fewer than k interactions.

    Raises:
        EmptyDatasetError: when nothing survives the filter
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    interactions = {user: list(items) for user, items in d.interactions.items()}
    rounds = 0
    while True:
        rounds += 1
        item_degree: Dict[str, int] = {}
        for items in interactions.values():
            for item in items:
                item_degree[item] = item_degree.get(item, 0) + 1
        filtered = {}
        for user, items in interactions.items():
            kept = [item for item in items if item_degree[item] >= k]
            if len(kept) >= k:
                filtered[user] = kept
        changed = (filtered.keys() != interactions.keys() or
                   any(len(filtered[u]) != len(interactions[u]) for u in filtered))
        interactions = filtered
        if not changed:
            break
    if not interactions:
        raise EmptyDatasetError(
            f"No users or items survive {k}-core filtering of {d!r}"
        )
    result = RawDataset(interactions)
    logger.info("%d-core filter converged after %d rounds: %r", k, rounds, result)
    return result


@dataclass
class SplitDataset:
    """Train / validation / test interaction sets over the same users and items"""
    train: InteractionSet
    validation: InteractionSet
    test: InteractionSet
    user_ids: Optional[List[str]] = None
    item_ids: Optional[List[str]] = None
    seed: Optional[int] = None
    k_core: Optional[int] = None

    @property
    def n_users(self) -> int:
        return self.train.n_users

    @property
    def n_items(self) -> int:
        return self.train.n_items

    def get(self, name: str) -> InteractionSet:
        if name in ('valid', 'validation'):
            return self.validation
        if name in ('train', 'test'):
            return getattr(self, name)
        raise ValueError(f"Unknown split: {name}")

    def manifest(self) -> Dict:
        return {
            'M': self.n_users,
            'N': self.n_items,
            'E_train': self.train.n_edges,
            'E_val': self.validation.n_edges,
            'E_test': self.test.n_edges,
            'seed': self.seed,
            'k': self.k_core,
        }


def _allocation(n: int, ratios: Tuple[float, float, float]) -> Tuple[int, int, int]:
    _, val_ratio, test_ratio = ratios
    n_test = int(np.floor(test_ratio * n))
    n_val = int(np.floor(val_ratio * n))
    if test_ratio > 0 and n >= 2:
        n_test = max(1, n_test)
    if val_ratio > 0 and n >= 3:
        n_val = max(1, n_val)
    n_train = n - n_val - n_test
    return n_train, n_val, n_test


def split_per_user(d: RawDataset, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitDataset:
    """
    Split each user's items into train / validation / test.

    Each user's items are shuffled with a seeded generator; validation and
    test get ⌊ratio·n⌋ items (at least one once the user has enough items)
    and the remainder goes to train.
    """
    if len(ratios) != 3 or min(ratios) < 0 or not np.isclose(sum(ratios), 1.0):
        raise ValueError(f"Split ratios must be three non-negative fractions summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    parts = {'train': [], 'validation': [], 'test': []}
    for user in d.user_ids:
        u = d.user_index[user]
        items = np.array([d.item_index[item] for item in d.interactions[user]], dtype=np.int64)
        if len(items) == 0:
            continue
        items = items[rng.permutation(len(items))]
        n_train, n_val, _ = _allocation(len(items), ratios)
        parts['train'].extend((u, i) for i in items[:n_train])
        parts['validation'].extend((u, i) for i in items[n_train:n_train + n_val])
        parts['test'].extend((u, i) for i in items[n_train + n_val:])

    sets = {name: build_interactions(pairs, d.n_users, d.n_items)
            for name, pairs in parts.items()}
    split = SplitDataset(sets['train'], sets['validation'], sets['test'],
                         user_ids=list(d.user_ids), item_ids=list(d.item_ids), seed=seed)
    logger.info("Split %r into train=%d validation=%d test=%d",
                d, split.train.n_edges, split.validation.n_edges, split.test.n_edges)
    return split


def _rows(g: InteractionSet) -> Dict[int, List[int]]:
    return {u: g.user_items[u].tolist() for u in range(g.n_users)}


def write_split(split: SplitDataset, out_dir) -> Dict:
    """Write split files, id maps and the manifest; returns the manifest"""
    os.makedirs(out_dir, exist_ok=True)
    for name, filename in SPLIT_FILES.items():
        write_interactions(os.path.join(out_dir, filename), _rows(split.get(name)))
    if split.user_ids is not None:
        _write_id_map(os.path.join(out_dir, 'user_list.txt'), split.user_ids)
    if split.item_ids is not None:
        _write_id_map(os.path.join(out_dir, 'item_list.txt'), split.item_ids)
    manifest = split.manifest()
    with open(os.path.join(out_dir, MANIFEST_FILE), 'w', encoding='utf-8', newline='\n') as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write('\n')
    return manifest


def _write_id_map(path, ids: Sequence[str]):
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write('org_id remap_id\n')
        for idx, external in enumerate(ids):
            handle.write(f"{external} {idx}\n")


def _read_dense(path) -> Dict[int, List[int]]:
    raw = parse_interactions(path)
    return {int(user): [int(item) for item in items] for user, items in raw.interactions.items()}


def _to_set(rows: Dict[int, List[int]], n_users: int, n_items: int) -> InteractionSet:
    pairs = [(u, i) for u, items in rows.items() for i in items]
    return build_interactions(pairs, n_users, n_items)


def load_split(data_dir) -> SplitDataset:
    """Load a split written by write_split"""
    manifest_path = os.path.join(data_dir, MANIFEST_FILE)
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"No {MANIFEST_FILE} in {data_dir}; run the prepare command first")
    with open(manifest_path, 'r', encoding='utf-8') as handle:
        manifest = json.load(handle)
    n_users, n_items = manifest['M'], manifest['N']
    sets = {}
    for name, filename in SPLIT_FILES.items():
        sets[name] = _to_set(_read_dense(os.path.join(data_dir, filename)), n_users, n_items)
    return SplitDataset(sets['train'], sets['validation'], sets['test'],
                        seed=manifest.get('seed'), k_core=manifest.get('k'))


def import_split(data_dir) -> SplitDataset:
    """
    Import a pre-made split of dense ids: train.txt, test.txt and optionally
    valid.txt. M and N are one past the largest ids seen.
    """
    rows = {}
    for name, filename in SPLIT_FILES.items():
        path = os.path.join(data_dir, filename)
        if name == 'validation' and not os.path.exists(path):
            rows[name] = {}
            continue
        rows[name] = _read_dense(path)
    n_users = 1 + max((u for part in rows.values() for u in part), default=-1)
    n_items = 1 + max((i for part in rows.values() for items in part.values() for i in items),
                      default=-1)
    sets = {name: _to_set(part, n_users, n_items) for name, part in rows.items()}
    overlap = sets['train'].edge_keys() & sets['test'].edge_keys()
    if overlap:
        logger.warning("Imported split shares %d edges between train and test", len(overlap))
    return SplitDataset(sets['train'], sets['validation'], sets['test'])


def manifest_hash(data_dir) -> str:
    """SHA-256 of the manifest bytes, recorded with every run"""
    with open(os.path.join(data_dir, MANIFEST_FILE), 'rb') as handle:
        return hashlib.sha256(handle.read()).hexdigest()


def generate_synthetic(n_users: int = 1000, n_items: int = 800, n_clusters: int = 8,
                       interactions_per_user: int = 25, affinity: float = 0.8,
                       seed: int = 0) -> Dict[int, List[int]]:
    """
    Clustered implicit-feedback data for desk-scale experiments.

    Users and items each belong to a latent cluster; a user draws
    `affinity` of its interactions from its own cluster's items and the
    rest uniformly, with popularity skew inside each cluster.
    """
    rng = np.random.default_rng(seed)
    user_cluster = rng.integers(0, n_clusters, size=n_users)
    item_cluster = rng.integers(0, n_clusters, size=n_items)
    popularity = rng.pareto(1.5, size=n_items) + 1.0
    by_cluster = [np.flatnonzero(item_cluster == c) for c in range(n_clusters)]

    rows: Dict[int, List[int]] = {}
    for user in range(n_users):
        count = max(1, int(rng.poisson(interactions_per_user)))
        own = by_cluster[user_cluster[user]]
        n_own = min(len(own), int(round(affinity * count)))
        chosen = set()
        if n_own:
            weights = popularity[own] / popularity[own].sum()
            chosen.update(rng.choice(own, size=n_own, replace=False, p=weights).tolist())
        while len(chosen) < min(count, n_items):
            chosen.add(int(rng.integers(0, n_items)))
        rows[user] = sorted(chosen)
    return rows
