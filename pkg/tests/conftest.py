import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '../src')))

import uuid

import numpy as np
import pytest

from data import SplitDataset
from graph import build_interactions


def perfect_matching(n=4):
    """n users, n items, user u consumed only item u"""
    return build_interactions([(u, u) for u in range(n)], n, n)


def random_connected_graph(rng, n_users=3, n_items=4, density=0.5):
    """Random bipartite graph in which every user and item has an edge"""
    while True:
        mask = rng.random((n_users, n_items)) < density
        if mask.any(axis=1).all() and mask.any(axis=0).all():
            users, items = np.nonzero(mask)
            return build_interactions(zip(users.tolist(), items.tolist()), n_users, n_items)


@pytest.fixture
def db_path():
    # Unique database per test
    path = f'/tmp/test_{uuid.uuid4().hex}.db'
    os.environ['QGCN_DATABASE_PATH'] = path
    yield path
    os.environ.pop('QGCN_DATABASE_PATH', None)
    if os.path.exists(path):
        os.unlink(path)


@pytest.fixture
def matching_split():
    """4x4 memorization instance: train = validation = test = the matching"""
    g = perfect_matching(4)
    return SplitDataset(g, g, g)


@pytest.fixture
def toy_interactions(tmp_path):
    """Interaction file with 6 users over 8 items, 4 to 6 items each"""
    lines = [
        '0 0 1 2 3 4',
        '1 1 2 3 4 5 6',
        '2 0 2 4 6',
        '3 1 3 5 7 0',
        '4 0 1 6 7',
        '5 2 3 5 7 6',
    ]
    path = tmp_path / 'raw.txt'
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    return path
