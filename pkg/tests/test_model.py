import numpy as np
import pytest

from config import ConfigError, ModelConfig
from tests.conftest import perfect_matching, random_connected_graph
from graph import build_interactions, build_normalized_adjacency, spmv_block
from model import (StaleTraceError, _dropout_l2norm, _dropout_l2norm_adjoint, backpropagate,
                   dropout_l2norm, forward, init_params, predict, propagate_layer, readout,
                   transform_parameter_count)
from quaternion import DimensionError, QuaternionMatrix, QuaternionVector, hamilton_matvec


@pytest.fixture
def adj():
    return build_normalized_adjacency(random_connected_graph(np.random.default_rng(0), 3, 4))


def test_transform_parameter_counts():
    """D = 64: 1024 free reals for qgcn, 4096 for qgcn_q, none for the others"""
    assert transform_parameter_count(ModelConfig('qgcn', embed_dim=64)) == 1024
    assert transform_parameter_count(ModelConfig('qgcn_q', embed_dim=64)) == 4096
    assert transform_parameter_count(ModelConfig('qgcn_w', embed_dim=64)) == 0
    assert transform_parameter_count(ModelConfig('lightgcn', embed_dim=64)) == 0


def test_init_shapes():
    """Quaternion variants store (4, M+N, d) embeddings and (4, d, d) transforms"""
    params = init_params(ModelConfig('qgcn', layers=2, embed_dim=8), 3, 4, seed=0)
    assert params.embedding.shape == (4, 7, 2)
    assert [w.shape for w in params.weights] == [(4, 2, 2), (4, 2, 2)]
    real = init_params(ModelConfig('qgcn_q', layers=2, embed_dim=8), 3, 4, seed=0)
    assert real.embedding.shape == (7, 8)
    assert [w.shape for w in real.weights] == [(8, 8), (8, 8)]
    plain = init_params(ModelConfig('qgcn_w', layers=2, embed_dim=8), 3, 4, seed=0)
    assert plain.embedding.shape == (4, 7, 2)
    assert plain.weights == []
    assert params.num_parameters() == 4 * 7 * 2 + 2 * 4 * 2 * 2


def test_init_is_seeded():
    """Same seed gives the same parameters, another seed does not"""
    cfg = ModelConfig('qgcn', embed_dim=8)
    assert init_params(cfg, 3, 4, 1).allclose(init_params(cfg, 3, 4, 1), rtol=0, atol=0)
    assert not init_params(cfg, 3, 4, 1).allclose(init_params(cfg, 3, 4, 2))


def test_invalid_config_rejected():
    """embed_dim must be a multiple of 4 for every variant, and the variant known"""
    for variant in ('qgcn', 'qgcn_q', 'qgcn_w', 'lightgcn'):
        with pytest.raises(ConfigError):
            init_params(ModelConfig(variant, embed_dim=6), 3, 4, 0)
    with pytest.raises(ConfigError):
        init_params(ModelConfig('gcn'), 3, 4, 0)


def test_propagate_single_edge_identity():
    """With W = I the user's next embedding is the item's current one"""
    adj = build_normalized_adjacency(build_interactions([(0, 0)], 1, 1))
    rng = np.random.default_rng(1)
    table = QuaternionVector(*(rng.normal(size=(2, 3)) for _ in range(4)))
    out = propagate_layer(adj, table, QuaternionMatrix.identity(3))
    np.testing.assert_allclose(out.concat()[0], table.concat()[1])
    np.testing.assert_allclose(out.concat()[1], table.concat()[0])


def test_propagate_isolated_node_is_zero():
    """A node without neighbours aggregates to zero"""
    adj = build_normalized_adjacency(build_interactions([(0, 0)], 2, 1))
    out = propagate_layer(adj, np.ones((3, 4)))
    assert np.all(out[1] == 0)


def test_propagate_real_transform():
    """Real variants apply x ↦ W x to every aggregated row"""
    adj = build_normalized_adjacency(build_interactions([(0, 0)], 1, 1))
    w = np.arange(16.0).reshape(4, 4)
    table = np.eye(2, 4)
    np.testing.assert_allclose(propagate_layer(adj, table, w)[0], w @ table[1])
    with pytest.raises(DimensionError):
        propagate_layer(adj, table, np.eye(3))


def test_dropout_l2norm_eval_gives_unit_rows():
    """Eval mode skips dropout; non-zero rows get unit norm and zero rows stay zero"""
    table = np.array([[3.0, 4.0], [0.0, 0.0]])
    out, mask = dropout_l2norm(table, 0.5, mode='eval')
    assert mask is None
    np.testing.assert_allclose(out, [[0.6, 0.8], [0.0, 0.0]])


def test_dropout_l2norm_train_is_seeded():
    """Train mode drops entries reproducibly"""
    table = np.random.default_rng(2).normal(size=(20, 8))
    out_a, mask_a = dropout_l2norm(table, 0.3, mode='train', seed=4)
    out_b, mask_b = dropout_l2norm(table, 0.3, mode='train', seed=4)
    np.testing.assert_array_equal(mask_a, mask_b)
    np.testing.assert_array_equal(out_a, out_b)
    assert not mask_a.all()
    assert np.all(out_a[~mask_a] == 0)
    norms = np.linalg.norm(out_a, axis=1)
    np.testing.assert_allclose(norms[norms > 0], 1.0)


def test_dropout_rate_validated():
    """p must lie in [0, 1)"""
    with pytest.raises(ValueError):
        dropout_l2norm(np.ones((2, 2)), 1.0)


def test_readouts():
    """max, sum, mean and concat over two layers"""
    a = np.array([[1.0, -2.0]])
    b = np.array([[3.0, -4.0]])
    np.testing.assert_array_equal(readout([a, b], 'max'), [[3.0, -2.0]])
    np.testing.assert_array_equal(readout([a, b], 'sum'), [[4.0, -6.0]])
    np.testing.assert_array_equal(readout([a, b], 'mean'), [[2.0, -3.0]])
    np.testing.assert_array_equal(readout([a, b], 'concat'), [[1.0, -2.0, 3.0, -4.0]])
    with pytest.raises(ValueError):
        readout([a, b], 'median')


@pytest.mark.parametrize('variant', ['qgcn', 'qgcn_q', 'qgcn_w', 'lightgcn'])
@pytest.mark.parametrize('layers', [1, 2])
def test_forward_shapes(adj, variant, layers):
    """Final table is (M+N, D), or (M+N, L·D) for concat"""
    cfg = ModelConfig(variant, layers=layers, embed_dim=8)
    params = init_params(cfg, 3, 4, 0)
    final, trace = forward(cfg, params, adj)
    assert final.shape == (7, 8)
    assert trace is None
    cfg_concat = ModelConfig(variant, layers=layers, embed_dim=8, readout='concat')
    width = 8 if variant == 'lightgcn' else 8 * layers
    assert forward(cfg_concat, init_params(cfg_concat, 3, 4, 0), adj)[0].shape == (7, width)


def test_include_layer0_widens_concat(adj):
    """Ego embeddings join the concat readout when requested"""
    cfg = ModelConfig('qgcn', layers=2, embed_dim=8, readout='concat', include_layer0=True)
    final, _ = forward(cfg, init_params(cfg, 3, 4, 0), adj)
    assert final.shape == (7, 24)


def test_eval_forward_is_deterministic(adj):
    """Eval mode ignores dropout and repeated calls agree"""
    cfg = ModelConfig('qgcn', layers=2, embed_dim=8, dropout=0.5)
    params = init_params(cfg, 3, 4, 0)
    np.testing.assert_array_equal(forward(cfg, params, adj)[0], forward(cfg, params, adj)[0])


def test_qgcn_w_with_identity_matches_qgcn(adj):
    """qgcn with identity transforms equals qgcn_w on the same embeddings"""
    cfg = ModelConfig('qgcn', layers=2, embed_dim=8)
    params = init_params(cfg, 3, 4, 0)
    params.weights = [QuaternionMatrix.identity(2).stacked() for _ in range(2)]
    plain_cfg = ModelConfig('qgcn_w', layers=2, embed_dim=8)
    plain = init_params(plain_cfg, 3, 4, 0)
    plain.embedding = params.embedding.copy()
    np.testing.assert_allclose(forward(cfg, params, adj)[0], forward(plain_cfg, plain, adj)[0],
                               atol=1e-12)


def test_lightgcn_uniform_combination():
    """L = 1 LightGCN on one edge averages the ego and neighbour rows"""
    adj = build_normalized_adjacency(build_interactions([(0, 0)], 1, 1))
    cfg = ModelConfig('lightgcn', layers=1, embed_dim=4)
    params = init_params(cfg, 1, 1, 0)
    x = params.embedding
    final, _ = forward(cfg, params, adj)
    np.testing.assert_allclose(final[0], 0.5 * (x[0] + x[1]))


def test_lightgcn_custom_weights():
    """Explicit layer weights replace the uniform ones"""
    adj = build_normalized_adjacency(build_interactions([(0, 0)], 1, 1))
    cfg = ModelConfig('lightgcn', layers=1, embed_dim=4, layer_weights=(1.0, 0.0))
    params = init_params(cfg, 1, 1, 0)
    np.testing.assert_allclose(forward(cfg, params, adj)[0], params.embedding)


def test_shape_mismatch_raises(adj):
    """Parameters for another graph size are rejected"""
    cfg = ModelConfig('qgcn', embed_dim=8)
    with pytest.raises(DimensionError):
        forward(cfg, init_params(cfg, 2, 2, 0), adj)


def test_stale_trace_detected(adj):
    """Backward refuses a trace once the parameters changed"""
    cfg = ModelConfig('qgcn', embed_dim=8, dropout=0.0)
    params = init_params(cfg, 3, 4, 0)
    final, trace = forward(cfg, params, adj, mode='train', seed=0)
    backpropagate(trace, params, np.ones_like(final))
    params.version += 1
    with pytest.raises(StaleTraceError):
        backpropagate(trace, params, np.ones_like(final))
    with pytest.raises(StaleTraceError):
        backpropagate(trace, params.copy(), np.ones_like(final))


def test_predict_is_inner_product():
    """Score is the dot product of final user and item rows"""
    g = perfect_matching(2)
    cfg = ModelConfig('qgcn', embed_dim=4)
    params = init_params(cfg, 2, 2, 0)
    final, _ = forward(cfg, params, build_normalized_adjacency(g))
    assert predict(final, 2, 1, 0) == pytest.approx(float(final[1] @ final[2]))
    with pytest.raises(IndexError):
        predict(final, 2, 2, 0)


def random_quaternion_table(rng, n, d):
    return QuaternionVector(*(rng.normal(size=(n, d)) for _ in range(4)))


def random_transform(rng, d):
    return QuaternionMatrix(*(rng.normal(size=(d, d)) for _ in range(4)))


def test_transform_commutes_with_aggregation(adj):
    """Transforming before or after aggregation gives the same layer"""
    rng = np.random.default_rng(5)
    table = random_quaternion_table(rng, 7, 3)
    w = random_transform(rng, 3)
    out = propagate_layer(adj, table, w).concat()
    np.testing.assert_allclose(out, hamilton_matvec(w, spmv_block(adj, table)).concat(),
                               rtol=0, atol=1e-10)
    np.testing.assert_allclose(out, spmv_block(adj, hamilton_matvec(w, table)).concat(),
                               rtol=0, atol=1e-10)


def test_propagate_matches_scalar_expansion():
    """Two users sharing one item, d = 1, against the written-out Hamilton sum"""
    adj = build_normalized_adjacency(build_interactions([(0, 0), (1, 0)], 2, 1))
    rng = np.random.default_rng(6)
    table = random_quaternion_table(rng, 3, 1)
    w = random_transform(rng, 1)
    wr, wi, wj, wk = (float(b[0, 0]) for b in w.blocks)

    def transform(x):
        xr, xi, xj, xk = x
        return [wr * xr - wi * xi - wj * xj - wk * xk,
                wi * xr + wr * xi - wk * xj + wj * xk,
                wj * xr + wk * xi + wr * xj - wi * xk,
                wk * xr - wj * xi + wi * xj + wr * xk]

    node = [[float(b[n, 0]) for b in table.blocks] for n in range(3)]
    # users have degree 1 and the item degree 2
    coeff = 1 / np.sqrt(2)
    expected = [
        transform([coeff * v for v in node[2]]),
        transform([coeff * v for v in node[2]]),
        transform([coeff * (a + b) for a, b in zip(node[0], node[1])]),
    ]
    out = propagate_layer(adj, table, w)
    got = [[float(b[n, 0]) for b in out.blocks] for n in range(3)]
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


def test_identity_qgcn_without_normalization_is_lightgcn(adj):
    """Identity transforms, no dropout and no L2 step reproduce LightGCN layer by layer"""
    cfg = ModelConfig('qgcn', layers=3, embed_dim=8, dropout=0.0, readout='mean',
                      include_layer0=True, l2_normalize=False)
    params = init_params(cfg, 3, 4, 0)
    params.weights = [QuaternionMatrix.identity(2).stacked() for _ in range(3)]
    light_cfg = ModelConfig('lightgcn', layers=3, embed_dim=8)
    light = init_params(light_cfg, 3, 4, 0)
    light.embedding = params.embedding_table().copy()

    final, trace = forward(cfg, params, adj, mode='train', seed=0)
    light_final, light_trace = forward(light_cfg, light, adj, mode='train', seed=0)
    assert len(trace.tables) == len(light_trace.tables) == 4
    for ours, theirs in zip(trace.tables, light_trace.tables):
        np.testing.assert_allclose(ours, theirs, rtol=0, atol=1e-12)
    np.testing.assert_allclose(final, light_final, rtol=0, atol=1e-12)


def test_l2_normalization_adjoint_drops_parallel_component():
    """The gradient through x/|x| is orthogonal to x, and x itself maps to zero"""
    rng = np.random.default_rng(7)
    x = rng.normal(size=(10, 8))
    _, state = _dropout_l2norm(x, 0.0, False, None)
    np.testing.assert_allclose(_dropout_l2norm_adjoint(state, 3.0 * x), 0.0, rtol=0, atol=1e-10)
    grad = _dropout_l2norm_adjoint(state, rng.normal(size=x.shape))
    np.testing.assert_allclose(np.sum(grad * x, axis=1), 0.0, rtol=0, atol=1e-10)


def test_xavier_init_statistics():
    """Entries stay inside the Xavier bound and average to zero within 3 sigma"""
    n_users, n_items, dim = 5000, 2000, 16
    params = init_params(ModelConfig('qgcn_q', layers=1, embed_dim=dim), n_users, n_items, 0)
    table = params.embedding
    assert table.size >= 10 ** 5
    bound = np.sqrt(6.0 / (n_users + n_items + dim))
    assert np.abs(table).max() <= bound
    sigma = bound / np.sqrt(3.0 * table.size)
    assert abs(table.mean()) <= 3 * sigma
    w_bound = np.sqrt(6.0 / (2 * dim))
    assert np.abs(params.weights[0]).max() <= w_bound


def test_trace_not_accepted_by_new_params_with_equal_state(adj):
    """A fresh parameter set with identical contents and version is still another set"""
    cfg = ModelConfig('qgcn', embed_dim=8, dropout=0.0)
    final, trace = forward(cfg, init_params(cfg, 3, 4, 0), adj, mode='train', seed=0)
    for _ in range(20):
        with pytest.raises(StaleTraceError):
            backpropagate(trace, init_params(cfg, 3, 4, 0), np.ones_like(final))
