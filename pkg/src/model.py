"""
QGCN model
Quaternion embedding table, propagation with quaternion feature
transformation, dropout + L2 normalization, readout and prediction, plus the
LightGCN baseline and the QGCN-Q / QGCN-W ablation variants.

Cost per forward pass: building the adjacency is O(|E|) (done once),
propagation is O(L·|E|·d) for aggregation plus O(L·(M+N)·d²) for the
quaternion transforms, and scoring a BPR batch is O(B·d).
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.preprocessing import normalize

from config import ModelConfig
from graph import NormalizedAdjacency, spmv_block
from quaternion import (DimensionError, QuaternionMatrix, QuaternionVector,
                        hamilton_matvec, hamilton_matvec_adjoint)

logger = logging.getLogger(__name__)


class StaleTraceError(RuntimeError):
    """Raised when a trace no longer matches the parameters it was built from"""


@dataclass
class ModelParams:
    """
    Trainable parameters.

    Quaternion variants (qgcn, qgcn_w) store the embedding table as four
    contiguous blocks of shape (4, M+N, d); qgcn_q and lightgcn store a real
    (M+N, D) table. qgcn keeps one (4, d, d) quaternion transform per layer,
    qgcn_q one unconstrained (D, D) real matrix per layer.
    """
    variant: str
    embedding: np.ndarray
    weights: List[np.ndarray] = field(default_factory=list)
    version: int = 0
    # identity of this parameter set; copies get a new one
    token: object = field(default_factory=object, init=False, repr=False, compare=False)

    def tensors(self) -> List[np.ndarray]:
        return [self.embedding, *self.weights]

    def zeros_like(self) -> 'ModelParams':
        return ModelParams(self.variant, np.zeros_like(self.embedding),
                           [np.zeros_like(w) for w in self.weights])

    def copy(self) -> 'ModelParams':
        return ModelParams(self.variant, self.embedding.copy(),
                           [w.copy() for w in self.weights], self.version)

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors()))

    @property
    def n_nodes(self) -> int:
        if self.embedding.ndim == 3:
            return self.embedding.shape[1]
        return self.embedding.shape[0]

    def transform(self, layer: int) -> Union[QuaternionMatrix, np.ndarray, None]:
        """Transform of a layer (0-based), None when the variant has none"""
        if not self.weights:
            return None
        if self.variant == 'qgcn':
            return QuaternionMatrix.from_stacked(self.weights[layer])
        return self.weights[layer]

    def embedding_table(self) -> np.ndarray:
        """Layer-0 table in concatenated [r | i | j | k] real form"""
        if self.embedding.ndim == 3:
            return QuaternionVector.from_stacked(self.embedding).concat()
        return self.embedding

    def allclose(self, other: 'ModelParams', **kwargs) -> bool:
        return (self.variant == other.variant and
                len(self.weights) == len(other.weights) and
                all(np.allclose(a, b, **kwargs) for a, b in zip(self.tensors(), other.tensors())))


def transform_parameter_count(cfg: ModelConfig) -> int:
    """Free reals in one layer's transform: 4d² for qgcn, D² = 16d² for qgcn_q"""
    d = cfg.quaternion_dim
    if cfg.variant == 'qgcn':
        return 4 * d * d
    if cfg.variant == 'qgcn_q':
        return cfg.embed_dim * cfg.embed_dim
    return 0


def _xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, n_users: int, n_items: int, seed: int) -> ModelParams:
    """
    Xavier-uniform initialization, one bound per real block.

    Args:
        cfg: Model configuration
        n_users: Number of users M
        n_items: Number of items N
        seed: Seed of the init stream

    Returns:
        ModelParams for cfg.variant
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    n_nodes = n_users + n_items
    d, dim = cfg.quaternion_dim, cfg.embed_dim

    if cfg.is_quaternion:
        embedding = _xavier_uniform(rng, (4, n_nodes, d), n_nodes, d)
    else:
        embedding = _xavier_uniform(rng, (n_nodes, dim), n_nodes, dim)

    weights = []
    if cfg.variant == 'qgcn':
        weights = [_xavier_uniform(rng, (4, d, d), d, d) for _ in range(cfg.layers)]
    elif cfg.variant == 'qgcn_q':
        weights = [_xavier_uniform(rng, (dim, dim), dim, dim) for _ in range(cfg.layers)]
    return ModelParams(cfg.variant, embedding, weights)


def propagate_layer(adj: NormalizedAdjacency, embeddings, w=None):
    """
    One propagation step: aggregate neighbours with the normalized weights,
    then apply the layer transform.

    Args:
        adj: Normalized adjacency
        embeddings: QuaternionVector table or real (M+N, D) array
        w: QuaternionMatrix, real (D, D) array, or None for no transform

    Returns:
        Table of the same kind as embeddings
    """
    if isinstance(embeddings, QuaternionVector):
        aggregated = spmv_block(adj, embeddings)
        if w is None:
            return aggregated
        if not isinstance(w, QuaternionMatrix):
            raise DimensionError("Quaternion tables need a QuaternionMatrix transform")
        return hamilton_matvec(w, aggregated)
    aggregated = adj.matmul(np.asarray(embeddings, dtype=np.float64))
    if w is None:
        return aggregated
    if w.shape != (aggregated.shape[1], aggregated.shape[1]):
        raise DimensionError(f"Transform of shape {w.shape} does not fit width {aggregated.shape[1]}")
    return aggregated @ w.T


@dataclass
class NormState:
    """What the dropout + L2 normalization of one table needs for replay"""
    mask: Optional[np.ndarray]
    scale: float
    output: np.ndarray
    norms: np.ndarray
    nonzero: np.ndarray
    normalized: bool


def _dropout_l2norm(table: np.ndarray, p: float, training: bool,
                    rng: Optional[np.random.Generator], l2: bool = True
                    ) -> Tuple[np.ndarray, NormState]:
    mask, scale = None, 1.0
    dropped = table
    if training:
        mask = rng.random(table.shape) >= p if p > 0 else np.ones(table.shape, dtype=bool)
        scale = 1.0 / (1.0 - p)
        dropped = table * mask * scale
    nonzero = np.any(dropped != 0, axis=1)
    if not l2:
        return dropped, NormState(mask, scale, dropped, np.ones(len(table)), nonzero, False)
    output, norms = normalize(dropped, norm='l2', axis=1, return_norm=True)
    return output, NormState(mask, scale, output, norms, nonzero, True)


def _dropout_l2norm_adjoint(state: NormState, grad: np.ndarray) -> np.ndarray:
    if state.normalized:
        y = state.output
        # Jacobian of x/|x| is (I - y yᵀ)/|x|
        norms = np.where(state.nonzero, state.norms, 1.0)
        grad = (grad - y * np.sum(y * grad, axis=1, keepdims=True)) / norms[:, None]
        grad[~state.nonzero] = 0.0
    if state.mask is not None:
        grad = grad * state.mask * state.scale
    return grad


def dropout_l2norm(table: np.ndarray, p: float, mode: str = 'eval',
                   seed: Optional[int] = None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Inverted dropout (train mode only) followed by row-wise L2 normalization.

    Zero rows stay zero.

    Returns:
        (normalized table, boolean keep-mask or None in eval mode)
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"Dropout rate must lie in [0, 1), got {p}")
    training = mode == 'train'
    rng = np.random.default_rng(seed) if training else None
    output, state = _dropout_l2norm(np.asarray(table, dtype=np.float64), p, training, rng)
    return output, state.mask


def readout(tables: Sequence[np.ndarray], kind: str) -> np.ndarray:
    """Combine per-layer tables by max, sum, mean or feature concatenation"""
    if not tables:
        raise ValueError("Readout needs at least one layer table")
    if kind == 'concat':
        return np.concatenate(tables, axis=1)
    shapes = {t.shape for t in tables}
    if len(shapes) != 1:
        raise DimensionError(f"Readout over unequal shapes {shapes}")
    stack = np.stack(tables)
    if kind == 'max':
        return stack.max(axis=0)
    if kind == 'sum':
        return stack.sum(axis=0)
    if kind == 'mean':
        return stack.mean(axis=0)
    raise ValueError(f"Unknown readout: {kind}")


def readout_adjoint(tables: Sequence[np.ndarray], kind: str, grad: np.ndarray) -> List[np.ndarray]:
    n = len(tables)
    if kind == 'concat':
        bounds = np.cumsum([0] + [t.shape[1] for t in tables])
        return [grad[:, bounds[l]:bounds[l + 1]] for l in range(n)]
    if kind == 'sum':
        return [grad for _ in range(n)]
    if kind == 'mean':
        return [grad / n for _ in range(n)]
    if kind == 'max':
        # argmax keeps the first maximum, so ties go to the lowest layer
        winner = np.argmax(np.stack(tables), axis=0)
        return [grad * (winner == l) for l in range(n)]
    raise ValueError(f"Unknown readout: {kind}")


@dataclass
class LayerState:
    aggregated: np.ndarray
    activation: np.ndarray
    norm: Optional[NormState]


@dataclass
class ForwardTrace:
    """Everything a train-mode forward keeps for the exact backward pass"""
    cfg: ModelConfig
    adj: NormalizedAdjacency
    params_token: object
    params_version: int
    tables: List[np.ndarray]
    layers: List[LayerState]
    layer0_norm: Optional[NormState]
    readout_inputs: List[np.ndarray]
    final: np.ndarray


def _transform(cfg: ModelConfig, params: ModelParams, layer: int, aggregated: np.ndarray) -> np.ndarray:
    w = params.transform(layer)
    if w is None:
        return aggregated
    if cfg.variant == 'qgcn':
        return hamilton_matvec(w, QuaternionVector.from_concat(aggregated)).concat()
    return aggregated @ w.T


def _transform_adjoint(cfg: ModelConfig, params: ModelParams, layer: int,
                       aggregated: np.ndarray, grad: np.ndarray
                       ) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    w = params.transform(layer)
    if w is None:
        return grad, None
    if cfg.variant == 'qgcn':
        grad_w, grad_v = hamilton_matvec_adjoint(
            w, QuaternionVector.from_concat(aggregated), QuaternionVector.from_concat(grad)
        )
        return grad_v.concat(), grad_w.stacked()
    return grad @ w, grad.T @ aggregated


def _check_shapes(cfg: ModelConfig, params: ModelParams, adj: NormalizedAdjacency):
    if params.variant != cfg.variant:
        raise DimensionError(f"Parameters of {params.variant} used with a {cfg.variant} config")
    if params.n_nodes != adj.n_nodes:
        raise DimensionError(f"Parameters cover {params.n_nodes} nodes, graph has {adj.n_nodes}")
    expected = cfg.layers if cfg.variant in ('qgcn', 'qgcn_q') else 0
    if len(params.weights) != expected:
        raise DimensionError(f"{cfg.variant} with {cfg.layers} layers needs {expected} transforms")


def forward(cfg: ModelConfig, params: ModelParams, adj: NormalizedAdjacency,
            mode: str = 'eval', seed: Optional[int] = None
            ) -> Tuple[np.ndarray, Optional[ForwardTrace]]:
    """
    Run L propagation layers and the readout.

    Args:
        cfg: Model configuration
        params: Model parameters
        adj: Normalized adjacency of the graph to propagate over
        mode: 'train' applies dropout and returns a trace, 'eval' does neither
        seed: Dropout seed (train mode)

    Returns:
        (final (M+N, D_out) table, ForwardTrace or None)
    """
    _check_shapes(cfg, params, adj)
    training = mode == 'train'
    rng = np.random.default_rng(seed) if training else None
    lightgcn = cfg.variant == 'lightgcn'

    x0 = params.embedding_table()
    tables = [x0]
    layers: List[LayerState] = []
    x = x0
    for layer in range(cfg.layers):
        aggregated = adj.matmul(x)
        activation = _transform(cfg, params, layer, aggregated)
        if lightgcn:
            x, state = activation, None
        else:
            x, state = _dropout_l2norm(activation, cfg.dropout, training, rng, cfg.l2_normalize)
        tables.append(x)
        layers.append(LayerState(aggregated, activation, state))

    layer0_norm = None
    if lightgcn:
        readout_inputs = tables
        final = sum(w * t for w, t in zip(cfg.lightgcn_weights(), tables))
    else:
        readout_inputs = tables[1:]
        if cfg.include_layer0:
            x0_normed, layer0_norm = _dropout_l2norm(x0, 0.0, False, None, cfg.l2_normalize)
            readout_inputs = [x0_normed] + readout_inputs
        final = readout(readout_inputs, cfg.readout)

    if not training:
        return final, None
    trace = ForwardTrace(cfg, adj, params.token, params.version, tables, layers,
                         layer0_norm, readout_inputs, final)
    return final, trace


def backpropagate(trace: ForwardTrace, params: ModelParams, grad_final: np.ndarray) -> ModelParams:
    """
    Reverse-mode pass from d(loss)/d(final table) to every parameter.

    Returns:
        Gradients packed as a ModelParams of the same layout
    """
    if params.token is not trace.params_token or params.version != trace.params_version:
        raise StaleTraceError("Trace was recorded for a different parameter state")
    cfg = trace.cfg
    grads = params.zeros_like()
    grad_tables = [np.zeros_like(t) for t in trace.tables]

    if cfg.variant == 'lightgcn':
        for layer, weight in enumerate(cfg.lightgcn_weights()):
            grad_tables[layer] += weight * grad_final
    else:
        per_input = readout_adjoint(trace.readout_inputs, cfg.readout, grad_final)
        if cfg.include_layer0:
            grad_tables[0] += _dropout_l2norm_adjoint(trace.layer0_norm, per_input[0])
            per_input = per_input[1:]
        for layer, grad in enumerate(per_input, start=1):
            grad_tables[layer] += grad

    for layer in range(cfg.layers, 0, -1):
        state = trace.layers[layer - 1]
        grad = grad_tables[layer]
        if state.norm is not None:
            grad = _dropout_l2norm_adjoint(state.norm, grad)
        grad_aggregated, grad_w = _transform_adjoint(cfg, params, layer - 1, state.aggregated, grad)
        if grad_w is not None:
            grads.weights[layer - 1] += grad_w
        # the normalized adjacency is symmetric, so Lᵀ g = L g
        grad_tables[layer - 1] += trace.adj.matmul(grad_aggregated)

    if params.embedding.ndim == 3:
        grads.embedding += QuaternionVector.from_concat(grad_tables[0]).stacked()
    else:
        grads.embedding += grad_tables[0]
    return grads


def predict(final: np.ndarray, n_users: int, user: int, item: int) -> float:
    """Inner product of the final user and item rows"""
    n_items = final.shape[0] - n_users
    if not 0 <= user < n_users:
        raise IndexError(f"User {user} outside [0, {n_users})")
    if not 0 <= item < n_items:
        raise IndexError(f"Item {item} outside [0, {n_items})")
    return float(final[user] @ final[n_users + item])
