"""
Quaternion algebra for QGCN
Scalars, block vectors and block matrices with Hamilton products
"""

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np


class DimensionError(ValueError):
    """Raised when quaternion operands have incompatible shapes"""


COMPONENTS = ('r', 'i', 'j', 'k')

# Block layout of W ⊗ v as (output block, input block, weight block, sign).
# Row r: W_r v_r - W_i v_i - W_j v_j - W_k v_k, and so on for i, j, k.
HAMILTON_PATTERN = (
    (0, 0, 0, 1.0), (0, 1, 1, -1.0), (0, 2, 2, -1.0), (0, 3, 3, -1.0),
    (1, 0, 1, 1.0), (1, 1, 0, 1.0), (1, 2, 3, -1.0), (1, 3, 2, 1.0),
    (2, 0, 2, 1.0), (2, 1, 3, 1.0), (2, 2, 0, 1.0), (2, 3, 1, -1.0),
    (3, 0, 3, 1.0), (3, 1, 2, -1.0), (3, 2, 1, 1.0), (3, 3, 0, 1.0),
)


@dataclass(frozen=True)
class Quaternion:
    """A single quaternion r + i·i + j·j + k·k"""
    r: float
    i: float
    j: float
    k: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.r, self.i, self.j, self.k])):
            raise ValueError("Quaternion components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.r, self.i, self.j, self.k], dtype=np.float64)

    def norm(self) -> float:
        return float(np.sqrt(self.r ** 2 + self.i ** 2 + self.j ** 2 + self.k ** 2))

    def left_matrix(self) -> np.ndarray:
        """4x4 real matrix L(q) with L(q) @ p == q ⊗ p"""
        r, i, j, k = self.r, self.i, self.j, self.k
        return np.array([
            [r, -i, -j, -k],
            [i, r, -k, j],
            [j, k, r, -i],
            [k, -j, i, r],
        ], dtype=np.float64)

    def __neg__(self):
        return Quaternion(-self.r, -self.i, -self.j, -self.k)


@dataclass(frozen=True, eq=False)
class QuaternionVector:
    """
    Quaternion vector stored as four separate real blocks.

    Each block has shape (..., d); a leading axis turns the vector into a
    table with one quaternion vector per row.
    """
    r: np.ndarray
    i: np.ndarray
    j: np.ndarray
    k: np.ndarray

    def __post_init__(self):
        blocks = [np.ascontiguousarray(b, dtype=np.float64).view()
                  for b in (self.r, self.i, self.j, self.k)]
        shape = blocks[0].shape
        if any(b.shape != shape for b in blocks):
            raise DimensionError(
                f"Quaternion blocks must share a shape, got {[b.shape for b in blocks]}"
            )
        if len(shape) == 0 or shape[-1] < 1:
            raise DimensionError("Quaternion dimension d must be at least 1")
        for name, block in zip(COMPONENTS, blocks):
            block.setflags(write=False)
            object.__setattr__(self, name, block)

    @property
    def blocks(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return (self.r, self.i, self.j, self.k)

    @property
    def dim(self) -> int:
        """Quaternion dimension d"""
        return self.r.shape[-1]

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.r.shape

    def concat(self) -> np.ndarray:
        """Real representation [r | i | j | k] along the last axis"""
        return np.concatenate(self.blocks, axis=-1)

    @classmethod
    def from_concat(cls, x: np.ndarray) -> 'QuaternionVector':
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] % 4 != 0:
            raise DimensionError(
                f"Real width {x.shape[-1]} is not divisible by 4"
            )
        d = x.shape[-1] // 4
        return cls(*(x[..., c * d:(c + 1) * d] for c in range(4)))

    @classmethod
    def from_stacked(cls, stacked: np.ndarray) -> 'QuaternionVector':
        """Build from an array whose first axis holds the four blocks"""
        if stacked.shape[0] != 4:
            raise DimensionError("Stacked quaternion arrays need a leading axis of 4")
        return cls(stacked[0], stacked[1], stacked[2], stacked[3])

    def stacked(self) -> np.ndarray:
        return np.stack(self.blocks)

    @classmethod
    def zeros(cls, shape) -> 'QuaternionVector':
        return cls(*(np.zeros(shape) for _ in range(4)))


@dataclass(frozen=True, eq=False)
class QuaternionMatrix:
    """Quaternion d x d matrix W = W_r + W_i i + W_j j + W_k k"""
    r: np.ndarray
    i: np.ndarray
    j: np.ndarray
    k: np.ndarray

    def __post_init__(self):
        blocks = [np.ascontiguousarray(b, dtype=np.float64).view()
                  for b in (self.r, self.i, self.j, self.k)]
        shape = blocks[0].shape
        if len(shape) != 2 or any(b.shape != shape for b in blocks):
            raise DimensionError(
                f"Quaternion matrix blocks must be equal 2-D shapes, got {[b.shape for b in blocks]}"
            )
        for name, block in zip(COMPONENTS, blocks):
            block.setflags(write=False)
            object.__setattr__(self, name, block)

    @property
    def blocks(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return (self.r, self.i, self.j, self.k)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.r.shape

    @property
    def num_parameters(self) -> int:
        """Free real parameters: 4·d² for a square d x d matrix"""
        return 4 * self.r.size

    @classmethod
    def identity(cls, d: int) -> 'QuaternionMatrix':
        zeros = np.zeros((d, d))
        return cls(np.eye(d), zeros, zeros, zeros)

    @classmethod
    def from_stacked(cls, stacked: np.ndarray) -> 'QuaternionMatrix':
        if stacked.shape[0] != 4:
            raise DimensionError("Stacked quaternion matrices need a leading axis of 4")
        return cls(stacked[0], stacked[1], stacked[2], stacked[3])

    def stacked(self) -> np.ndarray:
        return np.stack(self.blocks)


QuaternionLike = Union[Quaternion, QuaternionVector]


def q_add(a: QuaternionLike, b: QuaternionLike) -> QuaternionLike:
    """Componentwise quaternion addition"""
    if isinstance(a, Quaternion) and isinstance(b, Quaternion):
        return Quaternion(a.r + b.r, a.i + b.i, a.j + b.j, a.k + b.k)
    if isinstance(a, QuaternionVector) and isinstance(b, QuaternionVector):
        if a.shape != b.shape:
            raise DimensionError(f"Cannot add quaternion vectors of shape {a.shape} and {b.shape}")
        return QuaternionVector(*(x + y for x, y in zip(a.blocks, b.blocks)))
    raise DimensionError("q_add needs two scalars or two vectors")


def q_inner(a: QuaternionVector, b: QuaternionVector) -> float:
    """Sum of the four real block dot products"""
    if a.shape != b.shape:
        raise DimensionError(f"Cannot take inner product of shapes {a.shape} and {b.shape}")
    return float(sum(np.sum(x * y) for x, y in zip(a.blocks, b.blocks)))


def hamilton(q: Quaternion, p: Quaternion) -> Quaternion:
    """Hamilton product q ⊗ p in component form"""
    return Quaternion(
        q.r * p.r - q.i * p.i - q.j * p.j - q.k * p.k,
        q.i * p.r + q.r * p.i - q.k * p.j + q.j * p.k,
        q.j * p.r + q.k * p.i + q.r * p.j - q.i * p.k,
        q.k * p.r - q.j * p.i + q.i * p.j + q.r * p.k,
    )


def _check_matvec_shapes(w: QuaternionMatrix, v: QuaternionVector):
    rows, cols = w.shape
    if rows != cols or cols != v.dim:
        raise DimensionError(
            f"Transform of shape {w.shape} cannot act on quaternion dimension {v.dim}"
        )


def hamilton_matvec(w: QuaternionMatrix, v: QuaternionVector) -> QuaternionVector:
    """
    Quaternion transform W ⊗ v computed block by block.

    Args:
        w: Quaternion d x d transform
        v: Quaternion vector of dimension d, or a table of them (rows)

    Returns:
        QuaternionVector of the same shape as v
    """
    _check_matvec_shapes(w, v)
    out = [np.zeros(v.shape) for _ in range(4)]
    for a, b, c, sign in HAMILTON_PATTERN:
        # works for both a single vector (d,) and a table (n, d)
        out[a] += sign * (v.blocks[b] @ w.blocks[c].T)
    return QuaternionVector(*out)


def hamilton_matvec_adjoint(w: QuaternionMatrix, v: QuaternionVector,
                            grad_out: QuaternionVector
                            ) -> Tuple[QuaternionMatrix, QuaternionVector]:
    """
    Gradients of a scalar loss through y = W ⊗ v.

    Applies the transpose of the block matrix to grad_out for the input and
    accumulates the outer products of every block position into the four
    shared weight blocks.

    Returns:
        (grad_w, grad_v)
    """
    _check_matvec_shapes(w, v)
    if grad_out.shape != v.shape:
        raise DimensionError("Upstream gradient must match the transformed shape")
    grad_v = [np.zeros(v.shape) for _ in range(4)]
    grad_w = [np.zeros(w.shape) for _ in range(4)]
    for a, b, c, sign in HAMILTON_PATTERN:
        g = grad_out.blocks[a]
        grad_v[b] += sign * (g @ w.blocks[c])
        if g.ndim == 1:
            grad_w[c] += sign * np.outer(g, v.blocks[b])
        else:
            grad_w[c] += sign * (g.T @ v.blocks[b])
    return QuaternionMatrix(*grad_w), QuaternionVector(*grad_v)


def realize_block_matrix(w: QuaternionMatrix) -> np.ndarray:
    """
    Dense 4d x 4d real matrix of the transform.

    Only used to cross-check hamilton_matvec; propagation never builds it.
    """
    d = w.shape[0]
    dense = np.zeros((4 * d, 4 * d))
    for a, b, c, sign in HAMILTON_PATTERN:
        dense[a * d:(a + 1) * d, b * d:(b + 1) * d] = sign * w.blocks[c]
    return dense
