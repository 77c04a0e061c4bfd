"""Seeded random projections: dense Gaussian/Rademacher, FJLT (SRHT) and SJLT.

Every projection is a pure function of its :class:`SketchSpec`. Dense
matrices are streamed row-block by row-block from a counter-based generator
(Philox), SJLT columns come from a stateless hash of ``(seed, column, slot)``,
so nothing has to be stored to reproduce a projection. Each kind also has a
``*_materialize`` counterpart that builds the explicit ``k x p`` matrix; these
exist for testing and are guarded against huge sizes.
"""

from __future__ import annotations

import enum
import functools
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import pdist

from . import _ops

MATERIALIZE_LIMIT = 10**8
DENSE_BLOCK_ROWS = 64

_M64 = 0xFFFFFFFFFFFFFFFF
_DOMAIN_SJLT = 0x534A4C54
_DOMAIN_FJLT_SIGN = 0x464A5331
_DOMAIN_FJLT_ROWS = 0x464A5232
_DOMAIN_GAUSS = 0x47415553
_DOMAIN_RADEM = 0x52414445


class SketchKind(str, enum.Enum):
    GAUSSIAN = "gaussian"
    RADEMACHER = "rademacher"
    FJLT = "fjlt"
    SJLT = "sjlt"


@dataclass(frozen=True)
class SketchSpec:
    """Immutable description of one random projection ``R^p -> R^k``."""

    kind: SketchKind
    input_dim: int
    target_dim: int
    sparsity: int = 1
    seed: int = 0
    normalize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", SketchKind(self.kind))
        if self.input_dim < 1 or self.target_dim < 1:
            raise ValueError(
                f"dimensions must be positive, got p={self.input_dim}, k={self.target_dim}"
            )
        if not 0 <= self.seed <= _M64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.kind is SketchKind.SJLT and not 1 <= self.sparsity <= self.target_dim:
            raise ValueError(f"need 1 <= s <= k, got s={self.sparsity}, k={self.target_dim}")
        if self.kind is SketchKind.FJLT and self.target_dim > _next_pow2(self.input_dim):
            raise ValueError(
                f"FJLT samples k={self.target_dim} rows out of {_next_pow2(self.input_dim)}"
            )
        if self.target_dim > self.input_dim:
            warnings.warn(
                f"{self.kind.value} target dim {self.target_dim} exceeds input dim {self.input_dim}",
                stacklevel=3,
            )

    @property
    def p(self) -> int:
        return self.input_dim

    @property
    def k(self) -> int:
        return self.target_dim


@dataclass
class GradientVector:
    """A per-sample gradient, stored dense or as sorted ``(index, value)`` pairs."""

    dim: int
    values: np.ndarray
    indices: Optional[np.ndarray] = None
    nnz: int = field(init=False)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.indices is None:
            if self.values.shape != (self.dim,):
                raise ValueError(f"dense values must have shape ({self.dim},)")
            self.nnz = int(np.count_nonzero(self.values))
            return
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.shape != self.values.shape or self.indices.ndim != 1:
            raise ValueError("sparse indices and values must be 1-d and equally long")
        if self.indices.size:
            if np.any(np.diff(self.indices) <= 0):
                raise ValueError("sparse indices must be strictly increasing")
            if self.indices[0] < 0 or self.indices[-1] >= self.dim:
                raise ValueError(f"sparse indices must lie in [0, {self.dim})")
        self.nnz = int(self.indices.size)

    @classmethod
    def dense(cls, values) -> "GradientVector":
        values = np.asarray(values)
        return cls(dim=values.shape[0], values=values)

    @classmethod
    def sparse(cls, indices, values, dim: int) -> "GradientVector":
        return cls(dim=dim, values=np.asarray(values), indices=indices)

    @classmethod
    def sparsify(cls, values) -> "GradientVector":
        """Sparse representation of a dense array, keeping exact nonzeros."""
        values = np.asarray(values)
        idx = np.flatnonzero(values)
        return cls(dim=values.shape[0], values=values[idx], indices=idx)

    @property
    def is_sparse(self) -> bool:
        return self.indices is not None

    def nonzero(self) -> tuple[np.ndarray, np.ndarray]:
        if self.indices is not None:
            return self.indices, self.values
        idx = np.flatnonzero(self.values)
        return idx, self.values[idx]

    def to_dense(self) -> np.ndarray:
        if self.indices is None:
            return self.values
        out = np.zeros(self.dim, dtype=self.values.dtype if self.values.size else np.float64)
        out[self.indices] = self.values
        return out


GradientLike = Union[GradientVector, np.ndarray]


def as_gradient(g: GradientLike) -> GradientVector:
    if isinstance(g, GradientVector):
        return g
    return GradientVector.dense(g)


def _check_dim(spec: SketchSpec, g: GradientVector) -> None:
    if g.dim != spec.input_dim:
        raise ValueError(f"gradient has dim {g.dim}, projection expects {spec.input_dim}")


def _next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def _guard(k: int, p: int) -> None:
    if k * p > MATERIALIZE_LIMIT:
        raise MemoryError(
            f"refusing to materialize a {k}x{p} projection ({k * p} > {MATERIALIZE_LIMIT} entries)"
        )


# ---------------------------------------------------------------------------
# stateless hashing


def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arithmetic wraps
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _hash(seed: int, domain: int, cols: np.ndarray, slot: int = 0, attempt: int = 0) -> np.ndarray:
    key = _mix64(np.array([seed ^ (domain << 32)], dtype=np.uint64))
    h = _mix64(key ^ cols.astype(np.uint64))
    return _mix64(h ^ np.uint64((slot << 32) | attempt))


def _bounded(h: np.ndarray, k: int) -> np.ndarray:
    # multiply-shift range reduction onto [0, k)
    return (((h >> np.uint64(32)) * np.uint64(k)) >> np.uint64(32)).astype(np.int64)


def _sign(h: np.ndarray) -> np.ndarray:
    return np.where((h >> np.uint64(31)) & np.uint64(1), -1, 1).astype(np.int8)


def column_hashes(spec: SketchSpec, cols) -> tuple[np.ndarray, np.ndarray]:
    """Rows and signs of SJLT columns ``cols``, shapes ``(len(cols), s)``.

    Rows within a column are distinct; collisions are re-drawn with a bumped
    attempt counter so the result depends only on ``(seed, column, slot)``.
    """
    cols = np.asarray(cols, dtype=np.int64).ravel()
    if cols.size and (cols.min() < 0 or cols.max() >= spec.input_dim):
        raise IndexError(f"column index out of range [0, {spec.input_dim})")
    s, k = spec.sparsity, spec.target_dim
    ucols = cols.astype(np.uint64)
    rows = np.empty((cols.size, s), dtype=np.int64)
    signs = np.empty((cols.size, s), dtype=np.int8)
    for slot in range(s):
        h = _hash(spec.seed, _DOMAIN_SJLT, ucols, slot)
        r = _bounded(h, k)
        clash = (rows[:, :slot] == r[:, None]).any(axis=1)
        attempt = 0
        while clash.any():
            attempt += 1
            h2 = _hash(spec.seed, _DOMAIN_SJLT, ucols[clash], slot, attempt)
            h[clash] = h2
            r[clash] = _bounded(h2, k)
            clash = (rows[:, :slot] == r[:, None]).any(axis=1)
        rows[:, slot] = r
        signs[:, slot] = _sign(h)
    return rows, signs


def derive_column_hash(spec: SketchSpec, j: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``s`` target rows and ``+-1`` signs that SJLT assigns to input column ``j``."""
    if spec.kind is not SketchKind.SJLT:
        raise ValueError("column hashes are defined for SJLT specs only")
    if not 0 <= j < spec.input_dim:
        raise IndexError(f"column {j} out of range [0, {spec.input_dim})")
    rows, signs = column_hashes(spec, [j])
    return rows[0], signs[0]


# ---------------------------------------------------------------------------
# SJLT


def _sjlt_scale(spec: SketchSpec) -> float:
    return 1.0 / math.sqrt(spec.sparsity) if spec.normalize else 1.0


def sjlt_accumulate(spec: SketchSpec, out: np.ndarray, idx: np.ndarray, vals: np.ndarray) -> None:
    """Scatter-add ``vals`` at input coordinates ``idx`` into ``out`` (length k).

    Contributions land in ascending order of ``idx`` so dense and sparse
    callers produce bit-identical sums. No normalization is applied here.
    """
    if idx.size == 0:
        return
    rows, signs = column_hashes(spec, idx)
    contrib = signs * np.asarray(vals, dtype=np.float64)[:, None]
    np.add.at(out, rows.ravel(), contrib.ravel())
    _ops.record("sjlt", spec.sparsity * idx.size)


def sjlt_project(spec: SketchSpec, g: GradientLike) -> np.ndarray:
    """SJLT of one gradient; cost ``O(s * nnz(g))``, touches only nonzeros."""
    if spec.kind is not SketchKind.SJLT:
        raise ValueError(f"expected an SJLT spec, got {spec.kind.value}")
    g = as_gradient(g)
    _check_dim(spec, g)
    idx, vals = g.nonzero()
    out = np.zeros(spec.target_dim, dtype=np.float64)
    sjlt_accumulate(spec, out, idx, vals)
    if spec.normalize:
        out *= _sjlt_scale(spec)
    return out


def sjlt_project_batch(spec: SketchSpec, G: np.ndarray) -> np.ndarray:
    """Row-wise SJLT of an ``n x p`` array, bit-identical to :func:`sjlt_project` per row."""
    G = np.atleast_2d(G)
    if G.shape[1] != spec.input_dim:
        raise ValueError(f"gradients have dim {G.shape[1]}, projection expects {spec.input_dim}")
    n, k, s = G.shape[0], spec.target_dim, spec.sparsity
    rows, cols = np.nonzero(G)
    hrows, signs = column_hashes(spec, np.arange(spec.input_dim))
    target = (rows[:, None] * k + hrows[cols]).ravel()
    weights = (signs[cols] * G[rows, cols].astype(np.float64)[:, None]).ravel()
    out = np.bincount(target, weights=weights, minlength=n * k).reshape(n, k)
    _ops.record("sjlt", s * rows.size)
    if spec.normalize:
        out *= _sjlt_scale(spec)
    return out


def sjlt_materialize(spec: SketchSpec) -> sp.csc_matrix:
    """Explicit sparse ``k x p`` SJLT matrix with exactly ``s`` nonzeros per column."""
    if spec.kind is not SketchKind.SJLT:
        raise ValueError(f"expected an SJLT spec, got {spec.kind.value}")
    k, p, s = spec.target_dim, spec.input_dim, spec.sparsity
    _guard(k, p)
    rows, signs = column_hashes(spec, np.arange(p))
    data = signs.astype(np.float64).ravel() * _sjlt_scale(spec)
    cols = np.repeat(np.arange(p), s)
    return sp.csc_matrix((data, (rows.ravel(), cols)), shape=(k, p))


# ---------------------------------------------------------------------------
# dense Gaussian / Rademacher


def _dense_generator(spec: SketchSpec) -> np.random.Generator:
    domain = _DOMAIN_GAUSS if spec.kind is SketchKind.GAUSSIAN else _DOMAIN_RADEM
    return np.random.Generator(np.random.Philox(key=spec.seed + (domain << 64)))


def _dense_blocks(spec: SketchSpec):
    """Yield ``(row_start, block)`` row-major blocks of the projection matrix."""
    rng = _dense_generator(spec)
    k, p = spec.target_dim, spec.input_dim
    for r0 in range(0, k, DENSE_BLOCK_ROWS):
        r1 = min(k, r0 + DENSE_BLOCK_ROWS)
        if spec.kind is SketchKind.GAUSSIAN:
            block = rng.standard_normal((r1 - r0, p))
        else:
            block = rng.integers(0, 2, size=(r1 - r0, p), dtype=np.int8) * 2.0 - 1.0
        yield r0, block


def _dense_scale(spec: SketchSpec) -> float:
    return 1.0 / math.sqrt(spec.target_dim) if spec.normalize else 1.0


@functools.lru_cache(maxsize=16)
def _cached_dense(spec: SketchSpec) -> np.ndarray:
    return dense_materialize(spec)


def dense_materialize(spec: SketchSpec) -> np.ndarray:
    if spec.kind not in (SketchKind.GAUSSIAN, SketchKind.RADEMACHER):
        raise ValueError(f"expected a dense spec, got {spec.kind.value}")
    _guard(spec.target_dim, spec.input_dim)
    P = np.empty((spec.target_dim, spec.input_dim))
    for r0, block in _dense_blocks(spec):
        P[r0 : r0 + block.shape[0]] = block
    return P * _dense_scale(spec)


def _dense_project(spec: SketchSpec, g: GradientLike, cache: bool) -> np.ndarray:
    g = as_gradient(g)
    _check_dim(spec, g)
    x = g.to_dense().astype(np.float64)
    _ops.record(spec.kind.value, spec.target_dim * spec.input_dim)
    if cache:
        return _cached_dense(spec) @ x
    out = np.empty(spec.target_dim)
    for r0, block in _dense_blocks(spec):
        out[r0 : r0 + block.shape[0]] = block @ x
    return out * _dense_scale(spec)


def gaussian_project(spec: SketchSpec, g: GradientLike, cache: bool = False) -> np.ndarray:
    """``P g`` with ``P_ij ~ N(0, 1)``, streamed unless ``cache`` keeps the matrix."""
    if spec.kind is not SketchKind.GAUSSIAN:
        raise ValueError(f"expected a Gaussian spec, got {spec.kind.value}")
    return _dense_project(spec, g, cache)


def rademacher_project(spec: SketchSpec, g: GradientLike, cache: bool = False) -> np.ndarray:
    if spec.kind is not SketchKind.RADEMACHER:
        raise ValueError(f"expected a Rademacher spec, got {spec.kind.value}")
    return _dense_project(spec, g, cache)


# ---------------------------------------------------------------------------
# FJLT as subsampled randomized Hadamard transform


def fwht(x: np.ndarray) -> np.ndarray:
    """Unnormalized Walsh-Hadamard transform along the last axis, in place."""
    n = x.shape[-1]
    if n & (n - 1):
        raise ValueError(f"length {n} is not a power of two")
    lead = x.shape[:-1]
    h = 1
    while h < n:
        v = x.reshape(*lead, n // (2 * h), 2, h)
        a = v[..., 0, :].copy()
        v[..., 0, :] += v[..., 1, :]
        v[..., 1, :] = a - v[..., 1, :]
        h *= 2
    return x


@functools.lru_cache(maxsize=64)
def _fjlt_plan(spec: SketchSpec) -> tuple[np.ndarray, np.ndarray]:
    p2 = _next_pow2(spec.input_dim)
    signs = _sign(_hash(spec.seed, _DOMAIN_FJLT_SIGN, np.arange(spec.input_dim, dtype=np.uint64)))
    rng = np.random.Generator(np.random.Philox(key=spec.seed + (_DOMAIN_FJLT_ROWS << 64)))
    rows = np.sort(rng.choice(p2, size=spec.target_dim, replace=False))
    return signs.astype(np.float64), rows


def _fjlt_scale(spec: SketchSpec) -> float:
    p2 = _next_pow2(spec.input_dim)
    if spec.normalize:
        return math.sqrt(p2 / spec.target_dim) / math.sqrt(p2)
    return 1.0 / math.sqrt(p2)


def _fjlt_apply(spec: SketchSpec, X: np.ndarray) -> np.ndarray:
    signs, rows = _fjlt_plan(spec)
    p, p2 = spec.input_dim, _next_pow2(spec.input_dim)
    buf = np.zeros(X.shape[:-1] + (p2,))
    buf[..., :p] = X * signs
    fwht(buf)
    n = int(np.prod(X.shape[:-1], dtype=np.int64))
    _ops.record("fjlt", n * (p2 * max(1, p2.bit_length() - 1) + p + spec.target_dim))
    return buf[..., rows] * _fjlt_scale(spec)


def fjlt_project(spec: SketchSpec, g: GradientLike) -> np.ndarray:
    """SRHT: sign flip, zero-pad to a power of two, Hadamard, sample ``k`` rows."""
    if spec.kind is not SketchKind.FJLT:
        raise ValueError(f"expected an FJLT spec, got {spec.kind.value}")
    g = as_gradient(g)
    _check_dim(spec, g)
    return _fjlt_apply(spec, g.to_dense().astype(np.float64))


def fjlt_materialize(spec: SketchSpec) -> np.ndarray:
    if spec.kind is not SketchKind.FJLT:
        raise ValueError(f"expected an FJLT spec, got {spec.kind.value}")
    _guard(spec.target_dim, spec.input_dim)
    _guard(spec.input_dim, _next_pow2(spec.input_dim))
    return _fjlt_apply(spec, np.eye(spec.input_dim)).T.copy()


# ---------------------------------------------------------------------------
# dispatch


def project(spec: SketchSpec, g: GradientLike) -> np.ndarray:
    if spec.kind is SketchKind.SJLT:
        return sjlt_project(spec, g)
    if spec.kind is SketchKind.FJLT:
        return fjlt_project(spec, g)
    return _dense_project(spec, g, cache=False)


def project_batch(spec: SketchSpec, G: np.ndarray, cache: bool = True) -> np.ndarray:
    """Project every row of ``G``; results match :func:`project` row by row."""
    G = np.atleast_2d(G)
    if spec.kind is SketchKind.SJLT:
        return sjlt_project_batch(spec, G)
    if G.shape[1] != spec.input_dim:
        raise ValueError(f"gradients have dim {G.shape[1]}, projection expects {spec.input_dim}")
    if spec.kind is SketchKind.FJLT:
        return _fjlt_apply(spec, G.astype(np.float64))
    _ops.record(spec.kind.value, G.shape[0] * spec.target_dim * spec.input_dim)
    P = _cached_dense(spec) if cache else dense_materialize(spec)
    return G.astype(np.float64) @ P.T


def materialize(spec: SketchSpec) -> np.ndarray:
    """Dense ``k x p`` matrix of any projection kind."""
    if spec.kind is SketchKind.SJLT:
        return sjlt_materialize(spec).toarray()
    if spec.kind is SketchKind.FJLT:
        return fjlt_materialize(spec)
    return dense_materialize(spec)


# ---------------------------------------------------------------------------
# benchmarking


def pairwise_relative_errors(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """``| ||y_a - y_b|| - ||x_a - x_b|| | / ||x_a - x_b||`` over all pairs."""
    dx = pdist(np.asarray(X, dtype=np.float64))
    dy = pdist(np.asarray(Y, dtype=np.float64))
    keep = dx > 0
    return np.abs(dy[keep] - dx[keep]) / dx[keep]


def random_sparse_inputs(n: int, p: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """``n`` Gaussian vectors with exactly ``round(fraction * p)`` nonzeros each."""
    nnz = max(1, int(round(fraction * p)))
    X = np.zeros((n, p))
    for i in range(n):
        idx = rng.choice(p, size=nnz, replace=False)
        X[i, idx] = rng.standard_normal(nnz)
    return X


@dataclass
class BenchmarkResult:
    kind: str
    input_dim: int
    target_dim: int
    sparsity_level: float
    wall_time: float
    op_count: float
    median_relative_error: float


def benchmark_projection(
    spec: SketchSpec,
    sparsity_level: float,
    trials: int = 3,
    n_vectors: int = 32,
    seed: int = 0,
) -> BenchmarkResult:
    """Time one projection kind on random inputs with a given nonzero fraction.

    ``wall_time`` is the median over trials of the mean time per vector,
    ``op_count`` the multiply-adds per vector, and the error is the median
    pairwise-distance relative error of the normalized variant.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not 0 < sparsity_level <= 1:
        raise ValueError("sparsity_level is a nonzero fraction in (0, 1]")
    rng = np.random.default_rng(seed)
    X = random_sparse_inputs(n_vectors, spec.input_dim, sparsity_level, rng)
    inputs = [GradientVector.sparsify(x) for x in X]
    normed = replace(spec, normalize=True)
    times = []
    with _ops.count_ops() as ops:
        for _ in range(trials):
            t0 = time.perf_counter()
            Y = np.stack([project(normed, g) for g in inputs])
            times.append((time.perf_counter() - t0) / n_vectors)
    errors = pairwise_relative_errors(X, Y)
    return BenchmarkResult(
        kind=spec.kind.value,
        input_dim=spec.input_dim,
        target_dim=spec.target_dim,
        sparsity_level=sparsity_level,
        wall_time=float(np.median(times)),
        op_count=sum(ops.values()) / (trials * n_vectors),
        median_relative_error=float(np.median(errors)),
    )
