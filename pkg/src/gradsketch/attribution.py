"""Influence scoring over compressed gradients.

The cache stage accumulates the (compressed) Fisher matrix, factorizes
``F + lam*I`` and preconditions every training gradient; the attribute stage
is then a matrix product against the test gradients. Gradient stores carry
the compressor fingerprint so gradients from different projections are never
compared.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

STORE_MAGIC = b"GSTR"
STORE_VERSION = 1
_STORE_HEADER = struct.Struct("<4sIQQI32s")
_DTYPE_CODES = {1: np.dtype("<f4")}

SCORES_MAGIC = b"GSCR"
_SCORES_HEADER = struct.Struct("<4sIQQ")


class StoreFormatError(ValueError):
    pass


class FingerprintMismatch(ValueError):
    pass


class FactorizationError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# FIM


@dataclass
class FimState:
    """Running ``sum g g^T`` in f64; the ``1/n`` normalization happens on read."""

    dim: int
    damping: float = 0.0
    n: int = 0
    _acc: np.ndarray = field(default=None, repr=False)
    _factor: Optional[tuple] = field(default=None, repr=False)
    _factor_lam: Optional[float] = field(default=None, repr=False)

    def __post_init__(self):
        if self._acc is None:
            self._acc = np.zeros((self.dim, self.dim))
        if self.damping < 0:
            raise ValueError("damping must be non-negative")

    @property
    def matrix(self) -> np.ndarray:
        if self.n == 0:
            return np.zeros_like(self._acc)
        F = self._acc / self.n
        return 0.5 * (F + F.T)

    def set_damping(self, lam: float) -> "FimState":
        if lam < 0:
            raise ValueError("damping must be non-negative")
        self.damping = float(lam)
        return self

    def factorize(self):
        if self._factor is None or self._factor_lam != self.damping:
            A = self.matrix
            A[np.diag_indices_from(A)] += self.damping
            try:
                self._factor = scipy.linalg.cho_factor(A, lower=True, check_finite=True)
            except (np.linalg.LinAlgError, ValueError) as exc:
                self._factor = None
                raise FactorizationError(
                    f"Cholesky of F + {self.damping:g} I failed ({exc}); increase the damping"
                ) from None
            self._factor_lam = self.damping
        return self._factor

    def solve(self, G: np.ndarray) -> np.ndarray:
        G = np.asarray(G, dtype=np.float64)
        if G.shape[-1] != self.dim:
            raise ValueError(f"vector dim {G.shape[-1]} does not match FIM dim {self.dim}")
        factor = self.factorize()
        if G.ndim == 1:
            return scipy.linalg.cho_solve(factor, G)
        return scipy.linalg.cho_solve(factor, G.T).T


def fim_accumulate(state: FimState, G: np.ndarray) -> FimState:
    """Add the rank-1 terms of every row of ``G``."""
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    if G.shape[1] != state.dim:
        raise ValueError(f"gradient dim {G.shape[1]} does not match FIM dim {state.dim}")
    state._acc += G.T @ G
    state.n += G.shape[0]
    state._factor = None
    return state


def fim_from(G: np.ndarray, damping: float = 0.0) -> FimState:
    G = np.atleast_2d(G)
    return fim_accumulate(FimState(G.shape[1], damping), G)


def ifvp(state: FimState, g: np.ndarray) -> np.ndarray:
    """``(F + lam I)^{-1} g`` for a vector or a batch of row vectors."""
    return state.solve(g)


# ---------------------------------------------------------------------------
# gradient stores


@dataclass
class GradientStore:
    records: np.ndarray  # n x k
    fingerprint: str  # 64 hex chars

    def __post_init__(self):
        self.records = np.asarray(self.records)
        if self.records.ndim != 2:
            raise ValueError("store records must be 2-d")
        bytes.fromhex(self.fingerprint)
        if len(self.fingerprint) != 64:
            raise ValueError("fingerprint must be a 256-bit hex digest")

    @property
    def n(self) -> int:
        return self.records.shape[0]

    @property
    def k(self) -> int:
        return self.records.shape[1]

    def block(self, start: int, stop: int) -> "GradientStore":
        return GradientStore(self.records[:, start:stop], self.fingerprint)


def write_store(path, store: GradientStore) -> Path:
    path = Path(path)
    header = _STORE_HEADER.pack(STORE_MAGIC, STORE_VERSION, store.n, store.k, 1, bytes.fromhex(store.fingerprint))
    path.write_bytes(header + np.ascontiguousarray(store.records, dtype="<f4").tobytes())
    return path


def read_header(path) -> tuple[int, int, str]:
    raw = Path(path).read_bytes()[: _STORE_HEADER.size]
    n, k, _, fp = _parse_header(raw, path)
    return n, k, fp


def _parse_header(raw: bytes, path):
    if len(raw) < _STORE_HEADER.size or raw[:4] != STORE_MAGIC:
        raise StoreFormatError(f"{path}: not a gradient store")
    _, version, n, k, code, fp = _STORE_HEADER.unpack_from(raw)
    if version != STORE_VERSION:
        raise StoreFormatError(f"{path}: unsupported store version {version}")
    if code not in _DTYPE_CODES:
        raise StoreFormatError(f"{path}: unknown dtype code {code}")
    return n, k, _DTYPE_CODES[code], fp.hex()


def read_store(path, expected_fingerprint: Optional[str] = None) -> GradientStore:
    raw = Path(path).read_bytes()
    n, k, dtype, fp = _parse_header(raw, path)
    body = len(raw) - _STORE_HEADER.size
    want = n * k * dtype.itemsize
    if body < want:
        raise StoreFormatError(f"{path}: truncated, header says {n} records but only {body // max(1, k * dtype.itemsize)} present")
    if body > want:
        raise StoreFormatError(f"{path}: {body - want} trailing bytes after {n} records")
    if expected_fingerprint is not None and fp != expected_fingerprint:
        raise FingerprintMismatch(f"{path}: store fingerprint {fp[:12]} does not match compressor {expected_fingerprint[:12]}")
    records = np.frombuffer(raw, dtype, n * k, _STORE_HEADER.size).reshape(n, k)
    return GradientStore(records.astype(np.float32), fp)


# ---------------------------------------------------------------------------
# scoring


def _check(*stores: GradientStore) -> None:
    first = stores[0]
    for other in stores[1:]:
        if other.fingerprint != first.fingerprint:
            raise FingerprintMismatch(
                f"fingerprint {other.fingerprint[:12]} does not match {first.fingerprint[:12]}"
            )
        if other.k != first.k:
            raise ValueError(f"gradient dims differ: {other.k} vs {first.k}")


def precondition_store(store: GradientStore, state: FimState) -> GradientStore:
    """Second pass over the cache: ``g~_i = (F + lam I)^{-1} g_i`` for every record."""
    if state.dim != store.k:
        raise ValueError(f"FIM dim {state.dim} does not match store dim {store.k}")
    if store.n == 0:
        return GradientStore(np.zeros((0, store.k)), store.fingerprint)
    return GradientStore(state.solve(store.records), store.fingerprint)


def influence_scores(store: GradientStore, preconditioned: GradientStore, test: GradientStore) -> np.ndarray:
    """``<g_test, g~_i>`` as an ``(m, n)`` matrix, train samples in store order."""
    _check(store, preconditioned, test)
    if preconditioned.n != store.n:
        raise ValueError("preconditioned store does not cover the cache")
    return np.asarray(test.records, np.float64) @ np.asarray(preconditioned.records, np.float64).T


def graddot_scores(store: GradientStore, test: GradientStore) -> np.ndarray:
    _check(store, test)
    return np.asarray(test.records, np.float64) @ np.asarray(store.records, np.float64).T


class AttributionKind(str, enum.Enum):
    WHOLE_MODEL = "whole"
    LAYERWISE = "layerwise"


@dataclass(frozen=True)
class AttributionMode:
    kind: AttributionKind
    blocks: tuple  # (k,) for whole-model, (k_1, ..., k_L) layer-wise

    @classmethod
    def whole(cls, k: int) -> "AttributionMode":
        return cls(AttributionKind.WHOLE_MODEL, (int(k),))

    @classmethod
    def layerwise(cls, blocks: Sequence[int]) -> "AttributionMode":
        return cls(AttributionKind.LAYERWISE, tuple(int(b) for b in blocks))

    @property
    def k(self) -> int:
        return sum(self.blocks)

    def offsets(self) -> list[tuple[int, int]]:
        ends = np.cumsum((0,) + self.blocks)
        return [(int(a), int(b)) for a, b in zip(ends[:-1], ends[1:])]


def fit_fims(mode: AttributionMode, store: GradientStore, damping: float) -> list[FimState]:
    """One FIM per block of ``mode`` (a single one for whole-model)."""
    if store.k != mode.k:
        raise ValueError(f"store dim {store.k} does not match mode dim {mode.k}")
    return [fim_from(store.records[:, a:b], damping) if store.n else FimState(b - a, damping) for a, b in mode.offsets()]


def layerwise_attribute(
    mode: AttributionMode,
    stores: Sequence[GradientStore],
    states: Sequence[FimState],
    tests: Sequence[GradientStore],
) -> np.ndarray:
    """``sum_l <g_test,l, (F_l + lam I)^{-1} g_i,l>`` over aligned per-layer blocks."""
    if not (len(stores) == len(states) == len(tests) == len(mode.blocks)):
        raise ValueError("per-layer stores, FIMs and test blocks do not align with the mode")
    total = None
    for k_l, store, state, test in zip(mode.blocks, stores, states, tests):
        if store.k != k_l or state.dim != k_l or test.k != k_l:
            raise ValueError(f"layer block has dim {store.k}/{state.dim}/{test.k}, mode says {k_l}")
        s = influence_scores(store, precondition_store(store, state), test)
        total = s if total is None else total + s
    return total


def attribute(mode: AttributionMode, store: GradientStore, test: GradientStore, damping: float, states=None) -> np.ndarray:
    """Whole-model or block-diagonal influence from concatenated stores."""
    states = states if states is not None else fit_fims(mode, store, damping)
    if mode.kind is AttributionKind.WHOLE_MODEL:
        return influence_scores(store, precondition_store(store, states[0]), test)
    spans = mode.offsets()
    return layerwise_attribute(
        mode,
        [store.block(a, b) for a, b in spans],
        states,
        [test.block(a, b) for a, b in spans],
    )


def top_k_influential(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, descending; ``k`` is clamped to ``n``."""
    scores = np.asarray(scores)
    k = max(0, min(int(k), scores.shape[-1]))
    order = np.argsort(-scores, kind="stable")
    return order[:k]


# ---------------------------------------------------------------------------
# score files


def write_scores_csv(path, scores: np.ndarray, test_ids: Optional[Sequence[int]] = None) -> Path:
    """Long-form ``test_index,train_index,score`` rows."""
    scores = np.atleast_2d(scores)
    test_ids = range(scores.shape[0]) if test_ids is None else test_ids
    path = Path(path)
    with path.open("w") as fh:
        fh.write("test_index,train_index,score\n")
        for t, row in zip(test_ids, scores):
            for i, v in enumerate(row):
                fh.write(f"{t},{i},{v:.9g}\n")
    return path


def write_scores_bin(path, scores: np.ndarray) -> Path:
    scores = np.atleast_2d(scores)
    m, n = scores.shape
    Path(path).write_bytes(_SCORES_HEADER.pack(SCORES_MAGIC, 1, m, n) + scores.astype("<f4").tobytes())
    return Path(path)


def read_scores_bin(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _SCORES_HEADER.size or raw[:4] != SCORES_MAGIC:
        raise StoreFormatError(f"{path}: not a score file")
    _, _, m, n = _SCORES_HEADER.unpack_from(raw)
    if len(raw) != _SCORES_HEADER.size + 4 * m * n:
        raise StoreFormatError(f"{path}: score file size does not match {m}x{n}")
    return np.frombuffer(raw, "<f4", m * n, _SCORES_HEADER.size).reshape(m, n)
