"""Coordinate-selection sparsifiers: Random Mask and Selective Mask.

Selective Mask learns soft scores ``S`` so that GradDot scores computed on
soft-masked gradients stay correlated (Pearson) with the unmasked scores,
with an l1 penalty on ``sigmoid(S / T)``. The hard mask is the top-k' of the
final scores. The factorized variant learns one score vector per side of a
linear layer and never forms the ``d_in * d_out`` gradient.
"""

from __future__ import annotations

import csv
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from . import _ops
from .sketch import GradientLike, as_gradient

log = logging.getLogger(__name__)

MASK_MAGIC = b"GMSK"
MASK_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


@dataclass(frozen=True, eq=False)
class MaskSpec:
    input_dim: int
    indices: np.ndarray
    provenance: str = "unspecified"

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ValueError("mask indices must be 1-d")
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= self.input_dim):
            raise ValueError(f"mask indices must be strictly increasing in [0, {self.input_dim})")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def size(self) -> int:
        return int(self.indices.size)

    def __eq__(self, other):
        return (
            isinstance(other, MaskSpec)
            and self.input_dim == other.input_dim
            and np.array_equal(self.indices, other.indices)
        )

    def __hash__(self):
        return hash((self.input_dim, self.indices.tobytes()))


def random_mask(p: int, k: int, seed: int) -> MaskSpec:
    """Uniform ``k``-subset of ``range(p)``, sorted; a pure function of ``seed``."""
    if not 0 < k <= p:
        raise ValueError(f"mask size k'={k} must lie in [1, p={p}]")
    rng = np.random.Generator(np.random.Philox(key=seed))
    idx = np.sort(rng.choice(p, size=k, replace=False))
    return MaskSpec(p, idx, provenance=f"random(seed={seed})")


def apply_mask(mask: MaskSpec, g: GradientLike) -> np.ndarray:
    """Extract ``g[indices]``; sparse inputs are looked up without densifying."""
    g = as_gradient(g)
    if g.dim != mask.input_dim:
        raise ValueError(f"gradient has dim {g.dim}, mask expects {mask.input_dim}")
    _ops.record("mask", mask.size)
    if not g.is_sparse:
        return np.asarray(g.values[mask.indices], dtype=np.float64)
    out = np.zeros(mask.size)
    pos = np.searchsorted(g.indices, mask.indices)
    pos_c = np.minimum(pos, max(g.nnz - 1, 0))
    hit = (pos < g.nnz) & (g.indices[pos_c] == mask.indices) if g.nnz else np.zeros(mask.size, bool)
    out[hit] = g.values[pos_c[hit]]
    return out


def apply_mask_batch(mask: MaskSpec, G: np.ndarray) -> np.ndarray:
    G = np.atleast_2d(G)
    if G.shape[1] != mask.input_dim:
        raise ValueError(f"gradients have dim {G.shape[1]}, mask expects {mask.input_dim}")
    _ops.record("mask", G.shape[0] * mask.size)
    return G[:, mask.indices].astype(np.float64)


def mask_matrix(mask: MaskSpec) -> sp.csr_matrix:
    """The ``k' x p`` binary selection matrix."""
    k = mask.size
    return sp.csr_matrix((np.ones(k), (np.arange(k), mask.indices)), shape=(k, mask.input_dim))


def scatter(mask: MaskSpec, v: np.ndarray) -> np.ndarray:
    """Embed a length-k' vector back into ``R^p`` (zeros off the mask)."""
    out = np.zeros(mask.input_dim, dtype=np.asarray(v).dtype)
    out[mask.indices] = v
    return out


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Sorted indices of the ``k`` largest scores; ties go to the lower index."""
    if not 0 < k <= scores.size:
        raise ValueError(f"cannot select {k} of {scores.size} coordinates")
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k])


# ---------------------------------------------------------------------------
# Selective Mask objective


def geometric_schedule(steps: int, t_start: float = 1.0, t_end: float = 0.1) -> np.ndarray:
    """Temperatures for steps ``0..steps`` annealed geometrically; ``T[steps] = t_end``."""
    if t_start <= 0 or t_end <= 0:
        raise ValueError("temperatures must be positive")
    if steps == 0:
        return np.array([t_end])
    return t_start * (t_end / t_start) ** (np.arange(steps + 1) / steps)


def _pearson_and_grad(A: np.ndarray, B: np.ndarray):
    """Column-wise Pearson correlation of ``A`` and ``B`` and ``d r / d B``.

    Columns where either side has no variance are reported in ``valid``.
    """
    n = A.shape[0]
    Ac = A - A.mean(axis=0)
    Bc = B - B.mean(axis=0)
    na = np.linalg.norm(Ac, axis=0)
    nb = np.linalg.norm(Bc, axis=0)
    tol_a = 1e-12 * (np.abs(A).max(axis=0) + 1e-300) * np.sqrt(n)
    tol_b = 1e-12 * (np.abs(B).max(axis=0) + 1e-300) * np.sqrt(n)
    valid = (na > tol_a) & (nb > tol_b)
    r = np.zeros(A.shape[1])
    dB = np.zeros_like(B)
    if valid.any():
        na_v, nb_v = na[valid], nb[valid]
        r[valid] = (Ac[:, valid] * Bc[:, valid]).sum(axis=0) / (na_v * nb_v)
        dB[:, valid] = Ac[:, valid] / (na_v * nb_v) - r[valid] * Bc[:, valid] / nb_v**2
    return r, dB, valid


def _reduce_valid(r: np.ndarray, valid: np.ndarray) -> float:
    if not valid.any():
        raise ValueError("every test point has zero score variance; correlation undefined")
    if not valid.all():
        warnings.warn(
            f"{int((~valid).sum())} test point(s) with zero score variance excluded",
            RuntimeWarning,
            stacklevel=3,
        )
    return float(r[valid].mean())


@dataclass
class SelectiveMaskProblem:
    """Inputs and optimizer settings for learning a Selective Mask."""

    train_grads: np.ndarray
    test_grads: np.ndarray
    target_k: int
    l1: float = 0.0
    steps: int = 500
    step_size: float = 10.0
    t_start: float = 1.0
    t_end: float = 0.1
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.train_grads = np.atleast_2d(np.asarray(self.train_grads, dtype=np.float64))
        self.test_grads = np.atleast_2d(np.asarray(self.test_grads, dtype=np.float64))
        if self.train_grads.shape[0] < 2:
            raise ValueError("need at least two training gradients for a correlation")
        if self.train_grads.shape[1] != self.test_grads.shape[1]:
            raise ValueError("train and test gradients differ in dimension")
        if self.l1 < 0:
            raise ValueError("l1 weight must be non-negative")
        if not 0 < self.target_k <= self.dim:
            raise ValueError(f"target k'={self.target_k} must lie in [1, {self.dim}]")

    @property
    def dim(self) -> int:
        return self.train_grads.shape[1]

    def initial_scores(self) -> np.ndarray:
        if self.init_scale == 0:
            return np.zeros(self.dim)
        rng = np.random.Generator(np.random.Philox(key=self.seed))
        return self.init_scale * rng.standard_normal(self.dim)


def selective_objective_and_grad(problem: SelectiveMaskProblem, S: np.ndarray, T: float = 1.0):
    """Objective value, its gradient in ``S``, and the correlation / l1 parts."""
    G, Gt = problem.train_grads, problem.test_grads
    w = expit(np.asarray(S, dtype=np.float64) / T)
    u = w * w
    A = G @ Gt.T
    B = G @ (Gt * u).T
    r, dB, valid = _pearson_and_grad(A, B)
    corr = _reduce_valid(r, valid)
    l1 = problem.l1 * w.sum()
    m = int(valid.sum())
    d_u = ((G.T @ dB) * Gt.T).sum(axis=1) / m
    dw_dS = w * (1 - w) / T
    grad = d_u * 2 * w * dw_dS - problem.l1 * dw_dS
    return corr - l1, grad, corr, l1


def selective_objective(problem: SelectiveMaskProblem, S: np.ndarray, T: float = 1.0) -> float:
    """Mean Pearson correlation between full and soft-masked GradDot scores, minus l1.

    The masked score of train ``i`` against test ``t`` is
    ``sum_j sigmoid(S_j / T)**2 * g_i[j] * g_t[j]``; masked gradients are never formed.
    """
    return selective_objective_and_grad(problem, S, T)[0]


@dataclass
class SelectiveResult:
    scores: np.ndarray
    objective: float
    trace: list = field(default_factory=list)  # (step, objective, l1 term)
    undecided_fraction: float = 0.0


def _ascend(objective_fn, S, steps, step_size, temps):
    trace = []
    for step in range(steps):
        obj, grad, _, l1 = objective_fn(S, temps[step])
        if not np.isfinite(obj) or not all(np.all(np.isfinite(g)) for g in grad):
            raise FloatingPointError(f"selective mask objective diverged at step {step}")
        trace.append((step, obj, l1))
        with np.errstate(invalid="ignore", over="ignore"):
            S = tuple(s + step_size * g for s, g in zip(S, grad))
        if not all(np.all(np.isfinite(s)) for s in S):
            raise FloatingPointError(f"selective mask scores became non-finite at step {step}")
    obj, _, _, l1 = objective_fn(S, temps[steps])
    if not np.isfinite(obj):
        raise FloatingPointError(f"selective mask objective diverged at step {steps}")
    trace.append((steps, obj, l1))
    return S, obj, trace


def _undecided(S: np.ndarray, T: float) -> float:
    w = expit(S / T)
    return float(np.mean((w > 0.25) & (w < 0.75)))


def selective_train(problem: SelectiveMaskProblem) -> tuple[SelectiveResult, MaskSpec]:
    """Gradient ascent on the Selective Mask objective, then top-k' extraction."""
    temps = geometric_schedule(problem.steps, problem.t_start, problem.t_end)

    def fn(S, T):
        obj, grad, corr, l1 = selective_objective_and_grad(problem, S[0], T)
        return obj, (grad,), corr, l1

    (S,), obj, trace = _ascend(fn, (problem.initial_scores(),), problem.steps, problem.step_size, temps)
    result = SelectiveResult(S, obj, trace, _undecided(S, temps[-1]))
    mask = MaskSpec(problem.dim, top_k(S, problem.target_k), provenance="selective")
    log.info(
        "selective mask: objective %.4f, undecided fraction %.3f",
        obj,
        result.undecided_fraction,
    )
    return result, mask


# ---------------------------------------------------------------------------
# factorized Selective Mask for linear layers


def _stack_traces(traces, attr: str) -> np.ndarray:
    mats = [np.asarray(getattr(tr, attr), dtype=np.float64) for tr in traces]
    if len({m.shape for m in mats}) != 1:
        raise ValueError(f"all traces must share the shape of {attr}")
    return np.stack([m.T for m in mats])  # (n, T, d)


@dataclass
class FactorizedMaskProblem:
    """Per-sample layer factors, shaped ``(n, T, d)``, for a factorized mask."""

    train_in: np.ndarray
    train_out: np.ndarray
    test_in: np.ndarray
    test_out: np.ndarray
    target_k_in: int
    target_k_out: int
    l1: float = 0.0
    steps: int = 500
    step_size: float = 10.0
    t_start: float = 1.0
    t_end: float = 0.1
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("train_in", "train_out", "test_in", "test_out"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim == 2:
                arr = arr[:, None, :]
            setattr(self, name, arr)
        if self.train_in.shape[0] < 2:
            raise ValueError("need at least two training samples for a correlation")
        if self.train_in.shape[2] != self.test_in.shape[2] or self.train_out.shape[2] != self.test_out.shape[2]:
            raise ValueError("train and test factors differ in dimension")
        if not 0 < self.target_k_in <= self.d_in or not 0 < self.target_k_out <= self.d_out:
            raise ValueError("factor mask sizes must not exceed the factor dimensions")

    @classmethod
    def from_traces(cls, train: Sequence, test: Sequence, **kwargs) -> "FactorizedMaskProblem":
        return cls(
            _stack_traces(train, "z_in"),
            _stack_traces(train, "dz_out"),
            _stack_traces(test, "z_in"),
            _stack_traces(test, "dz_out"),
            **kwargs,
        )

    @property
    def d_in(self) -> int:
        return self.train_in.shape[2]

    @property
    def d_out(self) -> int:
        return self.train_out.shape[2]

    def initial_scores(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.Generator(np.random.Philox(key=self.seed))
        return (
            self.init_scale * rng.standard_normal(self.d_in),
            self.init_scale * rng.standard_normal(self.d_out),
        )


def _kron_gram(X: np.ndarray, Y: np.ndarray, u: Optional[np.ndarray]) -> np.ndarray:
    # <u * x_{i,t}, y_{m,t'}> for all (i, m, t, t')
    if u is None:
        return np.einsum("itj,muj->imtu", X, Y, optimize=True)
    return np.einsum("itj,muj,j->imtu", X, Y, u, optimize=True)


def factorized_objective_and_grad(
    problem: FactorizedMaskProblem, S_in: np.ndarray, S_out: np.ndarray, T: float = 1.0
):
    """Factorized Selective Mask objective and gradients in ``(S_in, S_out)``.

    Scores use ``<a (x) b, c (x) d> = <a, c> <b, d>`` so each train/test pair
    costs ``O(d_in + d_out)`` per token pair.
    """
    p = problem
    w_in, w_out = expit(S_in / T), expit(S_out / T)
    u_in, u_out = w_in * w_in, w_out * w_out
    A = (_kron_gram(p.train_in, p.test_in, None) * _kron_gram(p.train_out, p.test_out, None)).sum(axis=(2, 3))
    K_in = _kron_gram(p.train_in, p.test_in, u_in)
    K_out = _kron_gram(p.train_out, p.test_out, u_out)
    B = (K_in * K_out).sum(axis=(2, 3))
    r, dB, valid = _pearson_and_grad(A, B)
    corr = _reduce_valid(r, valid)
    m = int(valid.sum())
    W_in = dB[:, :, None, None] * K_out
    W_out = dB[:, :, None, None] * K_in
    d_u_in = np.einsum("imtu,itj,muj->j", W_in, p.train_in, p.test_in, optimize=True) / m
    d_u_out = np.einsum("imtu,itj,muj->j", W_out, p.train_out, p.test_out, optimize=True) / m
    l1 = p.l1 * (w_in.sum() + w_out.sum())
    ds_in = w_in * (1 - w_in) / T
    ds_out = w_out * (1 - w_out) / T
    g_in = d_u_in * 2 * w_in * ds_in - p.l1 * ds_in
    g_out = d_u_out * 2 * w_out * ds_out - p.l1 * ds_out
    return corr - l1, (g_in, g_out), corr, l1


def factorized_objective(problem: FactorizedMaskProblem, S_in, S_out, T: float = 1.0) -> float:
    return factorized_objective_and_grad(problem, S_in, S_out, T)[0]


def selective_train_factorized(
    problem: FactorizedMaskProblem,
) -> tuple[SelectiveResult, MaskSpec, MaskSpec]:
    temps = geometric_schedule(problem.steps, problem.t_start, problem.t_end)

    def fn(S, T):
        return factorized_objective_and_grad(problem, S[0], S[1], T)

    (S_in, S_out), obj, trace = _ascend(fn, problem.initial_scores(), problem.steps, problem.step_size, temps)
    both = np.concatenate([S_in, S_out])
    result = SelectiveResult(both, obj, trace, _undecided(both, temps[-1]))
    m_in = MaskSpec(problem.d_in, top_k(S_in, problem.target_k_in), provenance="selective-factorized-in")
    m_out = MaskSpec(problem.d_out, top_k(S_out, problem.target_k_out), provenance="selective-factorized-out")
    return result, m_in, m_out


# ---------------------------------------------------------------------------
# mask files


class MaskFormatError(ValueError):
    pass


def write_mask(path, mask: MaskSpec, trace: Optional[Sequence] = None) -> Path:
    """Write the binary mask and a CSV sidecar holding provenance and the objective trace."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MASK_MAGIC, MASK_VERSION, mask.input_dim, mask.size))
        fh.write(mask.indices.astype("<u8").tobytes())
    sidecar = path.with_name(path.name + ".csv")
    with open(sidecar, "w", newline="") as fh:
        fh.write(f"# provenance: {mask.provenance}\n")
        fh.write(f"# input_dim: {mask.input_dim}\n# kept: {mask.size}\n")
        writer = csv.writer(fh)
        writer.writerow(["step", "objective", "l1_term"])
        for step, obj, l1 in trace or ():
            writer.writerow([step, repr(float(obj)), repr(float(l1))])
    return path


def read_mask(path) -> MaskSpec:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise MaskFormatError(f"{path}: truncated mask header")
    magic, version, p, k = _HEADER.unpack_from(raw)
    if magic != MASK_MAGIC:
        raise MaskFormatError(f"{path}: not a mask file")
    if version != MASK_VERSION:
        raise MaskFormatError(f"{path}: unsupported mask version {version}")
    body = raw[_HEADER.size :]
    if len(body) != 8 * k:
        raise MaskFormatError(f"{path}: expected {k} indices, found {len(body) // 8}")
    idx = np.frombuffer(body, dtype="<u8").astype(np.int64)
    provenance = "file"
    sidecar = Path(str(path) + ".csv")
    if sidecar.exists():
        first = sidecar.read_text().splitlines()[:1]
        if first and first[0].startswith("# provenance: "):
            provenance = first[0][len("# provenance: ") :]
    return MaskSpec(int(p), idx, provenance=provenance)
