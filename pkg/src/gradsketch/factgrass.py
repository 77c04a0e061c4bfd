"""Factorized compression of linear-layer gradients.

A linear layer's per-sample gradient is ``sum_t z_in[:, t] (x) dz_out[:, t]``
(column-major vec of ``dz_out z_in^T``). The compressors here act on the two
factors and never build the ``d_in * d_out`` gradient:

* ``logra``     -- dense Gaussian projection of each factor, Kronecker of the results
* ``factsjlt``  -- same, with SJLT factor projections
* ``factmask``  -- keep ``k_in`` x ``k_out`` coordinates of the factors
* ``factgrass`` -- mask factors to ``k_in'`` x ``k_out'``, rebuild the
  ``k_l' = k_in' * k_out'`` sparsified gradient, then one SJLT down to ``k_l``

Spec strings look like ``factgrass:layer=*,k=256,kin'=2*kin,kout'=2*kout,seed=9``;
several entries are joined with ``;``.
"""

from __future__ import annotations

import enum
import hashlib
import math
import re
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import _ops
from .mask import MaskSpec, random_mask
from .model import BatchTraces, LinearLayerTrace, MlpModel, vec_kron
from .sketch import SketchKind, SketchSpec, column_hashes, dense_materialize, sjlt_materialize

MATERIALIZE_LIMIT = 10**7
SJLT_CHUNK = 512
_LAYER_SEED_STRIDE = 1_000_003


class FactMode(str, enum.Enum):
    LOGRA = "logra"
    FACTSJLT = "factsjlt"
    FACTMASK = "factmask"
    FACTGRASS = "factgrass"


def materialize_layer_grad(trace: LinearLayerTrace) -> np.ndarray:
    """Explicit ``vec(dW)`` of one layer; test oracle and non-factorized baseline."""
    p_l = trace.d_in * trace.d_out
    if p_l > MATERIALIZE_LIMIT:
        raise MemoryError(f"refusing to materialize a {p_l}-parameter layer gradient")
    return vec_kron(trace.z_in, trace.dz_out)


def kron_mask(mask_in: MaskSpec, mask_out: MaskSpec) -> MaskSpec:
    """Flat mask over ``vec(dW)`` equal to masking the factors with ``(mask_in, mask_out)``."""
    idx = (mask_in.indices[:, None] * mask_out.input_dim + mask_out.indices[None, :]).ravel()
    return MaskSpec(mask_in.input_dim * mask_out.input_dim, idx, provenance="kron")


# ---------------------------------------------------------------------------
# spec


@dataclass(frozen=True)
class LayerEntry:
    mode: FactMode
    layer: str = "*"  # layer index or "*"
    k: Optional[int] = None  # k_l
    k_in: Optional[int] = None
    k_out: Optional[int] = None
    kp_in: Optional[str] = None  # int literal or "c*kin"
    kp_out: Optional[str] = None
    s: int = 1
    seed: int = 0
    normalize: bool = False

    def to_string(self) -> str:
        parts = [f"layer={self.layer}"]
        for key, value in (("k", self.k), ("kin", self.k_in), ("kout", self.k_out)):
            if value is not None:
                parts.append(f"{key}={value}")
        if self.kp_in is not None:
            parts.append(f"kin'={self.kp_in}")
        if self.kp_out is not None:
            parts.append(f"kout'={self.kp_out}")
        if self.mode in (FactMode.FACTGRASS, FactMode.FACTSJLT):
            parts.append(f"s={self.s}")
        parts.append(f"seed={self.seed}")
        if self.normalize:
            parts.append("normalize=1")
        return f"{self.mode.value}:" + ",".join(parts)


@dataclass(frozen=True)
class FactorizedCompressorSpec:
    entries: tuple

    def to_string(self) -> str:
        return ";".join(e.to_string() for e in self.entries)

    def entry_for(self, layer: int) -> LayerEntry:
        for e in self.entries:
            if e.layer == str(layer):
                return e
        for e in self.entries:
            if e.layer == "*":
                return e
        raise KeyError(f"no compressor entry covers layer {layer}")

    def fingerprint(self, extra: str = "") -> str:
        return hashlib.sha256(f"{self.to_string()}|{extra}".encode()).hexdigest()


_KEYMAP = {"layer": "layer", "k": "k", "kin": "k_in", "kout": "k_out", "kin'": "kp_in", "kout'": "kp_out", "s": "s", "seed": "seed", "normalize": "normalize"}
_FACTOR_EXPR = re.compile(r"^(\d+)(\*(kin|kout))?$")


def parse_factorized(text: str) -> FactorizedCompressorSpec:
    from .grass import SpecParseError

    entries = []
    pos = 0
    for chunk in text.split(";"):
        name, _, args = chunk.strip().partition(":")
        try:
            mode = FactMode(name.strip().lower())
        except ValueError:
            raise SpecParseError(f"unknown factorized mode {name!r}", pos) from None
        fields: dict = {}
        for item in filter(None, args.split(",")):
            key, eq, raw = item.partition("=")
            key, raw = key.strip(), raw.strip()
            if not eq or key not in _KEYMAP:
                raise SpecParseError(f"bad factorized option {item!r}", pos)
            attr = _KEYMAP[key]
            if attr in ("kp_in", "kp_out"):
                if not _FACTOR_EXPR.match(raw):
                    raise SpecParseError(f"{key} must be an integer or N*kin/N*kout, got {raw!r}", pos)
                fields[attr] = raw
            elif attr == "layer":
                fields[attr] = raw
            elif attr == "normalize":
                fields[attr] = raw.lower() in ("1", "true", "yes")
            else:
                try:
                    fields[attr] = int(raw)
                except ValueError:
                    raise SpecParseError(f"{key} must be an integer, got {raw!r}", pos) from None
        entries.append(LayerEntry(mode, **fields))
        pos += len(chunk) + 1
    return FactorizedCompressorSpec(tuple(entries))


def _resolve_factor(expr: Optional[str], k_in: int, k_out: int, default: int) -> int:
    if expr is None:
        return default
    m = _FACTOR_EXPR.match(expr)
    n = int(m.group(1))
    if m.group(3) == "kin":
        return n * k_in
    if m.group(3) == "kout":
        return n * k_out
    return n


# ---------------------------------------------------------------------------
# bound per-layer compressors


@dataclass
class LayerCompressor:
    """One layer's factorized compressor, bound to ``(d_in, d_out)``."""

    mode: FactMode
    d_in: int
    d_out: int
    k_l: int
    proj_in: Optional[SketchSpec] = None
    proj_out: Optional[SketchSpec] = None
    mask_in: Optional[MaskSpec] = None
    mask_out: Optional[MaskSpec] = None
    final: Optional[SketchSpec] = None
    _P_in: Optional[np.ndarray] = field(default=None, repr=False)
    _P_out: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def p_l(self) -> int:
        return self.d_in * self.d_out

    @property
    def k_prime(self) -> int:
        if self.mask_in is None:
            return self.k_l
        return self.mask_in.size * self.mask_out.size

    def _factor_matrices(self):
        if self._P_in is None:
            if self.proj_in.kind is SketchKind.SJLT:
                self._P_in = sjlt_materialize(self.proj_in).toarray()
                self._P_out = sjlt_materialize(self.proj_out).toarray()
            else:
                self._P_in = dense_materialize(self.proj_in)
                self._P_out = dense_materialize(self.proj_out)
        return self._P_in, self._P_out

    def _check(self, trace: LinearLayerTrace) -> None:
        if trace.d_in != self.d_in or trace.d_out != self.d_out:
            raise ValueError(
                f"trace is {trace.d_out}x{trace.d_in}, compressor expects {self.d_out}x{self.d_in}"
            )

    def compress(self, trace: LinearLayerTrace) -> np.ndarray:
        self._check(trace)
        if self.mode in (FactMode.LOGRA, FactMode.FACTSJLT):
            return self._project_factors(trace)
        return self._sparsify_factors(trace)

    def _project_factors(self, trace: LinearLayerTrace) -> np.ndarray:
        P_in, P_out = self._factor_matrices()
        T = trace.T
        a = P_in @ trace.z_in.astype(np.float64)
        b = P_out @ trace.dz_out.astype(np.float64)
        _ops.record("project", T * (P_in.shape[0] * self.d_in + P_out.shape[0] * self.d_out))
        _ops.record("reconstruct", T * self.k_l)
        return (a @ b.T).ravel()

    def _sparsify_factors(self, trace: LinearLayerTrace) -> np.ndarray:
        T = trace.T
        a = trace.z_in[self.mask_in.indices].astype(np.float64)
        b = trace.dz_out[self.mask_out.indices].astype(np.float64)
        _ops.record("mask", T * (self.mask_in.size + self.mask_out.size))
        buf = np.empty((self.mask_in.size, self.mask_out.size))
        np.matmul(a, b.T, out=buf)
        _ops.record("reconstruct", T * buf.size)
        if self.final is None:
            return buf.ravel()
        flat = buf.ravel()
        out = np.zeros(self.k_l)
        # chunked so hashing temporaries stay small next to the k_l' buffer
        for start in range(0, flat.size, SJLT_CHUNK):
            stop = min(flat.size, start + SJLT_CHUNK)
            rows, signs = column_hashes(self.final, np.arange(start, stop))
            np.add.at(out, rows, signs * flat[start:stop, None])
        _ops.record("sjlt", self.final.sparsity * flat.size)
        if self.final.normalize:
            out *= 1.0 / math.sqrt(self.final.sparsity)
        return out

    def compress_batch(self, z_in: np.ndarray, dz_out: np.ndarray) -> np.ndarray:
        """Batched :meth:`compress` for factors shaped ``(n, T, d)``."""
        n, T = z_in.shape[:2]
        if self.mode in (FactMode.LOGRA, FactMode.FACTSJLT):
            P_in, P_out = self._factor_matrices()
            a = z_in.astype(np.float64) @ P_in.T
            b = dz_out.astype(np.float64) @ P_out.T
            _ops.record("project", n * T * (P_in.shape[0] * self.d_in + P_out.shape[0] * self.d_out))
            _ops.record("reconstruct", n * T * self.k_l)
            return np.einsum("nti,nto->nio", a, b).reshape(n, -1)
        a = z_in[:, :, self.mask_in.indices].astype(np.float64)
        b = dz_out[:, :, self.mask_out.indices].astype(np.float64)
        _ops.record("mask", n * T * (self.mask_in.size + self.mask_out.size))
        buf = np.einsum("nti,nto->nio", a, b).reshape(n, -1)
        _ops.record("reconstruct", n * T * buf.shape[1])
        if self.final is None:
            return buf
        rows, signs = column_hashes(self.final, np.arange(buf.shape[1]))
        out = np.zeros((n, self.k_l))
        for slot in range(self.final.sparsity):
            S = np.zeros((buf.shape[1], self.k_l))
            S[np.arange(buf.shape[1]), rows[:, slot]] = signs[:, slot]
            out += buf @ S
        _ops.record("sjlt", n * self.final.sparsity * buf.shape[1])
        if self.final.normalize:
            out *= 1.0 / math.sqrt(self.final.sparsity)
        return out


def bind_layer(entry: LayerEntry, d_in: int, d_out: int, layer: int = 0, mask_in=None, mask_out=None) -> LayerCompressor:
    """Realize ``entry`` for a ``d_out x d_in`` layer.

    Seeds for a ``layer=*`` entry are offset per layer so factor masks and
    projections are independent across layers; explicit entries use their
    seed as given. Side seeds are ``seed`` (in), ``seed + 1`` (out) and
    ``seed + 2`` (final SJLT).
    """
    seed = entry.seed + (layer * _LAYER_SEED_STRIDE if entry.layer == "*" else 0)
    mode = entry.mode
    k_in, k_out, k = entry.k_in, entry.k_out, entry.k
    if k_in is None or k_out is None:
        if k is None:
            raise ValueError(f"{mode.value}: need k or both kin and kout")
        root = math.isqrt(k)
        if root * root != k:
            raise ValueError(f"{mode.value}: k={k} is not a square; give kin and kout")
        k_in, k_out = root, root
    if k is None:
        k = k_in * k_out
    if mode in (FactMode.LOGRA, FactMode.FACTSJLT, FactMode.FACTMASK) and k != k_in * k_out:
        raise ValueError(f"{mode.value}: k ({k}) must equal kin*kout ({k_in * k_out})")
    if k_in > d_in or k_out > d_out:
        raise ValueError(f"{mode.value}: factor dims {k_in}x{k_out} exceed layer dims {d_in}x{d_out}")

    if mode in (FactMode.LOGRA, FactMode.FACTSJLT):
        kind = SketchKind.GAUSSIAN if mode is FactMode.LOGRA else SketchKind.SJLT
        s = 1 if kind is SketchKind.GAUSSIAN else min(entry.s, k_in, k_out)
        return LayerCompressor(
            mode, d_in, d_out, k,
            proj_in=SketchSpec(kind, d_in, k_in, s, seed, entry.normalize),
            proj_out=SketchSpec(kind, d_out, k_out, s, seed + 1, entry.normalize),
        )

    if mode is FactMode.FACTMASK:
        kp_in = _resolve_factor(entry.kp_in, k_in, k_out, k_in)
        kp_out = _resolve_factor(entry.kp_out, k_in, k_out, k_out)
        if kp_in * kp_out != k:
            raise ValueError("factmask: kin' * kout' must equal k")
    else:
        kp_in = _resolve_factor(entry.kp_in, k_in, k_out, 2 * k_in)
        kp_out = _resolve_factor(entry.kp_out, k_in, k_out, 2 * k_out)
        if k > kp_in * kp_out:
            raise ValueError(f"factgrass: k_l ({k}) exceeds k_l' ({kp_in * kp_out})")
    if kp_in > d_in or kp_out > d_out:
        raise ValueError(f"{mode.value}: masked dims {kp_in}x{kp_out} exceed layer dims {d_in}x{d_out}")
    m_in = mask_in if mask_in is not None else random_mask(d_in, kp_in, seed)
    m_out = mask_out if mask_out is not None else random_mask(d_out, kp_out, seed + 1)
    if m_in.input_dim != d_in or m_out.input_dim != d_out:
        raise ValueError("factor masks do not match the layer dims")
    final = None
    if mode is FactMode.FACTGRASS:
        kp = m_in.size * m_out.size
        final = SketchSpec(SketchKind.SJLT, kp, k, min(entry.s, k), seed + 2, entry.normalize)
    return LayerCompressor(mode, d_in, d_out, k, mask_in=m_in, mask_out=m_out, final=final)


def bind_model(spec: FactorizedCompressorSpec, layer_dims: Sequence[tuple], masks: Optional[dict] = None) -> list[LayerCompressor]:
    """Bind ``spec`` to every layer; ``layer_dims`` holds ``(d_in_aug, d_out)`` pairs."""
    masks = masks or {}
    out = []
    for l, (d_in, d_out) in enumerate(layer_dims):
        m_in, m_out = masks.get(l, (None, None))
        out.append(bind_layer(spec.entry_for(l), d_in, d_out, l, m_in, m_out))
    return out


def model_layer_dims(model: MlpModel) -> list[tuple]:
    return [(layer.d_in_aug, layer.d_out) for layer in model.layers]


# ---------------------------------------------------------------------------
# spec-level operations


def logra_compress(comp: LayerCompressor, trace: LinearLayerTrace) -> np.ndarray:
    """``(P_in (x) P_out) vec(dW)`` computed as ``sum_t (P_in z_t) (x) (P_out dz_t)``."""
    if comp.mode not in (FactMode.LOGRA, FactMode.FACTSJLT):
        raise ValueError(f"expected a factor-projection compressor, got {comp.mode.value}")
    return comp.compress(trace)


def factgrass_compress(comp: LayerCompressor, trace: LinearLayerTrace) -> np.ndarray:
    """Mask the factors, rebuild the ``k_l'`` sparsified gradient, SJLT it to ``k_l``.

    Auxiliary memory is the ``k_l'`` buffer plus the output; the ``p_l``
    gradient is never formed.
    """
    if comp.mode not in (FactMode.FACTGRASS, FactMode.FACTMASK):
        raise ValueError(f"expected a factor-mask compressor, got {comp.mode.value}")
    return comp.compress(trace)


@dataclass
class ModelCompression:
    vector: np.ndarray
    block_dims: list
    op_counts: list  # one Counter per layer


def compress_model(comps: Sequence[LayerCompressor], traces: Sequence[LinearLayerTrace]) -> ModelCompression:
    """Concatenate per-layer compressed blocks in layer order, with per-layer op counts."""
    if len(traces) != len(comps):
        raise KeyError(f"{len(traces)} layer traces but {len(comps)} layer compressors")
    blocks, counts = [], []
    for comp, trace in zip(comps, traces):
        with _ops.count_ops() as ops:
            blocks.append(comp.compress(trace))
        counts.append(ops)
    return ModelCompression(np.concatenate(blocks), [c.k_l for c in comps], counts)


def compress_model_batch(comps: Sequence[LayerCompressor], traces: BatchTraces) -> list[np.ndarray]:
    """Per-layer ``(n, k_l)`` blocks for a whole batch of traces."""
    if len(traces.z_in) != len(comps):
        raise KeyError(f"{len(traces.z_in)} layer traces but {len(comps)} layer compressors")
    return [c.compress_batch(z, d) for c, z, d in zip(comps, traces.z_in, traces.dz_out)]


def op_model(comp: LayerCompressor, T: int = 1) -> dict:
    """Multiply-add counts predicted for one sample of ``T`` tokens."""
    if comp.mode in (FactMode.LOGRA, FactMode.FACTSJLT):
        k_in, k_out = comp.proj_in.target_dim, comp.proj_out.target_dim
        return {"project": T * (k_in * comp.d_in + k_out * comp.d_out), "reconstruct": T * comp.k_l}
    counts = {
        "mask": T * (comp.mask_in.size + comp.mask_out.size),
        "reconstruct": T * comp.k_prime,
    }
    if comp.final is not None:
        counts["sjlt"] = comp.final.sparsity * comp.k_prime
    return counts
