"""Flat compression pipelines and their text grammar.

A pipeline is an ordered chain of stages, written ``stage(:key=val,...)``
joined by ``+``::

    mask:k=4096,seed=1+sjlt:k=1024,seed=2      # GraSS
    sjlt:k=1024,s=1,seed=7                     # plain SJLT

Stage names: ``gaussian``, ``rademacher``, ``fjlt``, ``sjlt``, ``mask``
(Random Mask) and ``smask`` (Selective Mask read from ``path=``).
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import _ops
from .mask import MaskSpec, apply_mask, apply_mask_batch, random_mask, read_mask
from .sketch import (
    GradientLike,
    GradientVector,
    SketchKind,
    SketchSpec,
    as_gradient,
    project,
    project_batch,
)

SKETCH_STAGES = {"gaussian", "rademacher", "fjlt", "sjlt"}
MASK_STAGES = {"mask", "smask"}
_INT_KEYS = {"k", "seed", "s"}
_ALLOWED = {
    "gaussian": {"k", "seed", "normalize"},
    "rademacher": {"k", "seed", "normalize"},
    "fjlt": {"k", "seed", "normalize"},
    "sjlt": {"k", "seed", "s", "normalize"},
    "mask": {"k", "seed"},
    "smask": {"path", "k"},
}


class SpecParseError(ValueError):
    def __init__(self, message: str, position: int = 0):
        super().__init__(f"{message} (at position {position})")
        self.position = position


@dataclass(frozen=True)
class Stage:
    name: str
    k: Optional[int] = None
    seed: int = 0
    s: int = 1
    normalize: bool = False
    path: Optional[str] = None

    def to_string(self) -> str:
        parts = []
        if self.name == "smask":
            parts.append(f"path={self.path}")
            if self.k is not None:
                parts.append(f"k={self.k}")
        else:
            parts.append(f"k={self.k}")
            if self.name == "sjlt":
                parts.append(f"s={self.s}")
            parts.append(f"seed={self.seed}")
            if self.normalize:
                parts.append("normalize=1")
        return f"{self.name}:" + ",".join(parts)


@dataclass(frozen=True)
class CompressorSpec:
    stages: tuple
    input_dim: Optional[int] = None

    @property
    def output_dim(self) -> Optional[int]:
        return self.stages[-1].k if self.stages else self.input_dim

    @property
    def is_grass(self) -> bool:
        """Canonical GraSS form ``[mask(k'), sjlt(k)]``."""
        return (
            len(self.stages) == 2
            and self.stages[0].name in MASK_STAGES
            and self.stages[1].name == "sjlt"
        )

    def to_string(self) -> str:
        return "+".join(st.to_string() for st in self.stages)

    def with_input_dim(self, p: int) -> "CompressorSpec":
        spec = CompressorSpec(self.stages, p)
        _check_chain(spec.stages, p, [0] * len(spec.stages))
        return spec

    def fingerprint(self, extra: str = "") -> str:
        """SHA-256 of the canonical string, the input dim and any mask file contents."""
        h = hashlib.sha256()
        h.update(self.to_string().encode())
        h.update(f"|p={self.input_dim}|{extra}".encode())
        for st in self.stages:
            if st.path is not None and Path(st.path).exists():
                h.update(Path(st.path).read_bytes())
        return h.hexdigest()


def _parse_value(key: str, raw: str, pos: int):
    if key == "path":
        return raw
    if key == "normalize":
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise SpecParseError(f"normalize must be a boolean, got {raw!r}", pos)
    try:
        value = int(raw)
    except ValueError:
        raise SpecParseError(f"{key} must be an integer, got {raw!r}", pos) from None
    if value < 0 or (key in ("k", "s") and value == 0):
        raise SpecParseError(f"{key} must be positive, got {value}", pos)
    return value


def _check_chain(stages: Sequence[Stage], input_dim: Optional[int], positions: Sequence[int]) -> None:
    dim = input_dim
    for st, pos in zip(stages, positions):
        if st.k is not None and dim is not None and st.k > dim:
            raise SpecParseError(f"k ({st.k}) exceeds stage input dim ({dim})", pos)
        if st.name == "sjlt" and st.k is not None and st.s > st.k:
            raise SpecParseError(f"s ({st.s}) exceeds k ({st.k})", pos)
        dim = st.k if st.k is not None else None


def parse_compressor(text: str, input_dim: Optional[int] = None) -> CompressorSpec:
    """Parse and validate a pipeline string; see the module docstring for the grammar."""
    text = text.strip()
    if not text:
        raise SpecParseError("empty compressor spec", 0)
    stages, positions = [], []
    pos = 0
    for chunk in text.split("+"):
        name, _, args = chunk.partition(":")
        name = name.strip().lower()
        if name not in _ALLOWED:
            raise SpecParseError(f"unknown stage {name!r}", pos)
        fields = {}
        arg_pos = pos + len(chunk) - len(args)
        for item in filter(None, args.split(",")):
            key, eq, raw = item.partition("=")
            key = key.strip()
            if not eq:
                raise SpecParseError(f"expected key=value, got {item!r}", arg_pos)
            if key not in _ALLOWED[name]:
                raise SpecParseError(f"stage {name!r} does not take {key!r}", arg_pos)
            fields[key] = _parse_value(key, raw.strip(), arg_pos)
            arg_pos += len(item) + 1
        if name == "smask":
            if "path" not in fields:
                raise SpecParseError("smask needs path=", pos)
        elif "k" not in fields:
            raise SpecParseError(f"stage {name!r} is missing its dim k", pos)
        stages.append(Stage(name, **fields))
        positions.append(pos)
        pos += len(chunk) + 1
    _check_chain(stages, input_dim, positions)
    return CompressorSpec(tuple(stages), input_dim)


# ---------------------------------------------------------------------------
# execution


@dataclass
class Compressor:
    """A :class:`CompressorSpec` bound to concrete projections and masks."""

    spec: CompressorSpec
    ops: list = field(default_factory=list)

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim

    @property
    def output_dim(self) -> int:
        dim = self.spec.input_dim
        for op in self.ops:
            dim = op.size if isinstance(op, MaskSpec) else op.target_dim
        return dim

    def compress(self, g: GradientLike) -> np.ndarray:
        g = as_gradient(g)
        if g.dim != self.input_dim:
            raise ValueError(f"gradient has dim {g.dim}, compressor expects {self.input_dim}")
        x: Union[GradientVector, np.ndarray] = g
        for op in self.ops:
            if isinstance(op, MaskSpec):
                x = apply_mask(op, x)
            else:
                x = project(op, GradientVector.sparsify(x) if isinstance(x, np.ndarray) else x)
        return x if isinstance(x, np.ndarray) else x.to_dense().astype(np.float64)

    def compress_batch(self, G: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(G)
        if X.shape[1] != self.input_dim:
            raise ValueError(f"gradients have dim {X.shape[1]}, compressor expects {self.input_dim}")
        for op in self.ops:
            X = apply_mask_batch(op, X) if isinstance(op, MaskSpec) else project_batch(op, X)
        return np.asarray(X, dtype=np.float64)


def build_compressor(spec: CompressorSpec, input_dim: Optional[int] = None, seed_offset: int = 0) -> Compressor:
    """Realize every stage for input dimension ``input_dim``.

    ``seed_offset`` is added to each stage seed; layer-wise use passes the
    layer index so blocks get independent randomness.
    """
    p = input_dim if input_dim is not None else spec.input_dim
    if p is None:
        raise ValueError("compressor input dim is unknown")
    spec = spec.with_input_dim(p)
    ops = []
    dim = p
    for st in spec.stages:
        seed = st.seed + seed_offset
        if st.name == "mask":
            op = random_mask(dim, st.k, seed)
            dim = st.k
        elif st.name == "smask":
            op = read_mask(st.path)
            if op.input_dim != dim:
                raise ValueError(f"mask file {st.path} is for dim {op.input_dim}, stage input is {dim}")
            if st.k is not None and st.k != op.size:
                raise ValueError(f"mask file {st.path} keeps {op.size} indices, spec says {st.k}")
            dim = op.size
        else:
            op = SketchSpec(SketchKind(st.name), dim, st.k, st.s, seed, st.normalize)
            dim = st.k
        ops.append(op)
    return Compressor(spec, ops)


def compress(spec: CompressorSpec, g: GradientLike) -> np.ndarray:
    """One-shot compression of ``g`` by ``spec`` (input dim taken from ``g``)."""
    g = as_gradient(g)
    return build_compressor(spec, g.dim).compress(g)


_STAGE_NAMES = re.compile(r"^(gaussian|rademacher|fjlt|sjlt|mask|smask)\b")


def looks_flat(text: str) -> bool:
    return bool(_STAGE_NAMES.match(text.strip().lower()))
