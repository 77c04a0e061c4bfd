"""Compressed per-sample gradients for a model, from a compressor string.

Flat strings (``mask:k=...+sjlt:k=...``) compress the whole flattened gradient,
or each layer slice separately when ``layerwise`` is set. Factorized strings
(``factgrass:...``, ``logra:...``) always produce one block per linear layer.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import factgrass as fg
from .grass import build_compressor, looks_flat, parse_compressor
from .model import Loss, MlpModel, per_sample_grads


@dataclass
class BoundCompressor:
    text: str
    layerwise: bool
    blocks: tuple
    fingerprint: str
    _flat: Optional[list] = None
    _fact: Optional[list] = None

    @property
    def k(self) -> int:
        return sum(self.blocks)

    def compress(self, model: MlpModel, X: np.ndarray, y: np.ndarray, loss: Loss = Loss.CROSS_ENTROPY, batch: int = 256) -> np.ndarray:
        """``(n, k)`` compressed per-sample gradients, f64."""
        n = np.asarray(X).shape[0]
        out = np.empty((n, self.k))
        for start in range(0, n, batch):
            sl = slice(start, min(n, start + batch))
            G, traces = per_sample_grads(model, X[sl], y[sl], loss)
            out[sl] = self._compress_chunk(model, G, traces)
        return out

    def _compress_chunk(self, model, G, traces) -> np.ndarray:
        if self._fact is not None:
            return np.concatenate(fg.compress_model_batch(self._fact, traces), axis=1)
        if not self.layerwise:
            return self._flat[0].compress_batch(G)
        parts = [c.compress_batch(G[:, sl]) for c, sl in zip(self._flat, model.layer_slices())]
        return np.concatenate(parts, axis=1)


def bind(text: str, model: MlpModel, layerwise: bool = False) -> BoundCompressor:
    """Realize ``text`` for ``model``; the fingerprint covers the compressor string, the layer shapes and ``layerwise``."""
    dims = [(l.d_in_aug, l.d_out) for l in model.layers]
    extra = f"dims={dims}|layerwise={int(layerwise)}"
    if looks_flat(text):
        spec = parse_compressor(text)
        if layerwise:
            comps = [build_compressor(spec, l.n_params, seed_offset=i) for i, l in enumerate(model.layers)]
        else:
            comps = [build_compressor(spec, model.n_params)]
        spec = comps[0].spec
        blocks = tuple(c.output_dim for c in comps)
        return BoundCompressor(spec.to_string(), layerwise, blocks, spec.fingerprint(extra), _flat=comps)
    spec = fg.parse_factorized(text)
    comps = fg.bind_model(spec, dims)
    h = hashlib.sha256(spec.fingerprint(extra).encode())
    for c in comps:
        for m in (c.mask_in, c.mask_out):
            if m is not None:
                h.update(m.indices.tobytes())
    return BoundCompressor(spec.to_string(), True, tuple(c.k_l for c in comps), h.hexdigest(), _fact=comps)
