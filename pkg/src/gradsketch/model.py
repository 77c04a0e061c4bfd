"""Small numpy MLPs with explicit per-sample gradients and linear-layer traces.

Parameters of each layer are stored as an augmented ``d_out x (d_in + 1)``
matrix whose last column is the bias, so a layer's input trace carries a
trailing row of ones. Flattening is layer by layer, column-major within a
layer; with that ordering the gradient slice of a layer is exactly
``sum_t z_in[:, t] (x) dz_out[:, t]``.
"""

from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GMLP"
CHECKPOINT_VERSION = 1


class Activation(str, enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"


class Loss(str, enum.Enum):
    CROSS_ENTROPY = "cross_entropy"
    MSE = "mse"


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class LinearLayer:
    weight: np.ndarray  # d_out x (d_in + has_bias); bias is the last column
    has_bias: bool = True
    activation: Activation = Activation.RELU

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @property
    def d_in(self) -> int:
        return self.weight.shape[1] - int(self.has_bias)

    @property
    def d_in_aug(self) -> int:
        return self.weight.shape[1]

    @property
    def n_params(self) -> int:
        return self.weight.size

    @property
    def W(self) -> np.ndarray:
        return self.weight[:, : self.d_in]

    @property
    def b(self) -> Optional[np.ndarray]:
        return self.weight[:, -1] if self.has_bias else None


@dataclass
class MlpModel:
    layers: list[LinearLayer]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.d_out != b.d_in:
                raise ValueError(f"layer dims do not chain: {a.d_out} -> {b.d_in}")

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].d_in] + [layer.d_out for layer in self.layers]

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    def layer_slices(self) -> list[slice]:
        out, start = [], 0
        for layer in self.layers:
            out.append(slice(start, start + layer.n_params))
            start += layer.n_params
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([layer.weight.ravel(order="F") for layer in self.layers])

    def unflatten(self, theta: np.ndarray) -> "MlpModel":
        theta = np.asarray(theta)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        layers = []
        for layer, sl in zip(self.layers, self.layer_slices()):
            w = theta[sl].reshape(layer.weight.shape, order="F").astype(layer.weight.dtype)
            layers.append(LinearLayer(w, layer.has_bias, layer.activation))
        return MlpModel(layers)

    def copy(self) -> "MlpModel":
        return MlpModel([LinearLayer(l.weight.copy(), l.has_bias, l.activation) for l in self.layers])


def init_mlp(
    dims: Sequence[int],
    seed: int = 0,
    bias: bool = True,
    hidden_activation: Activation = Activation.RELU,
    dtype=np.float32,
) -> MlpModel:
    """He-initialized MLP; the last layer has no activation."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.standard_normal((d_out, d_in)) * np.sqrt(2.0 / d_in)
        if bias:
            w = np.concatenate([w, np.zeros((d_out, 1))], axis=1)
        act = Activation.IDENTITY if i == len(dims) - 2 else Activation(hidden_activation)
        layers.append(LinearLayer(w.astype(dtype), bias, act))
    return MlpModel(layers)


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class LinearLayerTrace:
    """Layer input (with bias row) and pre-activation gradient for one sample."""

    layer: int
    z_in: np.ndarray  # d_in_aug x T
    dz_out: np.ndarray  # d_out x T

    def __post_init__(self):
        if self.z_in.ndim != 2 or self.dz_out.ndim != 2 or self.z_in.shape[1] != self.dz_out.shape[1]:
            raise ValueError("trace factors must be 2-d with a shared token axis")

    @property
    def T(self) -> int:
        return self.z_in.shape[1]

    @property
    def d_in(self) -> int:
        return self.z_in.shape[0]

    @property
    def d_out(self) -> int:
        return self.dz_out.shape[0]


def _augment(z: np.ndarray, layer: LinearLayer) -> np.ndarray:
    if not layer.has_bias:
        return z
    return np.concatenate([z, np.ones(z.shape[:-1] + (1,), dtype=z.dtype)], axis=-1)


def forward(model: MlpModel, x: np.ndarray):
    """Outputs for inputs with trailing feature axis, plus per-layer caches.

    The cache holds ``(z_in_augmented, pre_activation)`` for every layer.
    """
    x = np.asarray(x)
    if x.shape[-1] != model.layers[0].d_in:
        raise ValueError(f"input has {x.shape[-1]} features, model expects {model.layers[0].d_in}")
    h = x.astype(model.dtype, copy=False)
    cache = []
    for layer in model.layers:
        z = _augment(h, layer)
        pre = z @ layer.weight.T
        cache.append((z, pre))
        h = np.maximum(pre, 0) if layer.activation is Activation.RELU else pre
    return h, cache


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_dout(out: np.ndarray, y: np.ndarray, loss: Loss):
    """Per-position loss and its gradient w.r.t. the network output."""
    loss = Loss(loss)
    if loss is Loss.CROSS_ENTROPY:
        y = np.asarray(y, dtype=np.int64)
        shifted = out - out.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=-1))
        picked = np.take_along_axis(shifted, y[..., None], axis=-1)[..., 0]
        d = _softmax(out)
        np.put_along_axis(d, y[..., None], np.take_along_axis(d, y[..., None], axis=-1) - 1, axis=-1)
        return logz - picked, d
    diff = out - np.asarray(y, dtype=out.dtype).reshape(out.shape)
    return 0.5 * (diff * diff).sum(axis=-1), diff


def _backward(model: MlpModel, cache, dout: np.ndarray) -> list[np.ndarray]:
    """Pre-activation gradients for every layer, same leading shape as ``dout``."""
    grads = [None] * len(model.layers)
    d = dout
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        pre = cache[i][1]
        if layer.activation is Activation.RELU:
            d = d * (pre > 0)
        grads[i] = d
        if i:
            d = d @ layer.W
    return grads


def _as_tokens(X: np.ndarray, d: int) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim == 2:
        X = X[:, None, :]
    if X.shape[-1] != d:
        raise ValueError(f"input has {X.shape[-1]} features, model expects {d}")
    return X


def sample_losses(model: MlpModel, X: np.ndarray, y: np.ndarray, loss: Loss) -> np.ndarray:
    """Per-sample loss, summed over tokens for sequential inputs."""
    X = _as_tokens(X, model.layers[0].d_in)
    out, _ = forward(model, X)
    ls, _ = loss_and_dout(out, _token_targets(y, X, loss), loss)
    if not np.all(np.isfinite(ls)):
        raise FloatingPointError("non-finite loss")
    return ls.sum(axis=1)


def _token_targets(y, X, loss):
    y = np.asarray(y)
    if Loss(loss) is Loss.CROSS_ENTROPY:
        return y.reshape(X.shape[:2])
    return y.reshape(X.shape[:2] + (-1,))


def vec_kron(z_in: np.ndarray, dz_out: np.ndarray) -> np.ndarray:
    """``sum_t z_in[:, t] (x) dz_out[:, t]``, accumulated in ascending ``t``."""
    acc = np.kron(z_in[:, 0], dz_out[:, 0])
    for t in range(1, z_in.shape[1]):
        acc += np.kron(z_in[:, t], dz_out[:, t])
    return acc


@dataclass
class BatchTraces:
    """Per-layer factors for a batch, shaped ``(n, T, d)``."""

    z_in: list[np.ndarray]
    dz_out: list[np.ndarray]

    @property
    def n(self) -> int:
        return self.z_in[0].shape[0]

    def sample(self, i: int) -> list[LinearLayerTrace]:
        return [
            LinearLayerTrace(l, self.z_in[l][i].T.copy(), self.dz_out[l][i].T.copy())
            for l in range(len(self.z_in))
        ]


def per_sample_grads(model: MlpModel, X: np.ndarray, y: np.ndarray, loss: Loss = Loss.CROSS_ENTROPY):
    """Flat per-sample gradients ``(n, p)`` and the layer traces that generate them.

    ``X`` is ``(n, d)`` or ``(n, T, d)``; a sample's loss is summed over its tokens.
    """
    X = _as_tokens(X, model.layers[0].d_in)
    out, cache = forward(model, X)
    ls, dout = loss_and_dout(out, _token_targets(y, X, loss), loss)
    if not np.all(np.isfinite(ls)):
        raise FloatingPointError("non-finite loss")
    dzs = _backward(model, cache, dout)
    n, T = X.shape[:2]
    G = np.empty((n, model.n_params), dtype=model.dtype)
    for (z, _), dz, sl in zip(cache, dzs, model.layer_slices()):
        acc = (z[:, 0, :, None] * dz[:, 0, None, :]).reshape(n, -1)
        for t in range(1, T):
            acc += (z[:, t, :, None] * dz[:, t, None, :]).reshape(n, -1)
        G[:, sl] = acc
    traces = BatchTraces([c[0] for c in cache], dzs)
    return G, traces


def per_sample_grad(model: MlpModel, x: np.ndarray, y, loss: Loss = Loss.CROSS_ENTROPY):
    """Gradient of one sample's loss plus one :class:`LinearLayerTrace` per layer."""
    from .sketch import GradientVector

    x = np.asarray(x)
    G, traces = per_sample_grads(model, x[None], np.asarray(y)[None], loss)
    return GradientVector.dense(G[0]), traces.sample(0)


def batch_grad(model: MlpModel, X: np.ndarray, y: np.ndarray, loss: Loss = Loss.CROSS_ENTROPY):
    """Mean loss and mean flat gradient over a batch via matrix products."""
    X = _as_tokens(X, model.layers[0].d_in)
    n = X.shape[0]
    out, cache = forward(model, X)
    ls, dout = loss_and_dout(out, _token_targets(y, X, loss), loss)
    dzs = _backward(model, cache, dout)
    parts = []
    for (z, _), dz in zip(cache, dzs):
        z2 = z.reshape(-1, z.shape[-1])
        d2 = dz.reshape(-1, dz.shape[-1])
        parts.append((d2.T @ z2 / n).ravel(order="F"))
    return float(ls.sum() / n), np.concatenate(parts)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: MlpModel
    epoch_losses: list[float]
    initial_loss: float

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else self.initial_loss


def train_sgd(
    model: MlpModel,
    X: np.ndarray,
    y: np.ndarray,
    epochs: int,
    lr: float,
    seed: int = 0,
    batch_size: int = 32,
    subset: Optional[np.ndarray] = None,
    loss: Loss = Loss.CROSS_ENTROPY,
    weight_decay: float = 0.0,
) -> TrainResult:
    """Minibatch SGD with a seeded shuffle; ``subset`` restricts training rows.

    The input model is not modified. The reported epoch loss is the full
    training loss after each epoch.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    X = np.asarray(X)
    y = np.asarray(y)
    if subset is not None:
        subset = np.asarray(subset)
        rows = np.flatnonzero(subset) if subset.dtype == bool else subset
        X, y = X[rows], y[rows]
    model = model.copy()
    theta = model.flatten()
    rng = np.random.Generator(np.random.Philox(key=seed))
    n = X.shape[0]

    def full_loss(m):
        return float(sample_losses(m, X, y, loss).mean()) if n else 0.0

    initial = full_loss(model)
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        with np.errstate(over="ignore", invalid="ignore"):
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                _, g = batch_grad(model, X[idx], y[idx], loss)
                if weight_decay:
                    g = g + weight_decay * theta
                theta = theta - np.asarray(lr * g, dtype=theta.dtype)
                model = model.unflatten(theta)
            try:
                value = full_loss(model)
            except FloatingPointError:
                value = np.nan
        if not np.isfinite(value) or not np.all(np.isfinite(theta)):
            raise TrainingDiverged(f"training diverged at epoch {epoch}")
        curve.append(value)
    return TrainResult(model, curve, initial)


def accuracy(model: MlpModel, X: np.ndarray, y: np.ndarray) -> float:
    out, _ = forward(model, X)
    return float(np.mean(out.argmax(axis=-1) == y))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    is_test: np.ndarray = field(default=None)
    task: str = "classification"

    def __post_init__(self):
        if self.X.shape[0] < 1 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError("dataset needs at least one row and matching labels")
        if self.is_test is None:
            self.is_test = np.zeros(self.X.shape[0], dtype=bool)

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1

    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.X[~self.is_test], self.y[~self.is_test]

    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.X[self.is_test], self.y[self.is_test]


def _split(n: int, n_test: int, rng: np.random.Generator) -> np.ndarray:
    is_test = np.zeros(n, dtype=bool)
    if n_test:
        is_test[rng.choice(n, size=n_test, replace=False)] = True
    return is_test


def gaussian_blobs(
    n: int,
    dim: int = 2,
    centers: int = 2,
    std: float = 1.0,
    n_test: int = 0,
    center_scale: float = 1.0,
    seed: int = 0,
) -> Dataset:
    """Isotropic Gaussian clusters. Two classes sit at ``+-center_scale * 1``."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    if centers == 2:
        mu = center_scale * np.stack([-np.ones(dim), np.ones(dim)])
    else:
        mu = center_scale * rng.standard_normal((centers, dim))
    y = rng.integers(0, centers, size=n)
    X = mu[y] + std * rng.standard_normal((n, dim))
    return Dataset(X.astype(np.float32), y, _split(n, n_test, rng))


def two_moons(n: int, noise: float = 0.1, n_test: int = 0, seed: int = 0) -> Dataset:
    rng = np.random.Generator(np.random.Philox(key=seed))
    y = rng.integers(0, 2, size=n)
    angle = rng.uniform(0, np.pi, size=n)
    X = np.where(
        (y == 0)[:, None],
        np.stack([np.cos(angle), np.sin(angle)], axis=1),
        np.stack([1 - np.cos(angle), 0.5 - np.sin(angle)], axis=1),
    )
    X = X + noise * rng.standard_normal(X.shape)
    return Dataset(X.astype(np.float32), y, _split(n, n_test, rng))


class IdxFormatError(ValueError):
    pass


_IDX_TYPES = {0x08: "u1", 0x09: "i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise IdxFormatError(f"{path}: bad IDX magic")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise IdxFormatError(f"{path}: unknown IDX element type 0x{code:02x}")
    if len(raw) < 4 + 4 * ndim:
        raise IdxFormatError(f"{path}: truncated IDX header")
    shape = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    dtype = np.dtype(_IDX_TYPES[code])
    count = int(np.prod(shape, dtype=np.uint64)) if ndim else 1
    if count * dtype.itemsize > len(raw):
        raise IdxFormatError(f"{path}: dimensions {shape} overflow the file")
    body = raw[4 + 4 * ndim :]
    if len(body) != count * dtype.itemsize:
        raise IdxFormatError(f"{path}: expected {count} elements, found {len(body) // dtype.itemsize}")
    return np.frombuffer(body, dtype=dtype).reshape(shape)


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    inv = {np.dtype(v).str: k for k, v in _IDX_TYPES.items()}
    target = np.dtype(_IDX_TYPES[0x08]) if arr.dtype == np.uint8 else arr.dtype.newbyteorder(">")
    code = inv.get(target.str)
    if code is None:
        raise IdxFormatError(f"dtype {arr.dtype} has no IDX code")
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(target).tobytes())


def idx_dataset(images, labels, n_test: int = 0, limit: Optional[int] = None, seed: int = 0) -> Dataset:
    """Image/label IDX pair, images flattened and scaled to ``[0, 1]``."""
    X = read_idx(images)
    y = read_idx(labels).astype(np.int64)
    if X.shape[0] != y.shape[0]:
        raise IdxFormatError("image and label counts differ")
    if limit is not None:
        X, y = X[:limit], y[:limit]
    X = X.reshape(X.shape[0], -1).astype(np.float32)
    if X.size and X.max() > 1:
        X = X / 255.0
    rng = np.random.Generator(np.random.Philox(key=seed))
    return Dataset(X, y, _split(X.shape[0], n_test, rng))


def make_dataset(kind: str, params: Optional[dict] = None, seed: int = 0) -> Dataset:
    params = dict(params or {})
    kind = kind.lower()
    if kind in ("gaussian_blobs", "blobs"):
        return gaussian_blobs(seed=seed, **params)
    if kind in ("two_moons", "moons"):
        return two_moons(seed=seed, **params)
    if kind in ("idx", "idx_files"):
        for key in ("images", "labels"):
            if key not in params:
                raise KeyError(f"idx dataset needs '{key}'")
            if not Path(params[key]).exists():
                raise FileNotFoundError(params[key])
        return idx_dataset(seed=seed, **params)
    raise ValueError(f"unknown dataset kind {kind!r}")


# ---------------------------------------------------------------------------
# checkpoints

_CK_HEADER = struct.Struct("<4sII")
_CK_LAYER = struct.Struct("<IIBB")
_ACT_CODES = {Activation.IDENTITY: 0, Activation.RELU: 1}


def save_checkpoint(path, model: MlpModel) -> Path:
    path = Path(path)
    parts = [_CK_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(model.layers))]
    for layer in model.layers:
        parts.append(_CK_LAYER.pack(layer.d_in, layer.d_out, _ACT_CODES[layer.activation], layer.has_bias))
    for layer in model.layers:
        parts.append(np.ascontiguousarray(layer.W, dtype="<f4").tobytes())
        if layer.has_bias:
            parts.append(np.ascontiguousarray(layer.b, dtype="<f4").tobytes())
    path.write_bytes(b"".join(parts))
    return path


def load_checkpoint(path) -> MlpModel:
    raw = Path(path).read_bytes()
    if len(raw) < _CK_HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, n_layers = _CK_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = _CK_HEADER.size
    metas = []
    for _ in range(n_layers):
        metas.append(_CK_LAYER.unpack_from(raw, off))
        off += _CK_LAYER.size
    codes = {v: k for k, v in _ACT_CODES.items()}
    layers = []
    for d_in, d_out, act, has_bias in metas:
        W = np.frombuffer(raw, "<f4", d_out * d_in, off).reshape(d_out, d_in)
        off += 4 * d_in * d_out
        w = W
        if has_bias:
            b = np.frombuffer(raw, "<f4", d_out, off)
            off += 4 * d_out
            w = np.concatenate([W, b[:, None]], axis=1)
        layers.append(LinearLayer(w.astype(np.float32), bool(has_bias), codes[act]))
    if off != len(raw):
        raise ValueError(f"{path}: checkpoint has {len(raw) - off} trailing bytes")
    return MlpModel(layers)
