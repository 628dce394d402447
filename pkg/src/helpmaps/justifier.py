"""Failure-predicting justifier network with hand-written gradients.

Architecture (all activations tanh unless noted)::

    feature grid 7x7xC --3x3 conv (same padding)--> 7x7xC_out --fc--> 96
    question         --fc 96--fc 96--> 96
    attention summary--fc 96--fc 96--> 96
    answer logits    --fc 96--fc 96--> 96
    h = concat(...)  (384)
    failure prob = sigmoid(h . w_fail + b_fail)
    jatt map     = sigmoid(h @ W_att + b_att)   (49 cells)

Error maps are GradCAM over the input grid, using the gradient of the
failure *logit*.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (GRID_SIDE, N_CELLS, Dataset, FormatError, InsufficientDataError,
                   MissingMapError, NumericalError, Record)

AUX_KEYS = ("question", "attention_summary", "logits")
_ENCODERS = ("q", "s", "g")  # one per AUX_KEYS entry
MAGIC = b"JPRM"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class JustifierDims:
    channels: int
    question_dim: int
    summary_dim: int
    logits_dim: int
    conv_channels: int = 8
    hidden: int = 96

    @property
    def latent(self) -> int:
        return 4 * self.hidden

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter shapes in declaration (and serialization) order."""
        c, co, hd = self.channels, self.conv_channels, self.hidden
        out: dict[str, tuple[int, ...]] = {
            "conv_w": (3, 3, c, co), "conv_b": (co,),
            "img_w": (N_CELLS * co, hd), "img_b": (hd,),
        }
        for enc, d_in in zip(_ENCODERS, (self.question_dim, self.summary_dim, self.logits_dim)):
            out[f"{enc}_w1"] = (d_in, hd)
            out[f"{enc}_b1"] = (hd,)
            out[f"{enc}_w2"] = (hd, hd)
            out[f"{enc}_b2"] = (hd,)
        out["fail_w"] = (self.latent,)
        out["fail_b"] = (1,)
        out["att_w"] = (self.latent, N_CELLS)
        out["att_b"] = (N_CELLS,)
        return out

    def as_tuple(self) -> tuple[int, ...]:
        return (self.channels, self.question_dim, self.summary_dim, self.logits_dim,
                self.conv_channels, self.hidden)

    @classmethod
    def for_record(cls, r: Record, conv_channels: int = 8, hidden: int = 96) -> "JustifierDims":
        if r.feature_grid is None or r.aux_features is None:
            raise MissingMapError(f"record {r.id!r} lacks feature_grid or aux_features")
        aux = r.aux_features
        return cls(r.feature_grid.shape[2], aux["question"].size, aux["attention_summary"].size,
                   aux["logits"].size, conv_channels, hidden)


def _fans(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if name == "conv_w":
        return 9 * shape[2], 9 * shape[3]
    if len(shape) == 1:
        return shape[0], 1
    return shape[0], shape[1]


@dataclass
class JustifierParams:
    dims: JustifierDims
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, dims: JustifierDims, seed: int) -> "JustifierParams":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        weights = {}
        for name, shape in dims.shapes().items():
            if "_b" in name:
                weights[name] = np.zeros(shape)
            else:
                fan_in, fan_out = _fans(name, shape)
                a = np.sqrt(6.0 / (fan_in + fan_out))
                weights[name] = rng.uniform(-a, a, size=shape)
        return cls(dims, weights)

    @classmethod
    def zeros(cls, dims: JustifierDims) -> "JustifierParams":
        return cls(dims, {k: np.zeros(s) for k, s in dims.shapes().items()})

    def copy(self) -> "JustifierParams":
        return JustifierParams(self.dims, {k: v.copy() for k, v in self.weights.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.weights[name]

    def to_bytes(self) -> bytes:
        dims = self.dims.as_tuple() + (GRID_SIDE, N_CELLS)
        head = MAGIC + struct.pack("<HH", FORMAT_VERSION, len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
        body = b"".join(self.weights[k].astype("<f8").tobytes() for k in self.dims.shapes())
        return head + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "JustifierParams":
        if data[:4] != MAGIC:
            raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
        version, n = struct.unpack_from("<HH", data, 4)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported params version {version}")
        vals = struct.unpack_from(f"<{n}I", data, 8)
        if n != 8 or vals[6:] != (GRID_SIDE, N_CELLS):
            raise FormatError(f"unexpected dimension header {vals}")
        dims = JustifierDims(vals[0], vals[1], vals[2], vals[3], vals[4], vals[5])
        offset = 8 + 4 * n
        weights = {}
        for name, shape in dims.shapes().items():
            count = int(np.prod(shape))
            end = offset + 8 * count
            if end > len(data):
                raise FormatError("params payload truncated")
            weights[name] = np.frombuffer(data, "<f8", count, offset).astype(np.float64).reshape(shape)
            offset = end
        if offset != len(data):
            raise FormatError(f"{len(data) - offset} trailing bytes after params payload")
        return cls(dims, weights)

    def save(self, path: str | Path) -> None:
        from .formats import atomic_write
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "JustifierParams":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class Batch:
    grid: np.ndarray  # (N, 7, 7, C)
    aux: tuple[np.ndarray, np.ndarray, np.ndarray]  # each (N, D)

    @property
    def size(self) -> int:
        return self.grid.shape[0]


def make_batch(records: Sequence[Record], dims: JustifierDims | None = None) -> Batch:
    grids, aux = [], {k: [] for k in AUX_KEYS}
    for r in records:
        if r.feature_grid is None or r.aux_features is None:
            raise MissingMapError(f"record {r.id!r} lacks feature_grid or aux_features")
        grids.append(r.feature_grid)
        for k in AUX_KEYS:
            if k not in r.aux_features:
                raise MissingMapError(f"record {r.id!r} lacks aux feature {k!r}")
            aux[k].append(r.aux_features[k])
    try:
        b = Batch(np.stack(grids).astype(np.float64),
                  tuple(np.stack(aux[k]).astype(np.float64) for k in AUX_KEYS))  # type: ignore[arg-type]
    except ValueError as e:
        raise ValueError(f"inconsistent justifier input dimensions: {e}") from None
    if dims is not None:
        want = (dims.channels, dims.question_dim, dims.summary_dim, dims.logits_dim)
        got = (b.grid.shape[3],) + tuple(a.shape[1] for a in b.aux)
        if b.grid.shape[1:3] != (GRID_SIDE, GRID_SIDE) or got != want:
            raise ValueError(f"dimension mismatch: params expect {want}, records give {got}")
    return b


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _patches(x: np.ndarray) -> np.ndarray:
    """im2col for a 3x3 same-padded conv: (N,7,7,C) -> (N,7,7,9C), tap-major."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    s = GRID_SIDE
    cols = [xp[:, di:di + s, dj:dj + s, :] for di in range(3) for dj in range(3)]
    return np.concatenate(cols, axis=3)


def _unpatch(dp: np.ndarray, channels: int) -> np.ndarray:
    s = GRID_SIDE
    dp = dp.reshape(dp.shape[0], s, s, 9, channels)
    dxp = np.zeros((dp.shape[0], s + 2, s + 2, channels))
    for t in range(9):
        di, dj = divmod(t, 3)
        dxp[:, di:di + s, dj:dj + s, :] += dp[:, :, :, t, :]
    return dxp[:, 1:-1, 1:-1, :]


@dataclass
class ForwardCache:
    patches: np.ndarray
    conv_act: np.ndarray
    img_act: np.ndarray
    enc_hidden: list[np.ndarray]
    enc_out: list[np.ndarray]
    aux_in: list[np.ndarray]
    latent: np.ndarray
    fail_logit: np.ndarray
    failure_prob: np.ndarray
    jatt: np.ndarray


def forward_batch(params: JustifierParams, batch: Batch) -> ForwardCache:
    w = params.weights
    n = batch.size
    p = _patches(batch.grid)
    co = params.dims.conv_channels
    conv_act = np.tanh(p @ w["conv_w"].reshape(-1, co) + w["conv_b"])
    img_act = np.tanh(conv_act.reshape(n, -1) @ w["img_w"] + w["img_b"])
    hidden, outs = [], []
    for enc, x in zip(_ENCODERS, batch.aux):
        u = np.tanh(x @ w[f"{enc}_w1"] + w[f"{enc}_b1"])
        hidden.append(u)
        outs.append(np.tanh(u @ w[f"{enc}_w2"] + w[f"{enc}_b2"]))
    h = np.concatenate([img_act] + outs, axis=1)
    z = h @ w["fail_w"] + w["fail_b"][0]
    jatt = sigmoid(h @ w["att_w"] + w["att_b"])
    return ForwardCache(p, conv_act, img_act, hidden, outs, list(batch.aux), h, z, sigmoid(z), jatt)


def backward_batch(params: JustifierParams, cache: ForwardCache, d_logit: np.ndarray,
                   d_att_pre: np.ndarray | None = None, want_input: bool = False):
    """Backpropagate upstream gradients on the failure logit and the pre-sigmoid jatt.

    Returns ``(grads, d_grid)``; ``d_grid`` is None unless ``want_input``.
    """
    w = params.weights
    dims = params.dims
    n = cache.latent.shape[0]
    hd = dims.hidden
    g: dict[str, np.ndarray] = {}

    g["fail_w"] = cache.latent.T @ d_logit
    g["fail_b"] = np.array([d_logit.sum()])
    dh = np.outer(d_logit, w["fail_w"])
    if d_att_pre is None:
        g["att_w"] = np.zeros_like(w["att_w"])
        g["att_b"] = np.zeros_like(w["att_b"])
    else:
        g["att_w"] = cache.latent.T @ d_att_pre
        g["att_b"] = d_att_pre.sum(axis=0)
        dh = dh + d_att_pre @ w["att_w"].T

    for i, enc in enumerate(_ENCODERS):
        d_out = dh[:, (i + 1) * hd:(i + 2) * hd] * (1.0 - cache.enc_out[i] ** 2)
        u = cache.enc_hidden[i]
        g[f"{enc}_w2"] = u.T @ d_out
        g[f"{enc}_b2"] = d_out.sum(axis=0)
        du = (d_out @ w[f"{enc}_w2"].T) * (1.0 - u ** 2)
        g[f"{enc}_w1"] = cache.aux_in[i].T @ du
        g[f"{enc}_b1"] = du.sum(axis=0)

    d_img = dh[:, :hd] * (1.0 - cache.img_act ** 2)
    flat = cache.conv_act.reshape(n, -1)
    g["img_w"] = flat.T @ d_img
    g["img_b"] = d_img.sum(axis=0)
    d_conv = (d_img @ w["img_w"].T).reshape(cache.conv_act.shape) * (1.0 - cache.conv_act ** 2)
    co = dims.conv_channels
    d_conv2 = d_conv.reshape(-1, co)
    g["conv_w"] = (cache.patches.reshape(-1, cache.patches.shape[-1]).T @ d_conv2).reshape(w["conv_w"].shape)
    g["conv_b"] = d_conv2.sum(axis=0)

    d_grid = None
    if want_input:
        d_p = d_conv @ w["conv_w"].reshape(-1, co).T
        d_grid = _unpatch(d_p, dims.channels)
    return {k: g[k] for k in dims.shapes()}, d_grid


def forward(params: JustifierParams, r: Record) -> tuple[float, np.ndarray, ForwardCache]:
    """Failure probability, J-Att map and cached activations for one record."""
    cache = forward_batch(params, make_batch([r], params.dims))
    return float(cache.failure_prob[0]), cache.jatt[0].copy(), cache


def attention_targets(records: Sequence[Record]) -> np.ndarray:
    """Human attention rescaled to [0, 1] by its max (all-zero maps stay zero)."""
    h = np.stack([r.human_attention for r in records])
    peak = h.max(axis=1, keepdims=True)
    return h / np.where(peak > 0, peak, 1.0)


def loss_and_grads(params: JustifierParams, batch: Batch, failed: np.ndarray, att_target: np.ndarray,
                   lambda_att: float = 1.0, want_grads: bool = True):
    """Joint loss ``mean BCE(failure) + lambda_att * mean MSE(jatt, target)``.

    Returns ``(loss, bce, mse, grads)``; ``grads`` is None if not requested.
    """
    cache = forward_batch(params, batch)
    n = batch.size
    z = cache.fail_logit
    bce = float(np.mean(np.logaddexp(0.0, z) - failed * z))
    diff = cache.jatt - att_target
    mse = float(np.mean(diff ** 2))
    loss = bce + lambda_att * mse
    if not want_grads:
        return loss, bce, mse, None
    d_logit = (cache.failure_prob - failed) / n
    d_att = None
    if lambda_att != 0:
        d_att = lambda_att * 2.0 * diff / diff.size * cache.jatt * (1.0 - cache.jatt)
    grads, _ = backward_batch(params, cache, d_logit, d_att)
    return loss, bce, mse, grads


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 0.5
    lambda_att: float = 1.0
    seed: int = 0
    batch_size: int | None = None  # None: full batch
    conv_channels: int = 8
    hidden: int = 96


@dataclass
class TrainResult:
    params: JustifierParams
    loss_trace: list[float]  # entry 0 is the loss before any update


def train(ds: Dataset | Iterable[Record], config: TrainConfig = TrainConfig(),
          split: str | None = "train") -> TrainResult:
    """Gradient descent on the joint failure + J-Att loss.

    ``split=None`` trains on every record given. Deterministic given the config.
    """
    records = list(ds.split(split) if isinstance(ds, Dataset) and split is not None else ds)
    if not records:
        raise InsufficientDataError(f"no training records in split {split!r}")
    dims = JustifierDims.for_record(records[0], config.conv_channels, config.hidden)
    params = JustifierParams.init(dims, config.seed)
    batch = make_batch(records, dims)
    failed = np.array([0.0 if r.correct else 1.0 for r in records])
    target = attention_targets(records)
    rng = np.random.default_rng(config.seed + 1)
    n = len(records)
    bs = config.batch_size or n

    trace = [loss_and_grads(params, batch, failed, target, config.lambda_att, want_grads=False)[0]]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            sub = Batch(batch.grid[idx], tuple(a[idx] for a in batch.aux))  # type: ignore[arg-type]
            loss, _, _, grads = loss_and_grads(params, sub, failed[idx], target[idx], config.lambda_att)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            for k, gk in grads.items():
                params.weights[k] -= config.learning_rate * gk
        epoch_loss = loss_and_grads(params, batch, failed, target, config.lambda_att, want_grads=False)[0]
        if not np.isfinite(epoch_loss):
            raise NumericalError(f"non-finite training loss at epoch {epoch}")
        trace.append(epoch_loss)
    return TrainResult(params, trace)


def predict_failure(params: JustifierParams, records: Sequence[Record]) -> np.ndarray:
    """Failure probabilities for ``records``."""
    if not records:
        return np.zeros(0)
    return forward_batch(params, make_batch(records, params.dims)).failure_prob


def failure_accuracy(params: JustifierParams, records: Sequence[Record]) -> float:
    """Share of records where ``p(failure) >= 0.5`` matches the true outcome."""
    if not records:
        raise InsufficientDataError("no records to score")
    p = predict_failure(params, records)
    failed = np.array([not r.correct for r in records])
    return float(np.mean((p >= 0.5) == failed))


@dataclass(frozen=True)
class ErrorMapResult:
    map: np.ndarray
    failure_prob: float


def input_gradient(params: JustifierParams, r: Record) -> tuple[np.ndarray, float]:
    """d(failure logit)/d(feature grid) and the failure probability."""
    cache = forward_batch(params, make_batch([r], params.dims))
    _, d_grid = backward_batch(params, cache, np.ones(1), None, want_input=True)
    return d_grid[0], float(cache.failure_prob[0])


def gradcam_error_map(params: JustifierParams, r: Record, variant: str = "gradcam") -> ErrorMapResult:
    """Error map from the failure logit's gradient w.r.t. the feature grid.

    ``variant="gradcam"`` weights each channel by its spatially averaged
    gradient; ``"grad_x_input"`` uses the elementwise product. Either way the
    map is ReLU'd and max-normalized (left all-zero if nothing is positive).
    """
    grad, prob = input_gradient(params, r)
    x = r.feature_grid
    if variant == "gradcam":
        alpha = grad.mean(axis=(0, 1))
        raw = x @ alpha
    elif variant == "grad_x_input":
        raw = (grad * x).sum(axis=2)
    else:
        raise ValueError(f"unknown gradcam variant {variant!r}")
    raw = np.maximum(raw.reshape(-1), 0.0)
    peak = raw.max()
    return ErrorMapResult(raw / peak if peak > 0 else raw, prob)


def annotate_error_maps(params: JustifierParams, ds: Dataset, split: str | None = "test",
                        variant: str = "gradcam") -> Dataset:
    """Write GradCAM error maps onto records of ``split`` (all records if None)."""
    return ds.map_records(lambda r: r.replace(error_map=gradcam_error_map(params, r, variant).map), split)
