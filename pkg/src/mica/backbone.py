"""Patch-based forecasting backbone around the gated attention blocks.

Pipeline per window: instance-standardize each channel, slice into patches
(end-padded by replicating the last value), embed patches, add fixed
sin/cos positional encodings, run the encoder stack (channels stay
separate except inside the global attention path), flatten patch states,
and project to the horizon.  Predictions are de-standardized back to the
original units, so losses and metrics are in data units.
"""
from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .attention import (AttentionOutput, LocalAttention, MicaAttention,
                        MicaConfig, make_gate)
from .nn import FeedForward, LayerNorm, Linear, Module, dropout
from .tensor import ShapeError, Tensor, gather_last

HEAD_KINDS = ("shared_linear", "multivariate")


class IntegrityError(RuntimeError):
    """Raised when a parameter file is malformed or does not match."""


@dataclass
class ModelConfig:
    """Backbone hyperparameters; ``mica=None`` gives the local-only baseline."""
    horizon: int
    input_size: int | None = None  # defaults to 2 * horizon
    n_layers: int = 4
    d_model: int = 256
    n_heads: int = 4
    ff_hidden: int = 1024
    d_k: int = 32
    d_v: int = 32
    patch_len: int = 8
    stride: int = 8
    dropout: float = 0.0
    head_kind: str = "shared_linear"
    mica: MicaConfig | None = None

    def __post_init__(self):
        if self.input_size is None:
            self.input_size = 2 * self.horizon
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if min(self.d_model, self.n_heads, self.ff_hidden, self.d_k,
               self.d_v, self.patch_len, self.stride) < 1:
            raise ValueError("model dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind '{self.head_kind}'")
        if self.mica is not None:
            for attr in ("n_heads", "d_k", "d_v"):
                if getattr(self.mica, attr) != getattr(self, attr):
                    raise ValueError(
                        f"mica.{attr} disagrees with the backbone setting")


# -- windowing helpers --------------------------------------------------------

def patch_count(length: int, patch_len: int, stride: int) -> int:
    """Number of patches after end-padding to stride alignment."""
    if patch_len > length:
        raise ShapeError(
            f"patch_len {patch_len} exceeds window length {length}")
    return int(np.ceil((length - patch_len) / stride)) + 1


def patch_indices(length: int, patch_len: int, stride: int) -> np.ndarray:
    """(P, patch_len) gather indices; clamping to the last sample implements
    end-padding by replication."""
    p = patch_count(length, patch_len, stride)
    starts = np.arange(p) * stride
    idx = starts[:, None] + np.arange(patch_len)[None, :]
    return np.minimum(idx, length - 1)


def patchify(y, patch_len: int, stride: int):
    """(B,C,L) -> (B,C,P,patch_len); works on Tensor (tape) or ndarray."""
    length = y.shape[-1]
    idx = patch_indices(length, patch_len, stride)
    if isinstance(y, Tensor):
        return gather_last(y, idx)
    return np.asarray(y)[..., idx]


def sincos_table(n_positions: int, dim: int) -> np.ndarray:
    """Fixed interleaved sin/cos positional encodings, shape (P, dim)."""
    if dim % 2:
        raise ValueError("positional encoding dim must be even")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    rates = 1.0 / np.power(10000.0, np.arange(0, dim, 2) / dim)
    table = np.zeros((n_positions, dim))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates)
    return table


@dataclass
class InstanceStats:
    """Per-window per-channel mean/std used to undo standardization."""
    mean: np.ndarray  # (B,C,1)
    std: np.ndarray   # (B,C,1)


def standardize(y: np.ndarray,
                floor: float = 1e-8) -> tuple[np.ndarray, InstanceStats]:
    """Zero-mean unit-variance per (window, channel); std floored at 1e-8."""
    y = np.asarray(y, dtype=np.float64)
    mean = y.mean(axis=-1, keepdims=True)
    std = np.maximum(y.std(axis=-1, keepdims=True), floor)
    return (y - mean) / std, InstanceStats(mean=mean, std=std)


def destandardize(pred, stats: InstanceStats):
    """Map standardized predictions back to data units."""
    if isinstance(pred, Tensor):
        return pred * Tensor(stats.std) + Tensor(stats.mean)
    return pred * stats.std + stats.mean


# -- model ---------------------------------------------------------------------

class EncoderLayer(Module):
    """Attention block then feed-forward, each with residual + layer norm."""

    def __init__(self, d_model: int, ff_hidden: int, attn: Module,
                 rng: np.random.Generator, p_drop: float = 0.0):
        self.attn = attn
        self.norm1 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ff_hidden, rng)
        self.norm2 = LayerNorm(d_model)
        self._p_drop = p_drop

    def __call__(self, x: Tensor, mix_override=None, training: bool = False,
                 rng=None) -> tuple[Tensor, AttentionOutput]:
        res = self.attn(x, mix_override=mix_override, training=training,
                        rng=rng)
        h = self.norm1(x + dropout(res.out, self._p_drop, training, rng))
        out = self.norm2(h + dropout(self.ffn(h), self._p_drop, training, rng))
        return out, res


class MultivariateHead(Module):
    """Separate affine horizon projection per channel."""

    def __init__(self, n_channels: int, in_dim: int, horizon: int,
                 rng: np.random.Generator):
        limit = np.sqrt(6.0 / (in_dim + horizon))
        self.weight = Tensor(
            rng.uniform(-limit, limit, size=(n_channels, in_dim, horizon)),
            requires_grad=True)
        self.bias = Tensor(np.zeros((n_channels, 1, horizon)),
                           requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        b, c, in_dim = x.shape
        h = x.reshape(b, c, 1, in_dim) @ self.weight + self.bias
        return h.reshape(b, c, self.weight.shape[-1])


class ForecastModel(Module):
    """Channel-separate patch transformer with an optional global path."""

    def __init__(self, cfg: ModelConfig, n_channels: int, seed: int = 0):
        if n_channels < 1:
            raise ValueError("n_channels must be positive")
        rng = np.random.default_rng(seed)
        self._cfg = cfg
        self._n_channels = n_channels
        self.n_patches = patch_count(cfg.input_size, cfg.patch_len, cfg.stride)

        self.embed = Linear(cfg.patch_len, cfg.d_model, rng)
        self._posenc = Tensor(sincos_table(self.n_patches, cfg.d_model))

        self.gates: list[Module] = []
        blocks = []
        for i in range(cfg.n_layers):
            if cfg.mica is None:
                blocks.append(LocalAttention(cfg.d_model, cfg.n_heads,
                                             cfg.d_k, cfg.d_v, rng))
                continue
            if cfg.mica.layerwise or i == 0:
                self.gates.append(make_gate(cfg.mica, rng, n_channels))
            gate = self.gates[-1]
            blocks.append(MicaAttention(cfg.d_model, cfg.mica, rng,
                                        n_channels=n_channels, gate=gate))
        self.layers = [EncoderLayer(cfg.d_model, cfg.ff_hidden, blk, rng,
                                    cfg.dropout) for blk in blocks]

        flat_dim = self.n_patches * cfg.d_model
        if cfg.head_kind == "multivariate":
            self.head = MultivariateHead(n_channels, flat_dim, cfg.horizon,
                                         rng)
        else:
            self.head = Linear(flat_dim, cfg.horizon, rng)

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def n_channels(self) -> int:
        return self._n_channels

    def forward(self, y: np.ndarray, mix_override: float | None = None,
                training: bool = False, rng=None,
                collect: list | None = None) -> Tensor:
        """(B,C,L) window -> (B,C,H) forecast in original units."""
        y = np.asarray(y, dtype=np.float64)
        cfg = self._cfg
        if y.ndim != 3:
            raise ShapeError(f"expected (B,C,L) input, got shape {y.shape}")
        if y.shape[1] != self._n_channels:
            raise ShapeError(
                f"model built for {self._n_channels} channels, got {y.shape[1]}")
        if y.shape[2] != cfg.input_size:
            raise ShapeError(
                f"window length {y.shape[2]} != input_size {cfg.input_size}")
        y_std, stats = standardize(y)
        tokens = patchify(y_std, cfg.patch_len, cfg.stride)
        h = self.embed(Tensor(tokens)) + self._posenc
        for layer in self.layers:
            h, res = layer(h, mix_override=mix_override, training=training,
                           rng=rng)
            if collect is not None:
                collect.append(res)
        b = y.shape[0]
        flat = h.reshape(b, self._n_channels,
                         self.n_patches * cfg.d_model)
        pred = self.head(flat)
        return destandardize(pred, stats)

    __call__ = forward


# -- parameter serialization ----------------------------------------------------

_MAGIC = b"MICAF001"
_VERSION = 1


def config_digest(cfg: ModelConfig, n_channels: int) -> str:
    """Stable sha256 over the flattened config plus the channel count."""
    items = {"n_channels": n_channels}
    for key, val in sorted(dataclasses.asdict(cfg).items()):
        if isinstance(val, dict):
            for sub, sval in sorted(val.items()):
                items[f"{key}.{sub}"] = sval
        else:
            items[key] = val
    blob = "\n".join(f"{k}={v!r}" for k, v in sorted(items.items()))
    return hashlib.sha256(blob.encode()).hexdigest()


def save_params(path, model: Module, digest: str) -> None:
    """Write parameters as float64 little-endian with a config digest."""
    arrays = model.state_arrays()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(bytes.fromhex(digest))
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f8").tobytes())


def load_params(path) -> tuple[str, dict[str, np.ndarray]]:
    """Read a parameter file; returns (stored digest, name -> array)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise IntegrityError(f"truncated parameter file '{path}'")
        out = blob[off:off + n]
        off += n
        return out

    if take(len(_MAGIC)) != _MAGIC:
        raise IntegrityError(f"'{path}' is not a parameter file")
    (version,) = struct.unpack("<I", take(4))
    if version != _VERSION:
        raise IntegrityError(f"unsupported parameter file version {version}")
    digest = take(32).hex()
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        n_items = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * n_items), dtype="<f8").reshape(shape)
        arrays[name] = arr.astype(np.float64)
    if off != len(blob):
        raise IntegrityError(f"trailing bytes in parameter file '{path}'")
    return digest, arrays
