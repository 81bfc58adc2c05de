"""3D U-Net with dropout on the decoding path (DU-Net).

Encoder level ``i`` runs two 3x3x3 conv + ReLU blocks with
``base_kernels * 2**i`` channels and max-pools between levels.  Each
decoder level upsamples with a stride-2 transposed convolution,
concatenates the matching encoder features and runs two
conv + ReLU + dropout blocks.  A linear 1x1x1 head produces the two output
channels (FA, MD).  With ``dropout_rate == 0`` the network is an ordinary
U-Net.
"""

from __future__ import annotations

import dataclasses
import io
import json
import os
import struct
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from . import nnengine as nn
from .nnengine import DropoutConfig, ParamTensor, RngStream, ShapeError

MODES = ("train", "mc_infer", "deterministic")
OUTPUT_CHANNELS = ("FA", "MD")
CHECKPOINT_MAGIC = b"DUNETCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DUNetConfig:
    depth: int = 3
    base_kernels: int = 8
    in_channels: int = 4
    out_channels: int = 2
    dropout_rate: float = 0.2
    block_size: tuple[int, int, int] = (16, 16, 16)
    use_dropout: bool = True

    def __post_init__(self):
        object.__setattr__(self, "block_size", tuple(int(v) for v in self.block_size))
        if self.depth < 1 or self.base_kernels < 1:
            raise ValueError("depth and base_kernels must be >= 1")
        if not 0.0 <= self.dropout_rate <= 0.7:
            raise ValueError(f"dropout_rate must lie in [0, 0.7], got {self.dropout_rate}")
        factor = 2 ** (self.depth - 1)
        for axis, b in enumerate(self.block_size):
            if b < 1 or b % factor:
                raise ValueError(f"block size {b} on axis {axis} is not divisible by 2^(depth-1) = {factor}")

    @classmethod
    def full_scale(cls, **kw) -> "DUNetConfig":
        return cls(depth=5, base_kernels=32, block_size=(64, 64, 64), **kw)

    def widths(self) -> list[int]:
        return [self.base_kernels * 2 ** i for i in range(self.depth)]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["block_size"] = list(self.block_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DUNetConfig":
        return cls(**{k: (tuple(v) if k == "block_size" else v) for k, v in d.items()})


class LayerSpec(NamedTuple):
    name: str
    kind: str
    in_channels: int
    out_channels: int


def expected_param_count(cfg: DUNetConfig) -> int:
    w = cfg.widths()
    total = 0
    cin = cfg.in_channels
    for i in range(cfg.depth):
        total += cin * w[i] * 27 + w[i] + w[i] * w[i] * 27 + w[i]
        cin = w[i]
    for i in range(cfg.depth - 1):
        total += w[i + 1] * w[i] * 8 + w[i]
        total += 2 * w[i] * w[i] * 27 + w[i] + w[i] * w[i] * 27 + w[i]
    return total + w[0] * cfg.out_channels + cfg.out_channels


class DUNet:
    def __init__(self, cfg: DUNetConfig, init_seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.init_seed = int(init_seed)
        self.layers: list[LayerSpec] = []
        self.params: dict[str, ParamTensor] = {}
        self.dropout_sites: list[str] = []
        self._cache: Optional[dict] = None
        rng = np.random.default_rng(self.init_seed)
        w = cfg.widths()
        cin = cfg.in_channels
        for i in range(cfg.depth):
            self._add_conv(f"enc{i}.conv1", cin, w[i], rng, dtype)
            self._add_conv(f"enc{i}.conv2", w[i], w[i], rng, dtype)
            if i < cfg.depth - 1:
                self.layers.append(LayerSpec(f"enc{i}.pool", "maxpool", w[i], w[i]))
            cin = w[i]
        for i in reversed(range(cfg.depth - 1)):
            self._add_param(f"dec{i}.up.w", rng.normal(0, np.sqrt(2 / w[i + 1]), (w[i + 1], w[i], 2, 2, 2)), dtype)
            self._add_param(f"dec{i}.up.b", np.zeros(w[i]), dtype)
            self.layers.append(LayerSpec(f"dec{i}.up", "convtranspose", w[i + 1], w[i]))
            self.layers.append(LayerSpec(f"dec{i}.concat", "concat", 2 * w[i], 2 * w[i]))
            self._add_conv(f"dec{i}.conv1", 2 * w[i], w[i], rng, dtype, dropout=True)
            self._add_conv(f"dec{i}.conv2", w[i], w[i], rng, dtype, dropout=True)
        self._add_param("head.w", rng.normal(0, np.sqrt(2 / w[0]), (cfg.out_channels, w[0])), dtype)
        self._add_param("head.b", np.zeros(cfg.out_channels), dtype)
        self.layers.append(LayerSpec("head", "conv1x1", w[0], cfg.out_channels))

    def _add_param(self, name, value, dtype):
        self.params[name] = ParamTensor(name, np.ascontiguousarray(value, dtype=dtype))

    def _add_conv(self, name, cin, cout, rng, dtype, dropout=False):
        self._add_param(f"{name}.w", rng.normal(0, np.sqrt(2 / (cin * 27)), (cout, cin, 3, 3, 3)), dtype)
        self._add_param(f"{name}.b", np.zeros(cout), dtype)
        self.layers.append(LayerSpec(name, "conv3d", cin, cout))
        self.layers.append(LayerSpec(f"{name}.relu", "relu", cout, cout))
        if dropout and self.cfg.use_dropout:
            self.dropout_sites.append(f"{name}.drop")
            self.layers.append(LayerSpec(f"{name}.drop", "dropout", cout, cout))

    # -- bookkeeping --------------------------------------------------------

    @property
    def dropout(self) -> DropoutConfig:
        return DropoutConfig(self.cfg.dropout_rate)

    @property
    def active_dropout_sites(self) -> int:
        return len(self.dropout_sites) if self.cfg.dropout_rate > 0 else 0

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.value.shape:
                raise ShapeError(f"{k}: state shape {state[k].shape} != {p.value.shape}")
            p.value[...] = state[k]

    def astype(self, dtype) -> "DUNet":
        net = DUNet.__new__(DUNet)
        net.cfg, net.init_seed, net.layers = self.cfg, self.init_seed, list(self.layers)
        net.dropout_sites = list(self.dropout_sites)
        net.params = {k: ParamTensor(k, p.value.astype(dtype)) for k, p in self.params.items()}
        net._cache = None
        return net

    def copy(self) -> "DUNet":
        return self.astype(next(iter(self.params.values())).value.dtype)

    def with_dropout_rate(self, p: float) -> "DUNet":
        net = self.copy()
        net.cfg = dataclasses.replace(self.cfg, dropout_rate=p)
        return net

    # -- execution ----------------------------------------------------------

    def _conv(self, name, h, cache):
        w, b = self.params[f"{name}.w"].value, self.params[f"{name}.b"].value
        if cache is None:
            return nn.conv3d(h, w, b)
        y, cols = nn.conv3d(h, w, b, return_cols=True)
        cache[name] = (h, cols)
        return y

    def _relu(self, name, h, cache):
        if cache is not None:
            cache[name] = h
        return nn.relu(h)

    def _drop(self, name, site, h, active, streams, cache):
        if not active:
            return h
        if isinstance(streams, RngStream):
            gens = streams.generator(site)
        else:
            if h.shape[0] == 1 and len(streams) > 1:
                h = np.repeat(h, len(streams), axis=0)
            gens = [s.generator(site) for s in streams]
        y, mask = nn.dropout(h, self.dropout, gens, active=True)
        if cache is not None:
            cache[name] = mask
        return y

    def forward(self, x: np.ndarray, mode: str = "deterministic",
                rng: Union[RngStream, Sequence[RngStream], None] = None) -> np.ndarray:
        """Run the network on ``x`` of shape (B, in_channels, *block_size).

        In ``mc_infer`` mode ``rng`` may be a list of streams, one per
        Monte Carlo pass; with a batch-1 input the deterministic prefix is
        computed once and the batch fans out at the first dropout site.
        """
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        squeeze = x.ndim == 4
        if squeeze:
            x = x[None]
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels or tuple(x.shape[2:]) != self.cfg.block_size:
            raise ShapeError(f"expected input (B, {self.cfg.in_channels}, {self.cfg.block_size}), got {x.shape}")
        active = mode != "deterministic" and self.active_dropout_sites > 0
        if active and rng is None:
            raise ValueError(f"mode {mode!r} with active dropout needs an RngStream")
        dtype = next(iter(self.params.values())).value.dtype
        cache = {} if mode == "train" else None
        h = np.asarray(x, dtype=dtype)
        depth = self.cfg.depth
        skips = []
        for i in range(depth):
            h = self._relu(f"enc{i}.conv1.relu", self._conv(f"enc{i}.conv1", h, cache), cache)
            h = self._relu(f"enc{i}.conv2.relu", self._conv(f"enc{i}.conv2", h, cache), cache)
            if i < depth - 1:
                skips.append(h)
                h, idx = nn.maxpool3d(h)
                if cache is not None:
                    cache[f"enc{i}.pool"] = idx
        site = 0
        for i in reversed(range(depth - 1)):
            up_in = h
            h = nn.convtranspose3d(h, self.params[f"dec{i}.up.w"].value, self.params[f"dec{i}.up.b"].value)
            if cache is not None:
                cache[f"dec{i}.up"] = up_in
            h = nn.concat_channels(h, skips[i])
            for j in (1, 2):
                name = f"dec{i}.conv{j}"
                h = self._relu(f"{name}.relu", self._conv(name, h, cache), cache)
                if self.cfg.use_dropout:
                    h = self._drop(f"{name}.drop", site, h, active, rng, cache)
                    site += 1
        if cache is not None:
            cache["head"] = h
        out = nn.conv1x1(h, self.params["head.w"].value, self.params["head.b"].value)
        if mode != "train" and not isinstance(rng, (RngStream, type(None))) and out.shape[0] == 1 < len(rng):
            out = np.repeat(out, len(rng), axis=0)
        self._cache = cache
        return out[0] if squeeze else out

    def backward(self, dy: np.ndarray) -> np.ndarray:
        """Backpropagate ``dy`` through the last train-mode forward; accumulates parameter grads."""
        cache = self._cache
        if cache is None:
            raise RuntimeError("backward requires a preceding forward in train mode")
        squeeze = dy.ndim == 4
        if squeeze:
            dy = dy[None]
        P = self.params

        def conv_back(name, g):
            x, cols = cache[name]
            dx, dw, db = nn.conv3d_backward(g, x, P[f"{name}.w"].value, cols)
            P[f"{name}.w"].grad += dw
            P[f"{name}.b"].grad += db
            return dx

        dx, dw, db = nn.conv1x1_backward(dy, cache["head"], P["head.w"].value)
        P["head.w"].grad += dw
        P["head.b"].grad += db
        g = dx
        depth = self.cfg.depth
        skip_grads = {}
        for i in range(depth - 1):
            w_i = self.cfg.widths()[i]
            for j in (2, 1):
                name = f"dec{i}.conv{j}"
                if self.cfg.use_dropout and f"{name}.drop" in cache:
                    g = nn.dropout_backward(g, cache[f"{name}.drop"], self.dropout)
                g = nn.relu_backward(g, cache[f"{name}.relu"])
                g = conv_back(name, g)
            g_up, skip_grads[i] = nn.concat_backward(g, w_i)
            dx, dw, db = nn.convtranspose3d_backward(g_up, cache[f"dec{i}.up"], P[f"dec{i}.up.w"].value)
            P[f"dec{i}.up.w"].grad += dw
            P[f"dec{i}.up.b"].grad += db
            g = dx
        for i in reversed(range(depth)):
            if i < depth - 1:
                g = nn.maxpool3d_backward(g, cache[f"enc{i}.pool"]) + skip_grads[i]
            for j in (2, 1):
                name = f"enc{i}.conv{j}"
                g = nn.relu_backward(g, cache[f"{name}.relu"])
                g = conv_back(name, g)
        return g[0] if squeeze else g


def build_dunet(cfg: DUNetConfig, init_seed: int = 0) -> DUNet:
    return DUNet(cfg, init_seed)


def build_unet(cfg: DUNetConfig, init_seed: int = 0) -> DUNet:
    """Plain U-Net: same layout and initialization, no dropout sites."""
    return DUNet(dataclasses.replace(cfg, use_dropout=False), init_seed)


def masked_l1(pred: np.ndarray, target: np.ndarray, mask) -> tuple[float, np.ndarray]:
    """Mean absolute error over masked voxels and all channels, with its (sub)gradient.

    ``pred``/``target`` are (C, X, Y, Z) or (B, C, X, Y, Z); ``mask`` is
    boolean over the spatial (and optional batch) axes.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    bits = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    bits = bits[:, None] if pred.ndim == 5 and bits.ndim == 4 else bits[None] if pred.ndim == 4 else bits[None, None]
    count = int(np.broadcast_to(bits, pred.shape).sum())
    if count == 0:
        raise ValueError("masked_l1 needs a non-empty mask")
    diff = (pred.astype(np.float64) - target) * bits
    loss = float(np.abs(diff).sum() / count)
    return loss, (np.sign(diff) / count).astype(pred.dtype)


def normalize_input(data: np.ndarray, mask) -> np.ndarray:
    """Scale all input channels by the median in-mask b=0 intensity (channel 0)."""
    data = np.asarray(data, dtype=np.float32)
    bits = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    ref = data[0][bits] if bits.any() else data[0][data[0] > 0]
    scale = float(np.median(ref)) if ref.size else 1.0
    return data / np.float32(scale if scale > 0 else 1.0)


# -- checkpoints --------------------------------------------------------------

def checkpoint_bytes(net: DUNet) -> bytes:
    buf = io.BytesIO()
    meta = json.dumps({"config": net.cfg.to_dict(), "init_seed": net.init_seed}, sort_keys=True).encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(net.params)))
    for name, p in net.params.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", p.value.ndim) + struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        buf.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
    return buf.getvalue()


class CheckpointError(ValueError):
    pass


def checkpoint_from_bytes(data: bytes) -> DUNet:
    try:
        return _parse_checkpoint(memoryview(data))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc


def _parse_checkpoint(view: memoryview) -> DUNet:
    if bytes(view[:8]) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a DU-Net checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<II", view, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(bytes(view[pos:pos + meta_len]))
    pos += meta_len
    net = DUNet(DUNetConfig.from_dict(meta["config"]), meta["init_seed"])
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    if count != len(net.params):
        raise CheckpointError(f"checkpoint holds {count} tensors, network expects {len(net.params)}")
    for _ in range(count):
        (n,) = struct.unpack_from("<H", view, pos)
        name = bytes(view[pos + 2:pos + 2 + n]).decode()
        pos += 2 + n
        (ndim,) = struct.unpack_from("<B", view, pos)
        shape = struct.unpack_from(f"<{ndim}I", view, pos + 1)
        pos += 1 + 4 * ndim
        size = int(np.prod(shape)) * 4
        if pos + size > len(view):
            raise CheckpointError(f"checkpoint truncated inside tensor {name}")
        if name not in net.params or net.params[name].value.shape != tuple(shape):
            raise CheckpointError(f"unexpected tensor {name} with shape {shape}")
        net.params[name].value[...] = np.frombuffer(view[pos:pos + size], "<f4").reshape(shape)
        pos += size
    return net


def save_checkpoint(net: DUNet, path: str | os.PathLike) -> int:
    data = checkpoint_bytes(net)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_checkpoint(path: str | os.PathLike) -> DUNet:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
