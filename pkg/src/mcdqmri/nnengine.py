"""Small numpy tensor engine with hand-written backward passes.

Arrays are plain ``numpy.ndarray`` in (batch, channels, x, y, z) layout.
The production path is float32; every op is dtype-preserving so that
gradient checks can run the same code in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np


class ShapeError(ValueError):
    pass


@dataclass
class ParamTensor:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self) -> None:
        self.grad[...] = 0


@dataclass(frozen=True)
class DropoutConfig:
    p: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.p <= 0.95:
            raise ValueError(f"dropout rate must lie in [0, 0.95], got {self.p}")


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream: (seed, stream_id, site) fully determines the bits.

    Each dropout site draws from its own Philox generator keyed on the
    triple, so passes can be evaluated in any order or concurrently.
    """

    seed: int
    stream_id: int

    def generator(self, site: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, self.stream_id, site])))


def derive_stream_id(*counters: int) -> int:
    """64-bit stream id hashed from integer counters (e.g. block and pass index)."""
    state = np.random.SeedSequence(list(counters)).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


Rng = Union[np.random.Generator, Sequence[np.random.Generator]]


# -- convolution ------------------------------------------------------------

def im2col3(x: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3x3 patches as a (27*C, B*X*Y*Z) matrix, offset-major rows."""
    B, C, X, Y, Z = x.shape
    xp = np.zeros((B, C, X + 2, Y + 2, Z + 2), x.dtype)
    xp[:, :, 1:-1, 1:-1, 1:-1] = x
    cols = np.empty((27, C, B, X, Y, Z), x.dtype)
    k = 0
    for a in range(3):
        for b in range(3):
            for c in range(3):
                cols[k] = xp[:, :, a:a + X, b:b + Y, c:c + Z].transpose(1, 0, 2, 3, 4)
                k += 1
    return cols.reshape(27 * C, B * X * Y * Z)


def _check_conv(x: np.ndarray, w: np.ndarray) -> None:
    if x.ndim != 5:
        raise ShapeError(f"expected (batch, channels, x, y, z) input, got shape {x.shape}")
    if w.ndim != 5 or w.shape[2:] != (3, 3, 3):
        raise ShapeError(f"expected (out, in, 3, 3, 3) weights, got {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, weights expect {w.shape[1]}")


def conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray, return_cols: bool = False):
    """3x3x3 convolution, stride 1, zero padding 1 (output keeps spatial shape)."""
    _check_conv(x, w)
    B, _, X, Y, Z = x.shape
    O = w.shape[0]
    cols = im2col3(x)
    wm = w.transpose(0, 2, 3, 4, 1).reshape(O, -1)
    y = (wm @ cols).reshape(O, B, X, Y, Z).transpose(1, 0, 2, 3, 4)
    y = y + b.reshape(1, O, 1, 1, 1)
    return (y, cols) if return_cols else y


def conv3d_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray, cols: Optional[np.ndarray] = None):
    """Gradients (dx, dw, db) of :func:`conv3d`."""
    _check_conv(x, w)
    B, _, X, Y, Z = x.shape
    O = w.shape[0]
    if dy.shape != (B, O, X, Y, Z):
        raise ShapeError(f"dy shape {dy.shape} does not match forward output {(B, O, X, Y, Z)}")
    if cols is None:
        cols = im2col3(x)
    dym = dy.transpose(1, 0, 2, 3, 4).reshape(O, -1)
    dw = (dym @ cols.T).reshape(O, 3, 3, 3, -1).transpose(0, 4, 1, 2, 3)
    db = dym.sum(axis=1)
    # adjoint of a same-padded correlation: correlate with the flipped, transposed kernel
    w_adj = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    dx = conv3d(dy, w_adj, np.zeros(w.shape[1], dtype=w.dtype))
    return dx, np.ascontiguousarray(dw), db


def conv1x1(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pointwise convolution; ``w`` has shape (out, in)."""
    y = np.einsum("oc,bcxyz->boxyz", w, x, optimize=True)
    return y + b.reshape(1, -1, 1, 1, 1)


def conv1x1_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    dx = np.einsum("oc,boxyz->bcxyz", w, dy, optimize=True)
    dw = np.einsum("boxyz,bcxyz->oc", dy, x, optimize=True)
    return dx, dw, dy.sum(axis=(0, 2, 3, 4))


# -- pooling / upsampling ---------------------------------------------------

def _windows(x: np.ndarray) -> np.ndarray:
    B, C, X, Y, Z = x.shape
    if X % 2 or Y % 2 or Z % 2:
        raise ShapeError(f"max pooling needs even spatial dims, got {(X, Y, Z)}")
    w = x.reshape(B, C, X // 2, 2, Y // 2, 2, Z // 2, 2)
    return w.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(B, C, X // 2, Y // 2, Z // 2, 8)


def maxpool3d(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2x2 max pooling, stride 2.  Ties resolve to the first index in scan order."""
    win = _windows(x)
    idx = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool3d_backward(dy: np.ndarray, idx: np.ndarray) -> np.ndarray:
    B, C, X, Y, Z = dy.shape
    onehot = np.zeros((B, C, X, Y, Z, 8), dy.dtype)
    np.put_along_axis(onehot, idx[..., None], dy[..., None], axis=-1)
    dx = onehot.reshape(B, C, X, Y, Z, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return dx.reshape(B, C, 2 * X, 2 * Y, 2 * Z)


def convtranspose3d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Transposed convolution with kernel 2x2x2 and stride 2; ``w`` is (in, out, 2, 2, 2).

    Each input voxel paints its own disjoint 2x2x2 output block.
    """
    if x.ndim != 5 or w.ndim != 5 or w.shape[2:] != (2, 2, 2):
        raise ShapeError(f"bad shapes for transposed conv: x {x.shape}, w {w.shape}")
    if w.shape[0] != x.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, weights expect {w.shape[0]}")
    B, C, X, Y, Z = x.shape
    O = w.shape[1]
    xm = x.transpose(1, 0, 2, 3, 4).reshape(C, -1)
    ym = w.reshape(C, O * 8).T @ xm
    y = ym.reshape(O, 2, 2, 2, B, X, Y, Z).transpose(4, 0, 5, 1, 6, 2, 7, 3)
    return y.reshape(B, O, 2 * X, 2 * Y, 2 * Z) + b.reshape(1, O, 1, 1, 1)


def convtranspose3d_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    B, C, X, Y, Z = x.shape
    O = w.shape[1]
    if dy.shape != (B, O, 2 * X, 2 * Y, 2 * Z):
        raise ShapeError(f"dy shape {dy.shape} does not match forward output")
    dym = dy.reshape(B, O, X, 2, Y, 2, Z, 2).transpose(1, 3, 5, 7, 0, 2, 4, 6).reshape(O * 8, -1)
    xm = x.transpose(1, 0, 2, 3, 4).reshape(C, -1)
    wm = w.reshape(C, O * 8)
    dx = (wm @ dym).reshape(C, B, X, Y, Z).transpose(1, 0, 2, 3, 4)
    dw = (xm @ dym.T).reshape(w.shape)
    return dx, dw, dy.sum(axis=(0, 2, 3, 4))


# -- elementwise ------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, dy, 0).astype(dy.dtype)


def dropout_mask(shape, p: float, rng: Rng) -> np.ndarray:
    """Boolean keep-mask, keep probability 1 - p.  A sequence of generators draws one row per batch item."""
    if isinstance(rng, np.random.Generator):
        return rng.random(shape, dtype=np.float32) >= np.float32(p)
    rngs = list(rng)
    if len(rngs) != shape[0]:
        raise ShapeError(f"{len(rngs)} generators for batch of {shape[0]}")
    return np.stack([g.random(shape[1:], dtype=np.float32) >= np.float32(p) for g in rngs])


def dropout(x: np.ndarray, cfg: DropoutConfig, rng: Optional[Rng] = None, active: bool = True,
            mask: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Inverted dropout: kept units are scaled by 1/(1-p) so E[y] = x.

    Returns ``(y, keep_mask)``.  An explicit ``mask`` overrides sampling.
    """
    if not active or cfg.p == 0.0:
        return x, np.ones(x.shape, dtype=bool)
    if mask is None:
        if rng is None:
            raise ValueError("active dropout needs a random generator or an explicit mask")
        mask = dropout_mask(x.shape, cfg.p, rng)
    mask = np.asarray(mask, dtype=bool)
    scale = x.dtype.type(1.0 / (1.0 - cfg.p))
    return x * mask * scale, mask


def dropout_backward(dy: np.ndarray, mask: np.ndarray, cfg: DropoutConfig) -> np.ndarray:
    if cfg.p == 0.0:
        return dy
    return dy * mask * dy.dtype.type(1.0 / (1.0 - cfg.p))


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        if a.shape[2:] == b.shape[2:] and 1 in (a.shape[0], b.shape[0]):
            n = max(a.shape[0], b.shape[0])
            a = np.broadcast_to(a, (n,) + a.shape[1:])
            b = np.broadcast_to(b, (n,) + b.shape[1:])
        else:
            raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


def concat_backward(dy: np.ndarray, channels_a: int) -> tuple[np.ndarray, np.ndarray]:
    return dy[:, :channels_a], dy[:, channels_a:]


# -- verification -----------------------------------------------------------

def grad_check(loss_fn: Callable[[], float], arrays: Mapping[str, np.ndarray],
               analytic: Mapping[str, np.ndarray], epsilon: float = 1e-4,
               max_entries: Optional[int] = None, seed: int = 0) -> dict[str, float]:
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` must read the (float64) arrays in ``arrays``, which are
    perturbed in place.  Returns the max relative error per array, where
    the relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``
    and ``floor`` is 1e-6 times the largest gradient magnitude of that
    array.  ``max_entries`` samples a random subset of entries per array.
    """
    rng = np.random.default_rng(seed)
    report = {}
    for name, arr in arrays.items():
        if arr.dtype != np.float64:
            raise TypeError(f"{name}: gradient checks require float64 arrays")
        if not arr.flags.c_contiguous:
            raise ValueError(f"{name}: array must be C-contiguous to be perturbed in place")
        ana = np.asarray(analytic[name], dtype=np.float64)
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_fn()
            flat[i] = orig - epsilon
            down = loss_fn()
            flat[i] = orig
            num[j] = (up - down) / (2 * epsilon)
        a = ana.reshape(-1)[idx]
        floor = 1e-6 * max(np.max(np.abs(a)), np.max(np.abs(num)), 1e-300)
        rel = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        report[name] = float(rel.max()) if rel.size else 0.0
    return report
