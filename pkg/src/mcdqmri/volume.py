"""Volumetric containers, masks, tissue label maps and block tiling.

Layout is channel-major: ``data[c, x, y, z]`` in C order, so the last
spatial axis varies fastest.  NIfTI files store x fastest; the ``nifti``
module handles the transpose.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, NamedTuple, Sequence

import numpy as np

Triple = tuple[int, int, int]


class VolumeError(ValueError):
    """Base class for volume shape/coverage errors."""


class DimensionMismatchError(VolumeError):
    def __init__(self, axis: int | str, expected, got):
        self.axis = axis
        super().__init__(f"dimension mismatch on axis {axis}: expected {expected}, got {got}")


class UncoveredVoxelError(VolumeError):
    def __init__(self, index: Triple):
        self.index = index
        super().__init__(f"voxel {index} is not covered by any block")


class Tissue(IntEnum):
    BACKGROUND = 0
    WHITE_MATTER = 1
    CORTICAL_GM = 2
    DEEP_GM = 3
    CSF = 4
    CORPUS_CALLOSUM = 5


def _triple(values, name: str, cast=int) -> tuple:
    t = tuple(cast(v) for v in values)
    if len(t) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(t)}")
    return t


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense float32 volume of shape (channels, nx, ny, nz)."""

    data: np.ndarray
    voxel_size_mm: tuple[float, float, float] = (1.25, 1.25, 1.25)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 4-D and non-empty, got shape {data.shape}")
        vs = _triple(self.voxel_size_mm, "voxel_size_mm", float)
        if any(v <= 0 for v in vs):
            raise ValueError(f"voxel sizes must be positive, got {vs}")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "voxel_size_mm", vs)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> Triple:
        return tuple(self.data.shape[1:])

    def channel(self, index: int) -> np.ndarray:
        if not 0 <= index < self.channels:
            raise IndexError(f"channel {index} out of range for {self.channels}-channel volume")
        return self.data[index]

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.voxel_size_mm)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.voxel_size_mm == other.voxel_size_mm and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class Mask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool, copy=True)
        if bits.ndim != 3:
            raise ValueError(f"mask must be 3-D, got shape {bits.shape}")
        object.__setattr__(self, "bits", _frozen(bits))

    @classmethod
    def full(cls, dims: Sequence[int], value: bool = True) -> "Mask":
        return cls(np.full(tuple(dims), value, dtype=bool))

    @property
    def dims(self) -> Triple:
        return tuple(self.bits.shape)

    def count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)


@dataclass(frozen=True, eq=False)
class TissueLabels:
    labels: np.ndarray

    def __post_init__(self):
        labels = np.array(self.labels, copy=True)
        if labels.ndim != 3:
            raise ValueError(f"label map must be 3-D, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > 255):
            raise ValueError("labels must fit in an unsigned byte")
        object.__setattr__(self, "labels", _frozen(labels.astype(np.uint8)))

    @property
    def dims(self) -> Triple:
        return tuple(self.labels.shape)

    def region(self, tissue: int) -> Mask:
        return Mask(self.labels == int(tissue))

    def parenchyma(self) -> Mask:
        return Mask(self.labels > 0)

    def __eq__(self, other):
        if not isinstance(other, TissueLabels):
            return NotImplemented
        return np.array_equal(self.labels, other.labels)


@dataclass(frozen=True)
class BlockSpec:
    block_size: Triple
    stride: Triple = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        bs = _triple(self.block_size, "block_size")
        st = bs if self.stride is None else _triple(self.stride, "stride")
        for axis, (b, s) in enumerate(zip(bs, st)):
            if b < 1 or not 1 <= s <= b:
                raise ValueError(f"axis {axis}: need 1 <= stride ({s}) <= block ({b})")
        object.__setattr__(self, "block_size", bs)
        object.__setattr__(self, "stride", st)

    @classmethod
    def cubic(cls, size: int, stride: int | None = None) -> "BlockSpec":
        return cls((size,) * 3, None if stride is None else (stride,) * 3)


class Block(NamedTuple):
    block: Volume
    origin: Triple
    mask_block: Mask


def _axis_origins(dim: int, block: int, stride: int) -> list[int]:
    if dim <= block:
        return [0]
    origins = list(range(0, dim - block + 1, stride))
    if origins[-1] != dim - block:
        origins.append(dim - block)
    return origins


def block_origins(dims: Sequence[int], spec: BlockSpec) -> list[Triple]:
    """Deterministic block origins; the last block per axis is clamped to the boundary."""
    per_axis = [_axis_origins(d, b, s) for d, b, s in zip(dims, spec.block_size, spec.stride)]
    return [(i, j, k) for i in per_axis[0] for j in per_axis[1] for k in per_axis[2]]


def _check_dims(dims: Sequence[int], other: Sequence[int]) -> None:
    for axis, (a, b) in enumerate(zip(dims, other)):
        if a != b:
            raise DimensionMismatchError(axis, a, b)


def _padded(arr: np.ndarray, spatial: Sequence[int]) -> np.ndarray:
    pad = [(0, 0)] * (arr.ndim - 3) + [(0, max(0, t - s)) for s, t in zip(arr.shape[-3:], spatial)]
    return np.pad(arr, pad) if any(p[1] for p in pad) else arr


def extract_blocks(vol: Volume, mask: Mask, spec: BlockSpec, drop_empty: bool = False) -> list[Block]:
    """Cut ``vol`` into blocks; zero-pads only axes shorter than the block."""
    _check_dims(vol.dims, mask.dims)
    target = [max(d, b) for d, b in zip(vol.dims, spec.block_size)]
    data = _padded(vol.data, target)
    bits = _padded(mask.bits, target)
    bx, by, bz = spec.block_size
    out = []
    for i, j, k in block_origins(vol.dims, spec):
        mb = bits[i:i + bx, j:j + by, k:k + bz]
        if drop_empty and not mb.any():
            continue
        out.append(Block(Volume(data[:, i:i + bx, j:j + by, k:k + bz], vol.voxel_size_mm), (i, j, k), Mask(mb)))
    return out


def stitch_blocks(blocks: Iterable[tuple[Volume, Sequence[int]]], dims: Sequence[int],
                  voxel_size_mm=(1.25, 1.25, 1.25)) -> Volume:
    """Reassemble blocks; overlapping voxels get the mean of all covering values.

    Parts of a block lying beyond ``dims`` (zero padding) are discarded.
    """
    dims = _triple(dims, "dims")
    acc = None
    count = np.zeros(dims, dtype=np.int64)
    for vol, origin in blocks:
        data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
        if acc is None:
            acc = np.zeros((data.shape[0],) + dims, dtype=np.float64)
        elif data.shape[0] != acc.shape[0]:
            raise DimensionMismatchError("channel", acc.shape[0], data.shape[0])
        o = _triple(origin, "origin")
        if any(v < 0 or v >= d for v, d in zip(o, dims)):
            raise VolumeError(f"block origin {o} lies outside volume {dims}")
        sl = tuple(slice(v, min(v + s, d)) for v, s, d in zip(o, data.shape[1:], dims))
        ext = tuple(s.stop - s.start for s in sl)
        acc[(slice(None),) + sl] += data[:, :ext[0], :ext[1], :ext[2]]
        count[sl] += 1
    if acc is None:
        raise UncoveredVoxelError((0, 0, 0))
    holes = np.argwhere(count == 0)
    if len(holes):
        raise UncoveredVoxelError(tuple(int(v) for v in holes[0]))
    return Volume((acc / count).astype(np.float32), voxel_size_mm)


def masked_values(vol: Volume, mask: Mask, channel: int = 0) -> np.ndarray:
    """Values of one channel where ``mask`` is true, in row-major order."""
    _check_dims(vol.dims, mask.dims)
    return vol.channel(channel)[mask.bits]
