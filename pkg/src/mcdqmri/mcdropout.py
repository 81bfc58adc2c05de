"""Monte Carlo dropout inference: stochastic passes, running statistics, uncertainty maps."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .dunet import OUTPUT_CHANNELS, DUNet, normalize_input
from .nnengine import RngStream, derive_stream_id
from .volume import BlockSpec, Mask, Volume, extract_blocks, stitch_blocks


class EnsembleError(ValueError):
    pass


@dataclass
class Ensemble:
    """Per-element running count, mean and M2 (sum of squared deviations)."""

    count: int = 0
    mean: Optional[np.ndarray] = None
    m2: Optional[np.ndarray] = None
    channels: tuple = OUTPUT_CHANNELS

    def update(self, sample: np.ndarray) -> "Ensemble":
        x = np.asarray(sample, dtype=np.float64)
        if self.mean is None:
            self.mean = np.zeros_like(x)
            self.m2 = np.zeros_like(x)
        elif x.shape != self.mean.shape:
            raise EnsembleError(f"sample shape {x.shape} != ensemble shape {self.mean.shape}")
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)
        return self

    def variance(self) -> np.ndarray:
        if self.count < 2:
            raise EnsembleError(f"sample variance needs >= 2 passes, have {self.count}")
        return self.m2 / (self.count - 1)

    def std(self) -> np.ndarray:
        return np.sqrt(self.variance())

    def merge(self, other: "Ensemble") -> "Ensemble":
        """Combine two partial ensembles (Chan et al. pairwise update)."""
        if other.count == 0:
            return Ensemble(self.count, None if self.mean is None else self.mean.copy(),
                            None if self.m2 is None else self.m2.copy(), self.channels)
        if self.count == 0:
            return other.merge(self)
        if self.mean.shape != other.mean.shape:
            raise EnsembleError(f"cannot merge shapes {self.mean.shape} and {other.mean.shape}")
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta * delta * (self.count * other.count / n)
        return Ensemble(n, mean, m2, self.channels)


def welford_update(ens: Ensemble, sample: np.ndarray) -> Ensemble:
    return ens.update(sample)


class UncertaintyMap(NamedTuple):
    cov: Volume          # channels: FA CoV, MD CoV
    epsilon: float
    low_mean_voxels: tuple  # per channel: masked voxels whose |mean| fell below epsilon


def pass_streams(base_seed: int, pass_ids: Sequence[int], block_index: int = 0) -> list[RngStream]:
    return [RngStream(base_seed, derive_stream_id(block_index, k)) for k in pass_ids]


def mc_passes(net: DUNet, x: np.ndarray, pass_ids: Sequence[int], base_seed: int, block_index: int = 0,
              chunk: int = 10) -> np.ndarray:
    """Outputs of the given passes, shape (len(pass_ids), C, ...), in ``pass_ids`` order."""
    x = np.asarray(x)
    if x.ndim == 4:
        x = x[None]
    streams = pass_streams(base_seed, pass_ids, block_index)
    outs = []
    for i in range(0, len(streams), chunk):
        part = streams[i:i + chunk]
        y = net.forward(x, "mc_infer", part if len(part) > 1 else part[0])
        outs.append(y if y.shape[0] == len(part) else np.broadcast_to(y, (len(part),) + y.shape[1:]))
    return np.concatenate(outs)


def mc_predict(net: DUNet, x: np.ndarray, n_passes: int, base_seed: int, block_index: int = 0,
               chunk: int = 10, snapshots: Sequence[int] = ()) -> Ensemble | tuple[Ensemble, dict]:
    """Accumulate ``n_passes`` stochastic forward passes into an :class:`Ensemble`.

    Pass ``k`` uses the stream derived from ``(base_seed, block_index, k)``.
    With ``snapshots``, also returns ``{n: mean after n passes}``.
    """
    if n_passes < 1:
        raise ValueError("n_passes must be >= 1")
    ens = Ensemble()
    snaps = {}
    wanted = set(int(s) for s in snapshots)
    for start in range(0, n_passes, chunk):
        ids = range(start, min(start + chunk, n_passes))
        for y in mc_passes(net, x, ids, base_seed, block_index, chunk):
            ens.update(y)
            if ens.count in wanted:
                snaps[ens.count] = ens.mean.copy()
    return (ens, snaps) if snapshots else ens


def uncertainty_map(ens: Ensemble, mask: Optional[Mask] = None, epsilon: float = 1e-6,
                    voxel_size_mm=(1.25, 1.25, 1.25)) -> UncertaintyMap:
    """Coefficient of variation ``std / max(|mean|, epsilon)`` per voxel and channel."""
    std = ens.std()
    mean = np.abs(ens.mean)
    cov = std / np.maximum(mean, epsilon)
    bits = np.ones(cov.shape[1:], dtype=bool) if mask is None else mask.bits
    cov = np.where(bits[None], cov, 0.0)
    low = tuple(int(np.sum((mean[c] < epsilon) & bits)) for c in range(cov.shape[0]))
    return UncertaintyMap(Volume(cov, voxel_size_mm), epsilon, low)


def averaged_prediction(ens: Ensemble, voxel_size_mm=(1.25, 1.25, 1.25)) -> tuple[Volume, Volume]:
    """Ensemble-mean FA and MD; FA is clamped to [0, 1]."""
    if ens.count < 1:
        raise EnsembleError("empty ensemble")
    fa = np.clip(ens.mean[0], 0.0, 1.0)
    return Volume(fa, voxel_size_mm), Volume(ens.mean[1], voxel_size_mm)


@dataclass
class InferenceResult:
    fa: Volume
    md: Volume
    uncertainty: Optional[UncertaintyMap]
    manifest: dict
    snapshots: dict = field(default_factory=dict)  # n -> (fa, md) from the first n passes


def infer_volume(net: DUNet, inputs: Volume, mask: Mask, spec: Optional[BlockSpec] = None, n_passes: int = 100,
                 seed: int = 0, workers: int = 1, snapshots: Sequence[int] = (), epsilon: float = 1e-6,
                 chunk: int = 10) -> InferenceResult:
    """Block-wise MC-dropout inference over a whole volume.

    Per block, ``n_passes`` passes are accumulated; block means and CoV
    maps are stitched with overlap averaging and zeroed outside ``mask``.
    Uncertainty is omitted (None) when ``n_passes < 2``.
    """
    spec = spec or BlockSpec(net.cfg.block_size)
    if tuple(spec.block_size) != net.cfg.block_size:
        raise ValueError(f"block spec {spec.block_size} does not match network block {net.cfg.block_size}")
    x = Volume(normalize_input(inputs.data, mask), inputs.voxel_size_mm)
    blocks = extract_blocks(x, mask, spec)
    snapshots = sorted(int(s) for s in snapshots if 1 <= int(s) <= n_passes)

    def run(item):
        idx, blk = item
        ens, snaps = mc_predict(net, blk.block.data, n_passes, seed, idx, chunk, snapshots or (n_passes,))
        cov = uncertainty_map(ens, None, epsilon).cov.data if n_passes >= 2 else None
        return ens.mean, cov, snaps

    items = list(enumerate(blocks))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, items))
    else:
        results = [run(it) for it in items]

    vs = inputs.voxel_size_mm
    bits = mask.bits[None]

    def stitched(arrays):
        vol = stitch_blocks([(a, b.origin) for a, b in zip(arrays, blocks)], inputs.dims, vs)
        return np.where(bits, vol.data, 0.0)

    def maps(mean):
        return Volume(np.where(mask.bits, np.clip(mean[0], 0, 1), 0), vs), Volume(mean[1], vs)

    mean = stitched([r[0] for r in results])
    fa, md = maps(mean)
    unc = None
    low = None
    if n_passes >= 2:
        cov = stitched([r[1] for r in results])
        low = tuple(int(np.sum((np.abs(mean[c]) < epsilon) & mask.bits)) for c in range(mean.shape[0]))
        unc = UncertaintyMap(Volume(cov, vs), epsilon, low)
    snaps = {n: maps(stitched([r[2][n] for r in results])) for n in snapshots}
    manifest = {
        "seed": int(seed),
        "n_passes": int(n_passes),
        "n_blocks": len(blocks),
        "block_size": list(spec.block_size),
        "stride": list(spec.stride),
        "dropout_rate": net.cfg.dropout_rate,
        "active_dropout_sites": net.active_dropout_sites,
        "epsilon": epsilon,
        "low_mean_voxels": dict(zip(OUTPUT_CHANNELS, low)) if low is not None else None,
        "uncertainty": "omitted: coefficient of variation needs >= 2 passes" if unc is None else "fa_cov.nii, md_cov.nii",
        "streams": [{"block": i, "origin": list(b.origin), "pass": k, "stream_id": s.stream_id}
                    for i, b in enumerate(blocks) for k, s in enumerate(pass_streams(seed, range(n_passes), i))],
    }
    return InferenceResult(fa, md, unc, manifest, snaps)


def write_outputs(result: InferenceResult, directory: str | os.PathLike) -> list[str]:
    from . import nifti

    os.makedirs(directory, exist_ok=True)
    written = []

    def put(name, obj):
        nifti.write_nifti(obj, os.path.join(directory, name))
        written.append(name)

    put("fa_mean.nii", result.fa)
    put("md_mean.nii", result.md)
    if result.uncertainty is not None:
        cov = result.uncertainty.cov
        put("fa_cov.nii", cov.with_data(cov.data[0]))
        put("md_cov.nii", cov.with_data(cov.data[1]))
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(result.manifest, fh, indent=1, sort_keys=True)
    written.append("manifest.json")
    return written
