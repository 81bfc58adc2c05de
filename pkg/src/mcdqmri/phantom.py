"""Synthetic brain-like diffusion phantoms with known tensors.

Geometry is analytic (ellipsoids, tubes and an arched slab) in normalized
coordinates ``u in [-1, 1]^3`` with x = left-right, y = anterior-posterior
and z = inferior-superior.  Ground-truth FA/MD maps are obtained by
fitting the noiseless full acquisition, not copied from the generating
tensors.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nifti
from .dti import DiffusionScheme, fit_volume
from .volume import Mask, Tissue, TissueLabels, Volume

ORTHOGONAL_DIRECTIONS = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

LETTER_M = np.array([
    [1, 0, 0, 0, 0, 0, 1],
    [1, 1, 0, 0, 0, 1, 1],
    [1, 0, 1, 0, 1, 0, 1],
    [1, 0, 0, 1, 0, 0, 1],
    [1, 0, 0, 0, 0, 0, 1],
    [1, 0, 0, 0, 0, 0, 1],
    [1, 0, 0, 0, 0, 0, 1],
], dtype=bool)

DATASET_FILES = ("dwi_full.nii", "dwi_input.nii", "fa_gt.nii", "md_gt.nii", "labels.nii", "mask.nii", "scheme.txt")


class PhantomError(ValueError):
    pass


class EmptyTissueError(PhantomError):
    def __init__(self, tissue: Tissue):
        self.tissue = tissue
        super().__init__(f"phantom geometry leaves tissue {tissue.name.lower()} empty")


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 32, 32)
    voxel_size_mm: tuple[float, float, float] = (1.25, 1.25, 1.25)
    seed: int = 0
    # geometry, normalized units
    brain_radii: tuple[float, float, float] = (0.86, 0.8, 0.76)
    cortex_thickness: float = 0.18
    geometry_jitter: float = 0.05
    ventricle_radii: tuple[float, float, float] = (0.1, 0.28, 0.13)
    ventricle_offset: float = 0.13
    deep_gm_radii: tuple[float, float, float] = (0.16, 0.2, 0.14)
    deep_gm_offset: tuple[float, float, float] = (0.27, 0.0, -0.22)
    cc_half_width: float = 0.42
    cc_half_length: float = 0.3
    cc_height: float = 0.25
    cc_curvature: float = 0.6
    cc_thickness: float = 0.14
    tract_count: int = 3
    tract_radius: float = 0.1
    # tensor priors, um^2/ms
    wm_parallel: tuple[float, float] = (1.4, 1.8)
    wm_perpendicular: tuple[float, float] = (0.2, 0.4)
    gm_diffusivity: tuple[float, float] = (0.7, 0.9)
    deep_gm_diffusivity: tuple[float, float] = (0.6, 0.8)
    deep_gm_max_fa: float = 0.25
    csf_diffusivity: tuple[float, float] = (2.5, 3.0)
    cc_parallel: tuple[float, float] = (1.6, 1.9)
    cc_perpendicular: tuple[float, float] = (0.15, 0.3)
    # b=0 intensities per tissue
    s0_wm: float = 900.0
    s0_gm: float = 1100.0
    s0_deep_gm: float = 1000.0
    s0_csf: float = 2000.0
    s0_cc: float = 850.0
    noise_sigma: float = 20.0
    # acquisition
    n_b0: int = 6
    n_directions: int = 30
    b_value: float = 1.0

    def __post_init__(self):
        if min(self.dims) < 16:
            raise PhantomError(f"phantom dims must be >= 16 per axis, got {self.dims}")
        if self.n_directions < 6 or self.n_b0 < 1:
            raise PhantomError("need at least 1 b=0 volume and 6 directions")
        ranges = [self.wm_parallel, self.wm_perpendicular, self.gm_diffusivity, self.deep_gm_diffusivity,
                  self.csf_diffusivity, self.cc_parallel, self.cc_perpendicular]
        if any(lo <= 0 or hi < lo for lo, hi in ranges):
            raise PhantomError("diffusivity priors must be positive intervals")
        if self.noise_sigma < 0:
            raise PhantomError("noise_sigma must be >= 0")

    def replace(self, **changes) -> "PhantomSpec":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class PhantomDataset:
    full_dwi: Volume
    input_dwi: Volume
    gt_fa: Volume
    gt_md: Volume
    labels: TissueLabels
    mask: Mask
    scheme: DiffusionScheme
    true_tensors: Optional[np.ndarray] = field(default=None, repr=False)
    artifact_mask: Optional[Mask] = None

    def with_input(self, input_dwi: Volume, artifact_mask: Optional[Mask] = None) -> "PhantomDataset":
        return dataclasses.replace(self, input_dwi=input_dwi, artifact_mask=artifact_mask)


def acquisition_scheme(n_b0: int = 6, n_directions: int = 30, b_value: float = 1.0) -> DiffusionScheme:
    """b=0 volumes, then x/y/z, then a Fibonacci half-sphere."""
    extra = n_directions - 3
    dirs = list(ORTHOGONAL_DIRECTIONS)
    golden = np.pi * (3 - np.sqrt(5))
    for i in range(extra):
        z = 1 - (i + 0.5) / extra
        r = np.sqrt(1 - z * z)
        dirs.append((r * np.cos(golden * i), r * np.sin(golden * i), z))
    bvecs = np.vstack([np.zeros((n_b0, 3)), np.asarray(dirs)])
    bvecs[n_b0:] /= np.linalg.norm(bvecs[n_b0:], axis=1, keepdims=True)
    bvals = np.r_[np.zeros(n_b0), np.full(n_directions, b_value)]
    return DiffusionScheme(bvals, bvecs)


def input_indices(scheme: DiffusionScheme) -> list[int]:
    """First b=0 volume followed by the volumes along x, y and z."""
    out = [int(scheme.b0_indices[0])]
    for axis in ORTHOGONAL_DIRECTIONS:
        dots = np.abs(scheme.bvecs @ np.asarray(axis))
        hits = np.flatnonzero((scheme.bvals > 0) & (dots > 1 - 1e-9))
        if not len(hits):
            raise PhantomError(f"scheme has no diffusion-weighted volume along {axis}")
        out.append(int(hits[0]))
    return out


def _grid(dims) -> np.ndarray:
    axes = [(np.arange(n) + 0.5 - n / 2) / (n / 2) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), 0)


def _ellipsoid(u, center, radii) -> np.ndarray:
    c = np.asarray(center)[:, None, None, None]
    r = np.asarray(radii)[:, None, None, None]
    return np.sum(((u - c) / r) ** 2, axis=0) <= 1.0


def _smooth_field(u, rng, n_waves: int = 3) -> np.ndarray:
    """Low-frequency random field with values in [0, 1]."""
    acc = np.zeros(u.shape[1:])
    for _ in range(n_waves):
        f = rng.normal(size=3)
        f *= rng.uniform(0.4, 1.0) / np.linalg.norm(f)
        acc += np.cos(np.pi * np.tensordot(f, u, axes=1) + rng.uniform(0, 2 * np.pi))
    return 0.5 + 0.5 * acc / n_waves


def _between(lohi, t):
    lo, hi = lohi
    return lo + (hi - lo) * t


def _cylinder(par, perp, e) -> np.ndarray:
    """Tensor components for eigenvalues (par, perp, perp) along unit vectors e (3, ...)."""
    d = par - perp
    ex, ey, ez = e
    return np.stack([perp + d * ex * ex, perp + d * ey * ey, perp + d * ez * ez,
                     d * ex * ey, d * ex * ez, d * ey * ez], -1)


def _unit(v) -> np.ndarray:
    n = np.linalg.norm(v, axis=0, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def _label_map(spec: PhantomSpec, u: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    jit = lambda v: np.asarray(v) * (1 + rng.uniform(-spec.geometry_jitter, spec.geometry_jitter, np.shape(v)))
    brain_r = jit(spec.brain_radii)
    labels = np.zeros(u.shape[1:], dtype=np.uint8)
    labels[_ellipsoid(u, (0, 0, 0), brain_r)] = Tissue.CORTICAL_GM
    inner_r = brain_r * (1 - spec.cortex_thickness)
    inner = _ellipsoid(u, (0, 0, 0), inner_r)
    labels[inner] = Tissue.WHITE_MATTER

    tract = np.zeros_like(inner)
    tract_dir = np.zeros_like(u)
    for _ in range(spec.tract_count):
        axis = np.zeros(3)
        axis[rng.integers(1, 3)] = 1.0
        axis = _unit(axis + rng.normal(scale=0.15, size=3))
        point = rng.uniform(-0.5, 0.5, 3) * inner_r
        rel = u - point[:, None, None, None]
        along = np.tensordot(axis, rel, axes=1)
        dist = np.linalg.norm(rel - axis[:, None, None, None] * along, axis=0)
        hit = inner & (dist <= spec.tract_radius)
        tract |= hit
        tract_dir[:, hit] = axis[:, None]

    dg_off = jit(spec.deep_gm_offset)
    dg_r = jit(spec.deep_gm_radii)
    for side in (-1, 1):
        labels[_ellipsoid(u, (side * dg_off[0], dg_off[1], dg_off[2]), dg_r) & inner] = Tissue.DEEP_GM
    v_r = jit(spec.ventricle_radii)
    v_off = jit(spec.ventricle_offset)
    for side in (-1, 1):
        labels[_ellipsoid(u, (side * v_off, 0, 0), v_r) & inner] = Tissue.CSF
    x, y, z = u
    height = jit(spec.cc_height) - spec.cc_curvature * x * x
    cc = ((np.abs(x) <= jit(spec.cc_half_width)) & (np.abs(y) <= jit(spec.cc_half_length))
          & (np.abs(z - height) <= spec.cc_thickness / 2) & inner)
    labels[cc] = Tissue.CORPUS_CALLOSUM

    wm_dir = np.where(tract[None] & (labels == Tissue.WHITE_MATTER)[None], tract_dir, _unit(u))
    # callosal fibres run left-right, following the arch
    cc_dir = _unit(np.stack([np.ones_like(x), np.zeros_like(x), -2 * spec.cc_curvature * x]))
    directions = np.where((labels == Tissue.CORPUS_CALLOSUM)[None], cc_dir, wm_dir)
    for t in Tissue:
        if t != Tissue.BACKGROUND and not np.any(labels == t):
            raise EmptyTissueError(t)
    return labels, directions


def _tensor_field(spec: PhantomSpec, u, labels, directions, rng) -> tuple[np.ndarray, np.ndarray]:
    comp = np.zeros(labels.shape + (6,))
    s0 = np.zeros(labels.shape)
    fields = {name: _smooth_field(u, rng) for name in
              ("wm_par", "wm_perp", "gm", "dgm", "dgm_aniso", "csf", "cc_par", "cc_perp")}
    s0_scale = 1 + rng.uniform(-0.05, 0.05)

    def put(tissue, value, s0_value):
        sel = labels == tissue
        comp[sel] = value[sel]
        s0[sel] = s0_value * s0_scale

    iso = lambda d: np.stack([d, d, d, 0 * d, 0 * d, 0 * d], -1)
    put(Tissue.WHITE_MATTER, _cylinder(_between(spec.wm_parallel, fields["wm_par"]),
                                       _between(spec.wm_perpendicular, fields["wm_perp"]), directions), spec.s0_wm)
    put(Tissue.CORTICAL_GM, iso(_between(spec.gm_diffusivity, fields["gm"])), spec.s0_gm)
    put(Tissue.CSF, iso(_between(spec.csf_diffusivity, fields["csf"])), spec.s0_csf)
    put(Tissue.CORPUS_CALLOSUM, _cylinder(_between(spec.cc_parallel, fields["cc_par"]),
                                          _between(spec.cc_perpendicular, fields["cc_perp"]), directions), spec.s0_cc)
    # eigenvalues d(1+2e), d(1-e), d(1-e) give FA = 3e / sqrt(3 + 6e^2)
    fa_max = spec.deep_gm_max_fa
    e_max = np.sqrt(fa_max ** 2 * 3 / (9 - 6 * fa_max ** 2))
    e = 0.2 * e_max + 0.75 * e_max * fields["dgm_aniso"]
    d = _between(spec.deep_gm_diffusivity, fields["dgm"])
    dg_dir = _unit(rng.normal(size=3))[:, None, None, None] * np.ones_like(u)
    put(Tissue.DEEP_GM, _cylinder(d * (1 + 2 * e), d * (1 - e), dg_dir), spec.s0_deep_gm)
    return comp, s0


def add_rician_noise(vol: Volume, sigma: float, seed) -> Volume:
    """Magnitude of the signal plus complex Gaussian noise of std ``sigma``."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return vol
    rng = np.random.default_rng(seed)
    x = vol.data.astype(np.float64)
    n1 = rng.normal(0.0, sigma, x.shape)
    n2 = rng.normal(0.0, sigma, x.shape)
    return vol.with_data(np.sqrt((x + n1) ** 2 + n2 ** 2))


def generate_phantom(spec: PhantomSpec) -> PhantomDataset:
    geo_rng, tensor_rng = (np.random.default_rng([spec.seed, k]) for k in (0, 1))
    u = _grid(spec.dims)
    labels, directions = _label_map(spec, u, geo_rng)
    comp, s0 = _tensor_field(spec, u, labels, directions, tensor_rng)
    scheme = acquisition_scheme(spec.n_b0, spec.n_directions, spec.b_value)
    design = scheme.design_matrix()[:, :6]
    clean = s0[..., None] * np.exp(comp @ design.T)
    clean = np.moveaxis(clean, -1, 0)
    vs = spec.voxel_size_mm
    clean_vol = Volume(clean, vs)
    mask = Mask(labels > 0)
    gt = fit_volume(clean_vol, mask, scheme)
    full = add_rician_noise(clean_vol, spec.noise_sigma, [spec.seed, 2])
    inputs = Volume(full.data[input_indices(scheme)], vs)
    return PhantomDataset(full, inputs, gt.fa, gt.md, TissueLabels(labels), mask, scheme,
                          np.moveaxis(comp, -1, 0))


def inject_letter_artifact(vol: Volume, polarity: str, slice_range: Sequence[int], raster_scale: int = 2,
                           center: Optional[Sequence[int]] = None, scale_bright: float = 3.0,
                           scale_dark: float = 0.0, mask: Optional[Mask] = None) -> tuple[Volume, Mask]:
    """Paint a letter "M" across axial slices ``slice_range = (z0, z1)`` (z1 exclusive).

    Bright voxels are set to ``scale_bright`` times the 99th percentile of
    each channel's in-mask intensities (non-zero voxels when ``mask`` is
    None); dark voxels are set to ``scale_dark``.
    """
    if polarity not in ("bright", "dark"):
        raise ValueError(f"polarity must be 'bright' or 'dark', got {polarity!r}")
    nx, ny, nz = vol.dims
    z0, z1 = (int(v) for v in slice_range)
    if not 0 <= z0 < z1 <= nz:
        raise PhantomError(f"slice range {(z0, z1)} outside 0..{nz}")
    raster = np.kron(LETTER_M, np.ones((raster_scale, raster_scale), dtype=bool))
    h, w = raster.shape
    cx, cy = (nx // 2, ny // 2) if center is None else (int(center[0]), int(center[1]))
    x0, y0 = cx - h // 2, cy - w // 2
    if x0 < 0 or y0 < 0 or x0 + h > nx or y0 + w > ny:
        raise PhantomError(f"{h}x{w} letter raster at {(x0, y0)} exceeds volume extent {(nx, ny)}")
    bits = np.zeros(vol.dims, dtype=bool)
    bits[x0:x0 + h, y0:y0 + w, z0:z1] = raster[:, :, None]
    data = vol.data.copy()
    for c in range(vol.channels):
        if polarity == "bright":
            ref = data[c][mask.bits] if mask is not None else data[c][data[c] != 0]
            value = scale_bright * (np.percentile(ref, 99) if ref.size else 0.0)
        else:
            value = scale_dark
        data[c][bits] = value
    return vol.with_data(data), Mask(bits)


def save_dataset(ds: PhantomDataset, directory: str | os.PathLike) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    nifti.write_nifti(ds.full_dwi, out / "dwi_full.nii")
    nifti.write_nifti(ds.input_dwi, out / "dwi_input.nii")
    nifti.write_nifti(ds.gt_fa, out / "fa_gt.nii")
    nifti.write_nifti(ds.gt_md, out / "md_gt.nii")
    nifti.write_nifti(ds.labels, out / "labels.nii")
    nifti.write_nifti(ds.mask, out / "mask.nii")
    ds.scheme.save(out / "scheme.txt")
    if ds.artifact_mask is not None:
        nifti.write_nifti(ds.artifact_mask, out / "artifact_mask.nii")
    return out


def load_dataset(directory: str | os.PathLike) -> PhantomDataset:
    d = Path(directory)
    missing = [f for f in DATASET_FILES if not (d / f).exists()]
    if missing:
        raise FileNotFoundError(f"{d}: missing {', '.join(missing)}")
    artifact = nifti.load(d / "artifact_mask.nii") if (d / "artifact_mask.nii").exists() else None
    return PhantomDataset(
        full_dwi=nifti.load(d / "dwi_full.nii"),
        input_dwi=nifti.load(d / "dwi_input.nii"),
        gt_fa=nifti.load(d / "fa_gt.nii"),
        gt_md=nifti.load(d / "md_gt.nii"),
        labels=nifti.load(d / "labels.nii"),
        mask=nifti.load(d / "mask.nii"),
        scheme=DiffusionScheme.load(d / "scheme.txt"),
        artifact_mask=artifact,
    )
