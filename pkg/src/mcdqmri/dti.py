"""Diffusion tensor model: signal synthesis, log-linear fitting, FA and MD.

Units: diffusivities in um^2/ms and b-values in ms/um^2, so the common
clinical shell b = 1000 s/mm^2 is simply 1.0.  Tensors are stored as the
six unique components in the order (Dxx, Dyy, Dzz, Dxy, Dxz, Dyz).
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .volume import Mask, Volume, _check_dims

log = logging.getLogger(__name__)

B0_THRESHOLD = 1e-6
_SQRT_1_5 = math.sqrt(1.5)


class SchemeError(ValueError):
    """Diffusion scheme is malformed or cannot support a tensor fit."""


@dataclass(frozen=True, eq=False)
class DiffusionScheme:
    bvals: np.ndarray
    bvecs: np.ndarray

    def __post_init__(self):
        bvals = np.asarray(self.bvals, dtype=np.float64).reshape(-1)
        bvecs = np.asarray(self.bvecs, dtype=np.float64).reshape(-1, 3)
        if len(bvals) != len(bvecs):
            raise SchemeError(f"{len(bvals)} b-values but {len(bvecs)} gradient directions")
        if np.any(bvals < 0) or not np.all(np.isfinite(bvals)):
            raise SchemeError("b-values must be finite and non-negative")
        norms = np.linalg.norm(bvecs[bvals > B0_THRESHOLD], axis=1)
        if norms.size and np.max(np.abs(norms - 1.0)) > 1e-6:
            bad = int(np.flatnonzero(bvals > B0_THRESHOLD)[np.argmax(np.abs(norms - 1.0))])
            raise SchemeError(f"gradient direction of volume {bad} is not unit length")
        bvals.flags.writeable = False
        bvecs.flags.writeable = False
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "bvecs", bvecs)

    @property
    def n_volumes(self) -> int:
        return len(self.bvals)

    @property
    def b0_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bvals <= B0_THRESHOLD)

    @property
    def dwi_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bvals > B0_THRESHOLD)

    def design_matrix(self) -> np.ndarray:
        """Rows ``[-b gx^2, -b gy^2, -b gz^2, -2b gx gy, -2b gx gz, -2b gy gz, 1]``."""
        b = self.bvals
        gx, gy, gz = self.bvecs.T
        return np.column_stack([-b * gx * gx, -b * gy * gy, -b * gz * gz,
                                -2 * b * gx * gy, -2 * b * gx * gz, -2 * b * gy * gz,
                                np.ones_like(b)])

    def validate_for_fit(self) -> None:
        if len(self.b0_indices) < 1:
            raise SchemeError("scheme has no b=0 volume; at least one is required")
        if len(self.dwi_indices) < 6:
            raise SchemeError(f"scheme has {len(self.dwi_indices)} diffusion-weighted volumes; "
                              "at least 6 non-collinear directions are required")
        rank = np.linalg.matrix_rank(self.design_matrix())
        if rank < 7:
            raise SchemeError(f"design matrix has rank {rank} < 7; gradient directions do not "
                              "span the six tensor components (need >= 6 non-collinear directions)")

    def subset(self, indices: Sequence[int]) -> "DiffusionScheme":
        idx = np.asarray(indices, dtype=int)
        return DiffusionScheme(self.bvals[idx], self.bvecs[idx])

    def to_text(self) -> str:
        return "".join(f"{b:.10g} {g[0]:.10g} {g[1]:.10g} {g[2]:.10g}\n" for b, g in zip(self.bvals, self.bvecs))

    @classmethod
    def from_text(cls, text: str) -> "DiffusionScheme":
        rows = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise SchemeError(f"line {lineno}: expected 'b gx gy gz', got {line!r}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise SchemeError(f"line {lineno}: non-numeric value in {line!r}") from None
        if not rows:
            raise SchemeError("scheme file is empty")
        arr = np.array(rows)
        return cls(arr[:, 0], arr[:, 1:])

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DiffusionScheme":
        with open(path) as fh:
            return cls.from_text(fh.read())


@dataclass(frozen=True)
class DiffTensor:
    xx: float
    yy: float
    zz: float
    xy: float = 0.0
    xz: float = 0.0
    yz: float = 0.0

    @classmethod
    def from_matrix(cls, m) -> "DiffTensor":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[0, 0], m[1, 1], m[2, 2], m[0, 1], m[0, 2], m[1, 2])

    @classmethod
    def from_components(cls, c) -> "DiffTensor":
        return cls(*(float(v) for v in c))

    @property
    def components(self) -> np.ndarray:
        return np.array([self.xx, self.yy, self.zz, self.xy, self.xz, self.yz])

    @property
    def matrix(self) -> np.ndarray:
        return components_to_matrix(self.components)

    def is_psd(self, tol: float = 1e-9) -> bool:
        return bool(eig_sym3(self).values[-1] >= -tol)


class EigenTriple(NamedTuple):
    values: np.ndarray   # descending
    vectors: np.ndarray  # columns are eigenvectors


class FitSummary(NamedTuple):
    n_fitted: int
    n_clamped: int


class VolumeFit(NamedTuple):
    fa: Volume
    md: Volume
    tensors: np.ndarray  # (6, nx, ny, nz)
    summary: FitSummary


def components_to_matrix(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    xx, yy, zz, xy, xz, yz = np.moveaxis(c, -1, 0)
    rows = [np.stack([xx, xy, xz], -1), np.stack([xy, yy, yz], -1), np.stack([xz, yz, zz], -1)]
    return np.stack(rows, -2)


def matrix_to_components(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return np.stack([m[..., 0, 0], m[..., 1, 1], m[..., 2, 2], m[..., 0, 1], m[..., 0, 2], m[..., 1, 2]], -1)


def _as_components(D) -> np.ndarray:
    if isinstance(D, DiffTensor):
        return D.components
    D = np.asarray(D, dtype=np.float64)
    return matrix_to_components(D) if D.shape[-2:] == (3, 3) else D


def signal(D, s0: float, b: float, g) -> float:
    """Monoexponential signal ``s0 * exp(-b g^T D g)``."""
    if b == 0:
        return float(s0)
    g = np.asarray(g, dtype=np.float64)
    adc = g @ components_to_matrix(_as_components(D)) @ g
    return float(s0 * math.exp(-b * adc))


def synthesize(tensors: np.ndarray, s0: np.ndarray, scheme: DiffusionScheme) -> np.ndarray:
    """Vectorized signals for tensors (..., 6) and s0 (...); returns (..., n_volumes)."""
    design = scheme.design_matrix()
    log_s = tensors @ design[:, :6].T
    return np.asarray(s0)[..., None] * np.exp(log_s)


def fit_tensors(signals: np.ndarray, scheme: DiffusionScheme, floor: float = 1e-6,
                weighted: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized log-linear least-squares fit.

    ``signals`` has shape (N, n_volumes).  Returns tensors (N, 6), s0 (N,)
    and a boolean array marking voxels where a non-positive signal was
    clamped to ``floor`` times the largest b=0 signal of that voxel.
    """
    scheme.validate_for_fit()
    S = np.asarray(signals, dtype=np.float64)
    if S.ndim == 1:
        S = S[None]
    if S.shape[-1] != scheme.n_volumes:
        raise SchemeError(f"got {S.shape[-1]} signals for a {scheme.n_volumes}-volume scheme")
    ref = S[:, scheme.b0_indices].max(axis=1)
    ref = np.where(ref > 0, ref, np.abs(S).max(axis=1))
    lo = floor * np.where(ref > 0, ref, 1.0)
    bad = S <= 0
    clamped = bad.any(axis=1)
    S = np.where(bad, lo[:, None], S)
    y = np.log(S)
    X = scheme.design_matrix()
    if not weighted:
        beta = np.linalg.lstsq(X, y.T, rcond=None)[0].T
    else:
        # weights S^2 from the OLS prediction
        beta0 = np.linalg.lstsq(X, y.T, rcond=None)[0].T
        w = np.exp(2 * beta0 @ X.T)
        xtw = X.T[None] * w[:, None, :]
        beta = np.linalg.solve(xtw @ X, np.einsum("nkv,nv->nk", xtw, y)[..., None])[..., 0]
    return beta[:, :6], np.exp(beta[:, 6]), clamped


def fit_tensor(signals, scheme: DiffusionScheme, floor: float = 1e-6,
               weighted: bool = False) -> tuple[DiffTensor, float]:
    tensors, s0, clamped = fit_tensors(np.asarray(signals)[None], scheme, floor, weighted)
    if clamped[0]:
        log.warning("non-positive signal clamped to %.3g x s0", floor)
    return DiffTensor.from_components(tensors[0]), float(s0[0])


def _jacobi(a: np.ndarray, sweeps: int = 50) -> tuple[np.ndarray, np.ndarray]:
    a = a.copy()
    v = np.eye(3)
    for _ in range(sweeps):
        off = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
        if off <= 1e-30 * max(1.0, np.sum(a * a)):
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            if a[p, q] == 0.0:
                continue
            theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
            t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1))
            c = 1 / math.sqrt(t * t + 1)
            s = t * c
            r = np.eye(3)
            r[p, p] = r[q, q] = c
            r[p, q] = s
            r[q, p] = -s
            a = r.T @ a @ r
            v = v @ r
    return np.diag(a).copy(), v


def _null_vector(m: np.ndarray) -> np.ndarray:
    rows = m
    crosses = [np.cross(rows[0], rows[1]), np.cross(rows[0], rows[2]), np.cross(rows[1], rows[2])]
    best = max(crosses, key=lambda c: c @ c)
    return best / math.sqrt(best @ best)


def eigvals_sym3(c: np.ndarray) -> np.ndarray:
    """Closed-form (trigonometric) eigenvalues of symmetric 3x3 tensors.

    ``c`` has shape (..., 6); returns (..., 3) in descending order.
    """
    c = np.asarray(c, dtype=np.float64)
    xx, yy, zz, xy, xz, yz = np.moveaxis(c, -1, 0)
    q = (xx + yy + zz) / 3
    p1 = xy * xy + xz * xz + yz * yz
    p2 = (xx - q) ** 2 + (yy - q) ** 2 + (zz - q) ** 2 + 2 * p1
    p = np.sqrt(p2 / 6)
    safe = np.where(p > 0, p, 1.0)
    bxx, byy, bzz = (xx - q) / safe, (yy - q) / safe, (zz - q) / safe
    bxy, bxz, byz = xy / safe, xz / safe, yz / safe
    det = bxx * (byy * bzz - byz * byz) - bxy * (bxy * bzz - byz * bxz) + bxz * (bxy * byz - byy * bxz)
    phi = np.arccos(np.clip(det / 2, -1.0, 1.0)) / 3
    l1 = q + 2 * p * np.cos(phi)
    l3 = q + 2 * p * np.cos(phi + 2 * math.pi / 3)
    l2 = 3 * q - l1 - l3
    out = np.stack([l1, l2, l3], -1)
    return np.where((p > 0)[..., None], out, q[..., None] * np.ones(3))


def eig_sym3(D) -> EigenTriple:
    """Eigen-decomposition of a symmetric 3x3 tensor, eigenvalues descending.

    Closed-form eigenvalues with cross-product eigenvectors; falls back to
    Jacobi rotations when the scale-normalized discriminant
    ``prod((li - lj)^2) / scale^6`` is below 1e-12 or the reconstruction
    check fails.
    """
    c = _as_components(D)
    m = components_to_matrix(c)
    lam = eigvals_sym3(c)
    scale = max(float(np.max(np.abs(lam))), 1e-300)
    disc = ((lam[0] - lam[1]) * (lam[0] - lam[2]) * (lam[1] - lam[2]) / scale ** 3) ** 2
    if disc >= 1e-12:
        v1 = _null_vector(m - lam[0] * np.eye(3))
        v3 = _null_vector(m - lam[2] * np.eye(3))
        v3 = v3 - (v3 @ v1) * v1
        v3 /= np.linalg.norm(v3)
        v2 = np.cross(v3, v1)
        vecs = np.column_stack([v1, v2, v3])
        resid = np.linalg.norm(vecs @ np.diag(lam) @ vecs.T - m)
        if resid <= 1e-9 * (1 + np.linalg.norm(m)):
            return EigenTriple(lam, vecs)
    vals, vecs = _jacobi(m)
    order = np.argsort(-vals, kind="stable")
    return EigenTriple(vals[order], vecs[:, order])


def _values(eigs) -> np.ndarray:
    return np.asarray(eigs.values if isinstance(eigs, EigenTriple) else eigs, dtype=np.float64)


def fa_from_eigenvalues(lam: np.ndarray) -> np.ndarray:
    """Vectorized FA over the last axis; 0 where all eigenvalues vanish."""
    lam = np.asarray(lam, dtype=np.float64)
    dev = lam - lam.mean(axis=-1, keepdims=True)
    num = np.sqrt(np.sum(dev * dev, axis=-1))
    den = np.sqrt(np.sum(lam * lam, axis=-1))
    out = _SQRT_1_5 * num / np.where(den > 0, den, 1.0)
    return np.clip(np.where(den > 0, out, 0.0), 0.0, 1.0)


def fa(eigs) -> float:
    return float(fa_from_eigenvalues(_values(eigs)))


def md(eigs) -> float:
    return float(np.mean(_values(eigs)))


def fit_volume(dwi: Volume, mask: Mask, scheme: DiffusionScheme, floor: float = 1e-6,
               weighted: bool = False) -> VolumeFit:
    """Fit every masked voxel; voxels outside the mask are zero in all outputs."""
    if dwi.channels != scheme.n_volumes:
        raise SchemeError(f"volume has {dwi.channels} channels but scheme lists {scheme.n_volumes} volumes")
    _check_dims(dwi.dims, mask.dims)
    scheme.validate_for_fit()
    dims = dwi.dims
    fa_map = np.zeros(dims, dtype=np.float32)
    md_map = np.zeros(dims, dtype=np.float32)
    tensors = np.zeros((6,) + dims, dtype=np.float64)
    n_clamped = 0
    idx = mask.bits
    if idx.any():
        sig = dwi.data[:, idx].T.astype(np.float64)
        comp, _, clamped = fit_tensors(sig, scheme, floor, weighted)
        n_clamped = int(clamped.sum())
        if n_clamped:
            log.warning("%d voxels had non-positive signals clamped", n_clamped)
        lam = eigvals_sym3(comp)
        fa_map[idx] = fa_from_eigenvalues(lam)
        md_map[idx] = lam.mean(axis=-1)
        tensors[:, idx] = comp.T
    vs = dwi.voxel_size_mm
    return VolumeFit(Volume(fa_map, vs), Volume(md_map, vs), tensors, FitSummary(int(idx.sum()), n_clamped))
