"""Accuracy and uncertainty evaluation, experiment trials and parameter sweeps.

MAE(MD) is in um^2/ms.  Published HCP numbers are carried along as a
labelled reference column; they are not targets for phantom runs.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import config as flatcfg
from .dunet import DUNet, DUNetConfig, build_dunet, build_unet, checkpoint_bytes, checkpoint_from_bytes
from .mcdropout import infer_volume
from .phantom import PhantomDataset, PhantomSpec, generate_phantom, inject_letter_artifact
from .train import TrainConfig, train, training_blocks
from .volume import BlockSpec, Mask, Tissue, TissueLabels, Volume, _check_dims

log = logging.getLogger(__name__)

REFERENCE_LABEL = "paper, HCP data"
# MAE(FA), MAE(MD) after averaging 100 passes, 16 training subjects
PAPER_DROPOUT_TABLE = {0.0: (0.0498, 0.0524), 0.1: (0.0442, 0.0491), 0.2: (0.0438, 0.0496), 0.3: (0.0440, 0.0502),
                       0.4: (0.0442, 0.0506), 0.5: (0.0460, 0.0524), 0.6: (0.0479, 0.0537), 0.7: (0.0494, 0.0569)}
# dropout 0.2, 16 training subjects
PAPER_NPRED_TABLE = {1: (0.0460, 0.0529), 2: (0.0449, 0.0513), 5: (0.0442, 0.0503), 10: (0.0440, 0.0499),
                     20: (0.0439, 0.0497), 50: (0.0438, 0.0496), 100: (0.0438, 0.0496)}
# FA uncertainty (CoV) per tissue
PAPER_TISSUE_COV = {"white_matter": 0.0478, "cortical_gm": 0.0756, "corpus_callosum": 0.0288}
DEFAULT_NS = (1, 2, 5, 10, 20, 50, 100)


class EvalError(ValueError):
    pass


def mae(pred: Volume, gt: Volume, mask: Mask, channel: int = 0) -> float:
    _check_dims(pred.dims, gt.dims)
    _check_dims(pred.dims, mask.dims)
    if not mask.bits.any():
        raise EvalError("MAE over an empty mask is undefined")
    diff = pred.channel(channel).astype(np.float64) - gt.channel(channel)
    return float(np.abs(diff[mask.bits]).mean())


@dataclass(frozen=True)
class TissueStat:
    mean: float
    count: int


def tissue_uncertainty(cov_map: Volume, labels: TissueLabels, channel: int = 0,
                       min_voxels: int = 100) -> dict[str, TissueStat]:
    """Mean CoV per tissue label, for labels with at least ``min_voxels`` voxels."""
    _check_dims(cov_map.dims, labels.dims)
    data = cov_map.channel(channel)
    out = {}
    for t in Tissue:
        if t == Tissue.BACKGROUND:
            continue
        sel = labels.labels == t
        n = int(sel.sum())
        if n >= max(min_voxels, 1):
            out[t.name.lower()] = TissueStat(float(data[sel].astype(np.float64).mean()), n)
    return out


def artifact_contrast(cov_map: Volume, artifact_mask: Mask, parenchyma: Mask, channel: int = 0) -> float:
    """Mean CoV inside artifact-and-parenchyma over mean CoV in the rest of the parenchyma."""
    inside = artifact_mask.bits & parenchyma.bits
    outside = parenchyma.bits & ~artifact_mask.bits
    if not inside.any() or not outside.any():
        raise EvalError("artifact contrast needs voxels both inside and outside the artifact")
    data = cov_map.channel(channel).astype(np.float64)
    den = data[outside].mean()
    return float(data[inside].mean() / den) if den > 0 else float("inf")


# -- tables and reports ------------------------------------------------------

@dataclass
class SweepTable:
    variable: str
    columns: list
    rows: list = field(default_factory=list)
    reference: dict = field(default_factory=dict)  # value -> (fa, md)

    def add(self, value, *metrics) -> None:
        if len(metrics) != len(self.columns):
            raise EvalError(f"expected {len(self.columns)} metrics, got {len(metrics)}")
        self.rows.append((value, *(float(m) for m in metrics)))
        self.rows.sort(key=lambda r: r[0])

    def header(self) -> list[str]:
        return [self.variable, *self.columns, "paper_mae_fa", "paper_mae_md"]

    def records(self) -> list[list]:
        out = []
        for value, *metrics in self.rows:
            ref = self.reference.get(value, ("", ""))
            out.append([value, *metrics, *ref])
        return out

    def column(self, name: str) -> list[float]:
        i = self.columns.index(name) + 1
        return [r[i] for r in self.rows]


@dataclass
class EvalReport:
    subjects: list = field(default_factory=list)          # dicts: subject, mae_fa, mae_md
    tissue: dict = field(default_factory=dict)             # tissue -> TissueStat (FA CoV)
    artifact_contrast: dict = field(default_factory=dict)  # channel -> ratio
    fingerprint: dict = field(default_factory=dict)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.9g}"
    return v


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def emit_report(obj, directory: str | os.PathLike, name: Optional[str] = None) -> list[Path]:
    """Write a :class:`SweepTable` as ``sweep_<var>.csv`` plus long-format and JSON files,
    or an :class:`EvalReport` as ``report.csv`` and ``report.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(obj, SweepTable):
        stem = name or f"sweep_{obj.variable}"
        _write_csv(out / f"{stem}.csv", obj.header(), obj.records())
        long_rows = []
        for value, *metrics in obj.rows:
            for col, m in zip(obj.columns, metrics):
                long_rows.append([value, col, m])
            if value in obj.reference:
                long_rows.append([value, "paper_mae_fa", obj.reference[value][0]])
                long_rows.append([value, "paper_mae_md", obj.reference[value][1]])
        _write_csv(out / f"{stem}_long.csv", [obj.variable, "series", "value"], long_rows)
        payload = {"variable": obj.variable, "columns": obj.columns, "rows": obj.rows,
                   "reference": {"label": REFERENCE_LABEL, "rows": [[k, *v] for k, v in obj.reference.items()]}}
        with open(out / f"{stem}.json", "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
        return [out / f"{stem}.csv", out / f"{stem}_long.csv", out / f"{stem}.json"]
    if isinstance(obj, EvalReport):
        stem = name or "report"
        rows = [[s["subject"], "mae_fa", s["mae_fa"]] for s in obj.subjects]
        rows += [[s["subject"], "mae_md", s["mae_md"]] for s in obj.subjects]
        rows += [["all", f"cov_fa_{t}", st.mean] for t, st in obj.tissue.items()]
        rows += [["all", f"artifact_contrast_{c}", v] for c, v in obj.artifact_contrast.items()]
        _write_csv(out / f"{stem}.csv", ["subject", "metric", "value"], rows)
        payload = {"subjects": obj.subjects,
                   "tissue": {t: {"mean_cov": st.mean, "voxels": st.count} for t, st in obj.tissue.items()},
                   "artifact_contrast": obj.artifact_contrast,
                   "fingerprint": obj.fingerprint,
                   "reference": {"label": REFERENCE_LABEL, "tissue_cov_fa": PAPER_TISSUE_COV}}
        with open(out / f"{stem}.json", "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
        return [out / f"{stem}.csv", out / f"{stem}.json"]
    raise TypeError(f"cannot emit {type(obj).__name__}")


def read_sweep_csv(path: str | os.PathLike) -> SweepTable:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    table = SweepTable(header[0], header[1:-2])
    num = lambda s: int(s) if s.lstrip("-").isdigit() else float(s)
    for r in rows[1:]:
        table.rows.append((num(r[0]), *(float(v) for v in r[1:-2])))
        if r[-2] != "":
            table.reference[num(r[0])] = (float(r[-2]), float(r[-1]))
    return table


# -- experiments --------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines a phantom train/infer/evaluate run."""

    seed: int = 0
    phantom_dims: tuple[int, int, int] = (24, 24, 24)
    noise_sigma: float = 20.0
    n_train: int = 2
    n_test: int = 1
    depth: int = 3
    base_kernels: int = 8
    block_size: int = 16
    dropout_rate: float = 0.2
    epochs: int = 60
    lr: float = 3e-3
    patience: int = 20
    val_fraction: float = 0.2
    blocks_per_epoch: int = 0  # 0 = all training blocks
    train_stride: int = 8
    infer_stride: int = 16
    n_passes: int = 100
    artifact_polarity: str = "bright"
    artifact_scale: float = 3.0
    artifact_raster_scale: int = 1  # 7x7 letter, under a third of a 24^3 slice
    artifact_slices: int = 6

    def net_config(self, dropout_rate: Optional[float] = None) -> DUNetConfig:
        p = self.dropout_rate if dropout_rate is None else dropout_rate
        return DUNetConfig(self.depth, self.base_kernels, 4, 2, p, (self.block_size,) * 3)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.blocks_per_epoch or None, self.val_fraction, self.seed,
                           self.patience, self.lr, self.train_stride)

    def phantom_spec(self, seed: int) -> PhantomSpec:
        return PhantomSpec(dims=self.phantom_dims, seed=seed, noise_sigma=self.noise_sigma)

    def subject_seed(self, role: str, index: int) -> int:
        return int(np.random.SeedSequence([self.seed, {"train": 1, "test": 2}[role], index]).generate_state(1)[0])

    def to_flat(self) -> dict:
        return flatcfg.to_flat(self)

    @classmethod
    def from_flat(cls, mapping) -> "ExperimentConfig":
        return flatcfg.from_flat(cls, mapping)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_flat(), sort_keys=True).encode()).hexdigest()[:16]


def subjects(cfg: ExperimentConfig, role: str, n: int) -> list[PhantomDataset]:
    return [generate_phantom(cfg.phantom_spec(cfg.subject_seed(role, i))) for i in range(n)]


class CheckpointCache:
    """On-disk cache of trained networks keyed by a hash of what determines training."""

    def __init__(self, directory: Optional[str | os.PathLike]):
        self.directory = Path(directory) if directory else None
        self.hits = 0

    def key(self, cfg: ExperimentConfig, net_cfg: DUNetConfig, n_train: int) -> str:
        ident = {"experiment": cfg.to_flat(), "net": net_cfg.to_dict(), "n_train": n_train}
        for k in ("n_passes", "n_test", "infer_stride", "artifact_polarity", "artifact_scale",
                  "artifact_raster_scale", "artifact_slices", "dropout_rate", "n_train"):
            ident["experiment"].pop(k)
        return hashlib.sha256(json.dumps(ident, sort_keys=True).encode()).hexdigest()[:20]

    def get_or_train(self, cfg: ExperimentConfig, net_cfg: DUNetConfig, train_sets, blocks=None) -> DUNet:
        path = None
        if self.directory is not None:
            path = self.directory / f"{self.key(cfg, net_cfg, len(train_sets))}.ckpt"
            if path.exists():
                self.hits += 1
                log.info("cache hit: reusing %s", path.name)
                return checkpoint_from_bytes(path.read_bytes())
        net = DUNet(net_cfg, cfg.seed)
        train(net, train_sets, cfg.train_config(), blocks)
        if path is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            path.write_bytes(checkpoint_bytes(net))
            log.info("cache store: %s", path.name)
        return net


@dataclass
class TrialResult:
    seed: int
    mae_by_n: dict            # n -> (mae_fa, mae_md) of the n-pass average
    unet_mae: tuple           # (mae_fa, mae_md) of the plain U-Net
    tissue: dict              # tissue -> TissueStat, FA CoV
    artifact_contrast: dict   # {"fa": ratio, "md": ratio}
    report: EvalReport
    net: Optional[DUNet] = field(default=None, repr=False)


def _artifact_input(cfg: ExperimentConfig, ds: PhantomDataset):
    nz = ds.input_dwi.dims[2]
    z0 = nz // 2 - cfg.artifact_slices // 2
    return inject_letter_artifact(ds.input_dwi, cfg.artifact_polarity, (z0, z0 + cfg.artifact_slices),
                                  raster_scale=cfg.artifact_raster_scale, scale_bright=cfg.artifact_scale,
                                  mask=ds.mask)


def run_trial(cfg: ExperimentConfig, ns: Sequence[int] = DEFAULT_NS, artifact: bool = True,
              cache: Optional[CheckpointCache] = None, workers: int = 1) -> TrialResult:
    """Train DU-Net and a plain U-Net from one init seed, then evaluate on held-out phantoms."""
    cache = cache or CheckpointCache(None)
    train_sets = subjects(cfg, "train", cfg.n_train)
    test_sets = subjects(cfg, "test", cfg.n_test)
    blocks = training_blocks(train_sets, (cfg.block_size,) * 3, (cfg.train_stride,) * 3)
    dunet = cache.get_or_train(cfg, cfg.net_config(), train_sets, blocks)
    unet = cache.get_or_train(cfg, dataclasses.replace(cfg.net_config(0.0), use_dropout=False), train_sets, blocks)
    spec = BlockSpec.cubic(cfg.block_size, cfg.infer_stride)
    ns = sorted(set(int(n) for n in ns if n <= cfg.n_passes))

    per_n = {n: [] for n in ns}
    unet_scores, subject_rows, tissue_maps = [], [], []
    for k, ds in enumerate(test_sets):
        seed_k = cfg.subject_seed("test", k)
        res = infer_volume(dunet, ds.input_dwi, ds.mask, spec, cfg.n_passes, seed_k, workers, snapshots=ns)
        for n in ns:
            fa, md = res.snapshots[n]
            per_n[n].append((mae(fa, ds.gt_fa, ds.mask), mae(md, ds.gt_md, ds.mask)))
        plain = infer_volume(unet, ds.input_dwi, ds.mask, spec, 1, seed_k, workers)
        unet_scores.append((mae(plain.fa, ds.gt_fa, ds.mask), mae(plain.md, ds.gt_md, ds.mask)))
        subject_rows.append({"subject": f"test{k}", "mae_fa": mae(res.fa, ds.gt_fa, ds.mask),
                         "mae_md": mae(res.md, ds.gt_md, ds.mask)})
        if res.uncertainty is not None:
            tissue_maps.append(tissue_uncertainty(res.uncertainty.cov, ds.labels, 0))

    mae_by_n = {n: tuple(np.mean(v, axis=0)) for n, v in per_n.items()}
    tissue = {}
    for t in set().union(*tissue_maps) if tissue_maps else ():
        stats = [m[t] for m in tissue_maps if t in m]
        tissue[t] = dataclasses.replace(stats[0], mean=float(np.mean([s.mean for s in stats])),
                                        count=int(sum(s.count for s in stats)))
    tissue = dict(sorted(tissue.items()))
    contrast = artifact_sensitivity(dunet, cfg, test_sets, workers) if artifact and cfg.n_passes >= 2 else {}
    report = EvalReport(subject_rows, tissue, contrast,
                        {"config": cfg.to_flat(), "fingerprint": cfg.fingerprint(), "n_passes": cfg.n_passes,
                         "dropout_rate": cfg.dropout_rate, "seed": cfg.seed})
    return TrialResult(cfg.seed, mae_by_n, tuple(np.mean(unet_scores, axis=0)), tissue, contrast, report, dunet)


def artifact_sensitivity(net: DUNet, cfg: ExperimentConfig, test_sets, workers: int = 1) -> dict:
    """Artifact-to-parenchyma CoV ratio per channel, averaged over test subjects."""
    spec = BlockSpec.cubic(cfg.block_size, cfg.infer_stride)
    contrast = {"fa": [], "md": []}
    for k, ds in enumerate(test_sets):
        art_in, art_mask = _artifact_input(cfg, ds)
        art = infer_volume(net, art_in, ds.mask, spec, cfg.n_passes, cfg.subject_seed("test", k), workers)
        for c, name in enumerate(("fa", "md")):
            contrast[name].append(artifact_contrast(art.uncertainty.cov, art_mask, ds.mask, c))
    return {c: float(np.mean(v)) for c, v in contrast.items()}


def _evaluate_net(net: DUNet, cfg: ExperimentConfig, test_sets, n_passes: int, ns=None, workers: int = 1):
    spec = BlockSpec.cubic(cfg.block_size, cfg.infer_stride)
    ns = list(ns or [n_passes])
    scores = {n: [] for n in ns}
    for k, ds in enumerate(test_sets):
        res = infer_volume(net, ds.input_dwi, ds.mask, spec, max(ns), cfg.subject_seed("test", k), workers,
                           snapshots=ns)
        for n in ns:
            fa, md = res.snapshots[n]
            scores[n].append((mae(fa, ds.gt_fa, ds.mask), mae(md, ds.gt_md, ds.mask)))
    return {n: tuple(float(v) for v in np.mean(s, axis=0)) for n, s in scores.items()}


def sweep_dropout(rates: Sequence[float], cfg: ExperimentConfig, cache: Optional[CheckpointCache] = None,
                  workers: int = 1) -> SweepTable:
    """Train one DU-Net per dropout rate and score its ``n_passes`` average."""
    if not rates:
        raise EvalError("dropout sweep needs at least one rate")
    cache = cache or CheckpointCache(None)
    train_sets = subjects(cfg, "train", cfg.n_train)
    test_sets = subjects(cfg, "test", cfg.n_test)
    blocks = training_blocks(train_sets, (cfg.block_size,) * 3, (cfg.train_stride,) * 3)
    table = SweepTable("dropout_rate", ["mae_fa", "mae_md"], reference=dict(PAPER_DROPOUT_TABLE))
    for p in rates:
        net = cache.get_or_train(cfg, cfg.net_config(float(p)), train_sets, blocks)
        fa, md = _evaluate_net(net, cfg, test_sets, cfg.n_passes, workers=workers)[cfg.n_passes]
        table.add(float(p), fa, md)
    return table


def sweep_npredictions(ns: Sequence[int], net: DUNet, cfg: ExperimentConfig,
                       test_sets: Optional[Sequence[PhantomDataset]] = None, workers: int = 1) -> SweepTable:
    """Score the average of the first ``n`` passes of one seeded pass sequence, for each ``n``."""
    if not ns:
        raise EvalError("prediction-count sweep needs at least one n")
    test_sets = test_sets if test_sets is not None else subjects(cfg, "test", cfg.n_test)
    scores = _evaluate_net(net, cfg, test_sets, max(ns), sorted(set(int(n) for n in ns)), workers)
    table = SweepTable("n_predictions", ["mae_fa", "mae_md"], reference=dict(PAPER_NPRED_TABLE))
    for n, (fa, md) in scores.items():
        table.add(n, fa, md)
    return table


def sweep_training_size(counts: Sequence[int], cfg: ExperimentConfig, cache: Optional[CheckpointCache] = None,
                        workers: int = 1) -> SweepTable:
    """Plain U-Net vs DU-Net (single pass and ``n_passes`` average) per training-set size."""
    if not counts:
        raise EvalError("training-size sweep needs at least one subject count")
    cache = cache or CheckpointCache(None)
    test_sets = subjects(cfg, "test", cfg.n_test)
    table = SweepTable("n_training_subjects",
                       ["unet_mae_fa", "dunet_1_mae_fa", "dunet_avg_mae_fa",
                        "unet_mae_md", "dunet_1_mae_md", "dunet_avg_mae_md"])
    for count in counts:
        sub = dataclasses.replace(cfg, n_train=int(count))
        train_sets = subjects(sub, "train", int(count))
        blocks = training_blocks(train_sets, (cfg.block_size,) * 3, (cfg.train_stride,) * 3)
        unet = cache.get_or_train(sub, dataclasses.replace(cfg.net_config(0.0), use_dropout=False), train_sets, blocks)
        dunet = cache.get_or_train(sub, cfg.net_config(), train_sets, blocks)
        u = _evaluate_net(unet, cfg, test_sets, 1)[1]
        d = _evaluate_net(dunet, cfg, test_sets, cfg.n_passes, [1, cfg.n_passes], workers)
        table.add(int(count), u[0], d[1][0], d[cfg.n_passes][0], u[1], d[1][1], d[cfg.n_passes][1])
    return table
