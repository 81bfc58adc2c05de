"""Command-line entry point: ``mcdqmri phantom|fit|train|infer|eval|sweep``.

Each subcommand takes fixed path options plus generic ``--key value``
overrides of its flat config; ``--config FILE`` supplies a base config
in the same ``key = value`` format.  The resolved config is written to
``config.toml`` in the output directory.

Exit codes: 0 success, 1 internal error, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as flatcfg
from . import nifti
from .dti import DiffusionScheme, SchemeError, fit_volume
from .dunet import CheckpointError, DUNet, DUNetConfig, load_checkpoint, save_checkpoint
from .evaluation import (CheckpointCache, EvalError, EvalReport, ExperimentConfig, artifact_contrast, emit_report,
                         mae, sweep_dropout, sweep_npredictions, sweep_training_size, tissue_uncertainty)
from .mcdropout import infer_volume, write_outputs
from .nifti import NiftiError
from .phantom import PhantomError, PhantomSpec, generate_phantom, inject_letter_artifact, load_dataset, save_dataset
from .train import TrainConfig, train
from .volume import BlockSpec, Mask, Volume

log = logging.getLogger("mcdqmri")

USAGE_ERRORS = (flatcfg.ConfigError, SchemeError, PhantomError, NiftiError, CheckpointError, EvalError,
                FileNotFoundError, NotADirectoryError)


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class ArtifactOptions:
    artifact: str = "none"  # none | bright | dark
    artifact_scale: float = 3.0
    artifact_slices: int = 6
    artifact_raster_scale: int = 2


@dataclass(frozen=True)
class TrainRunConfig:
    seed: int = 0
    depth: int = 3
    base_kernels: int = 8
    block_size: int = 16
    dropout_rate: float = 0.2
    use_dropout: bool = True
    epochs: int = 60
    blocks_per_epoch: int = 0  # 0 = all
    val_fraction: float = 0.2
    patience: int = 20
    lr: float = 3e-3
    stride: int = 0  # 0 = half the block size

    def net_config(self) -> DUNetConfig:
        return DUNetConfig(self.depth, self.base_kernels, 4, 2, self.dropout_rate, (self.block_size,) * 3,
                           self.use_dropout)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.blocks_per_epoch or None, self.val_fraction, self.seed, self.patience,
                           self.lr, self.stride or None)


@dataclass(frozen=True)
class InferRunConfig:
    n_passes: int = 100
    seed: int = 0
    workers: int = 1
    stride: int = 0  # 0 = block size
    dropout_override: Optional[float] = None
    epsilon: float = 1e-6


# -- config plumbing -----------------------------------------------------------

def _split_overrides(extra: list[str]) -> dict:
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        elif i + 1 < len(extra) and not extra[i + 1].startswith("--"):
            raw = extra[i + 1]
            i += 2
        else:
            raw = "true"
            i += 1
        key = key.replace("-", "_")
        if key in out:
            raise UsageError(f"option --{key} given twice")
        out[key] = flatcfg.parse_override(key, raw)
    return out


def _resolve(args, *classes):
    """Instances of ``classes`` from ``--config`` plus overrides; every key must belong to one class."""
    values = dict(flatcfg.load_flat(args.config)) if args.config else {}
    values.update(args.overrides)
    names = [{f.name for f in dataclasses.fields(c)} for c in classes]
    unknown = sorted(set(values) - set().union(*names))
    if unknown:
        raise flatcfg.ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return [flatcfg.from_flat(c, {k: v for k, v in values.items() if k in n}) for c, n in zip(classes, names)]


def _snapshot(out: Path, *objs, extra: Optional[dict] = None) -> None:
    flat = {}
    for obj in objs:
        flat.update(flatcfg.to_flat(obj))
    flat.update(extra or {})
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(flatcfg.dump_flat(flat))


def _load_volume(path) -> Volume:
    img = nifti.load(path)
    if not isinstance(img, Volume):
        raise NiftiError(f"{path}: expected a floating-point volume")
    return img


def _load_mask(path) -> Mask:
    img = nifti.load(path)
    if isinstance(img, Volume):
        return Mask(img.data[0] != 0)
    return img if isinstance(img, Mask) else Mask(img.labels > 0)


# -- subcommands -----------------------------------------------------------------

def cmd_phantom(args) -> int:
    spec, opts = _resolve(args, PhantomSpec, ArtifactOptions)
    if opts.artifact not in ("none", "bright", "dark"):
        raise flatcfg.ConfigError(f"artifact must be none, bright or dark, got {opts.artifact!r}")
    ds = generate_phantom(spec)
    if opts.artifact != "none":
        nz = spec.dims[2]
        z0 = nz // 2 - opts.artifact_slices // 2
        scale = {"scale_bright": opts.artifact_scale} if opts.artifact == "bright" else {"scale_dark": opts.artifact_scale}
        art_in, art_mask = inject_letter_artifact(ds.input_dwi, opts.artifact, (z0, z0 + opts.artifact_slices),
                                                  raster_scale=opts.artifact_raster_scale, mask=ds.mask, **scale)
        ds = ds.with_input(art_in, art_mask)
    out = save_dataset(ds, args.out)
    _snapshot(out, spec, opts)
    log.info("phantom seed %d written to %s", spec.seed, out)
    return 0


def cmd_fit(args) -> int:
    for p in (args.dwi, args.scheme, args.mask):
        if not Path(p).exists():
            raise FileNotFoundError(f"no such file: {p}")
    scheme = DiffusionScheme.load(args.scheme)
    fit = fit_volume(_load_volume(args.dwi), _load_mask(args.mask), scheme, weighted=args.weighted)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    nifti.write_nifti(fit.fa, out / "fa.nii")
    nifti.write_nifti(fit.md, out / "md.nii")
    (out / "config.toml").write_text(flatcfg.dump_flat({"dwi": str(args.dwi), "scheme": str(args.scheme),
                                                         "mask": str(args.mask), "weighted": args.weighted}))
    log.info("fitted %d voxels (%d clamped)", fit.summary.n_fitted, fit.summary.n_clamped)
    return 0


def cmd_train(args) -> int:
    (run,) = _resolve(args, TrainRunConfig)
    datasets = [load_dataset(d) for d in args.data]
    net = DUNet(run.net_config(), run.seed)
    out = Path(args.out)
    _snapshot(out, run, extra={"data": [str(d) for d in args.data]})
    net, hist = train(net, datasets, run.train_config())
    hist.write_csv(out / "history.csv")
    save_checkpoint(net, out / "best.ckpt")
    final = net.copy()
    if hist.final_state is not None:
        final.load_state(hist.final_state)
    save_checkpoint(final, out / "final.ckpt")
    log.info("trained %d epochs, best epoch %d", len(hist), hist.best_epoch)
    return 0


def cmd_infer(args) -> int:
    (run,) = _resolve(args, InferRunConfig)
    net = load_checkpoint(args.checkpoint)
    if run.dropout_override is not None:
        net = net.with_dropout_rate(run.dropout_override)
    vol = _load_volume(args.input)
    mask = _load_mask(args.mask) if args.mask else Mask.full(vol.dims)
    block = net.cfg.block_size
    spec = BlockSpec(block, (run.stride,) * 3 if run.stride else block)
    res = infer_volume(net, vol, mask, spec, run.n_passes, run.seed, run.workers, epsilon=run.epsilon)
    out = Path(args.out)
    _snapshot(out, run, extra={"checkpoint": str(args.checkpoint), "input": str(args.input),
                               "mask": str(args.mask or "")})
    write_outputs(res, out)
    if res.uncertainty is None:
        log.info("n_passes=1: CoV maps omitted, a coefficient of variation needs at least 2 passes")
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    pred = Path(args.pred)
    fa = _load_volume(pred / "fa_mean.nii" if (pred / "fa_mean.nii").exists() else pred / "fa_gt.nii")
    md = _load_volume(pred / "md_mean.nii" if (pred / "md_mean.nii").exists() else pred / "md_gt.nii")
    subjects = [{"subject": Path(args.data).name, "mae_fa": mae(fa, ds.gt_fa, ds.mask),
                 "mae_md": mae(md, ds.gt_md, ds.mask)}]
    tissue, contrast = {}, {}
    if (pred / "fa_cov.nii").exists():
        covs = [_load_volume(pred / f"{c}_cov.nii") for c in ("fa", "md")]
        tissue = tissue_uncertainty(covs[0], ds.labels, 0, args.min_voxels)
        art = _load_mask(args.artifact_mask) if args.artifact_mask else ds.artifact_mask
        if art is not None:
            contrast = {c: artifact_contrast(v, art, ds.mask) for c, v in zip(("fa", "md"), covs)}
    report = EvalReport(subjects, tissue, contrast, {"data": str(args.data), "pred": str(args.pred)})
    out = Path(args.out)
    emit_report(report, out)
    (out / "config.toml").write_text(flatcfg.dump_flat({"data": str(args.data), "pred": str(args.pred),
                                                         "min_voxels": args.min_voxels}))
    return 0


def _parse_values(raw: str, variable: str) -> list:
    try:
        vals = [float(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be comma-separated numbers, got {raw!r}") from None
    if not vals:
        raise UsageError("--values is empty")
    return vals if variable == "dropout_rate" else [int(v) for v in vals]


def cmd_sweep(args) -> int:
    (cfg,) = _resolve(args, ExperimentConfig)
    values = _parse_values(args.values, args.variable)
    cache = CheckpointCache(args.cache)
    log.info("derived subject seeds: train %s, test %s",
             [cfg.subject_seed("train", i) for i in range(max([cfg.n_train] + values) if args.variable ==
                                                           "n_training_subjects" else cfg.n_train)],
             [cfg.subject_seed("test", i) for i in range(cfg.n_test)])
    if args.variable == "dropout_rate":
        table = sweep_dropout(values, cfg, cache, args.workers)
    elif args.variable == "n_predictions":
        from .evaluation import subjects
        from .train import training_blocks
        train_sets = subjects(cfg, "train", cfg.n_train)
        blocks = training_blocks(train_sets, (cfg.block_size,) * 3, (cfg.train_stride,) * 3)
        net = cache.get_or_train(cfg, cfg.net_config(), train_sets, blocks)
        table = sweep_npredictions(values, net, dataclasses.replace(cfg, n_passes=max(values)), workers=args.workers)
    else:
        table = sweep_training_size(values, cfg, cache, args.workers)
    out = Path(args.out)
    emit_report(table, out)
    _snapshot(out, cfg, extra={"variable": args.variable, "values": values})
    log.info("cache hits: %d", cache.hits)
    return 0


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcdqmri", description="MC-dropout uncertainty for DL-based DTI maps.",
                                epilog="Extra --key value pairs override config keys of the subcommand.")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text, func, config=True):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=func)
        if config:
            sp.add_argument("--config", help="flat key = value config file")
        return sp

    sp = add("phantom", "generate a synthetic dataset directory", cmd_phantom)
    sp.add_argument("--out", required=True)

    sp = add("fit", "log-linear tensor fit to FA/MD maps", cmd_fit, config=False)
    sp.add_argument("--dwi", required=True)
    sp.add_argument("--scheme", required=True)
    sp.add_argument("--mask", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--weighted", action="store_true")

    sp = add("train", "train a DU-Net on dataset directories", cmd_train)
    sp.add_argument("--data", required=True, nargs="+")
    sp.add_argument("--out", required=True)

    sp = add("infer", "Monte Carlo dropout inference on a 4-channel input", cmd_infer)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--mask")
    sp.add_argument("--out", required=True)

    sp = add("eval", "score predicted maps against a dataset", cmd_eval, config=False)
    sp.add_argument("--data", required=True, help="dataset directory with ground truth")
    sp.add_argument("--pred", required=True, help="directory with fa_mean.nii/md_mean.nii (and *_cov.nii)")
    sp.add_argument("--artifact-mask")
    sp.add_argument("--min-voxels", type=int, default=100)
    sp.add_argument("--out", required=True)

    sp = add("sweep", "dropout-rate, prediction-count or training-size sweep", cmd_sweep)
    sp.add_argument("--variable", required=True, choices=["dropout_rate", "n_predictions", "n_training_subjects"])
    sp.add_argument("--values", required=True, help="comma-separated list")
    sp.add_argument("--cache", help="checkpoint cache directory")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr, force=True)
    try:
        args.overrides = _split_overrides(extra)
        if args.overrides and args.func in (cmd_fit, cmd_eval):
            raise UsageError(f"{args.command} takes no config overrides: {', '.join(args.overrides)}")
        return args.func(args)
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"mcdqmri {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"mcdqmri {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
