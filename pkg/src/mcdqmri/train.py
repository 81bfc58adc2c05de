"""Block-wise training of DU-Net with Adam on a masked L1 loss."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .dunet import DUNet, masked_l1, normalize_input
from .nnengine import ParamTensor, RngStream, derive_stream_id
from .phantom import PhantomDataset
from .volume import BlockSpec, Volume, extract_blocks

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, history: "TrainHistory"):
        self.epoch = epoch
        self.history = history
        super().__init__(f"loss became non-finite in epoch {epoch}; restored best checkpoint")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Sequence[ParamTensor], state: AdamState) -> AdamState:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p in params:
        g = p.grad
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        v = state.v.setdefault(p.name, np.zeros_like(p.value))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.value -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.value.dtype)
        p.zero_grad()
    return state


@dataclass
class TrainConfig:
    epochs: int = 30
    blocks_per_epoch: Optional[int] = None
    val_fraction: float = 0.2
    seed: int = 0
    patience: int = 20
    lr: float = 1e-3
    stride: Optional[int] = None  # default: half the block size

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie strictly between 0 and 1")
        if self.epochs < 0 or self.lr < 0:
            raise ValueError("epochs and lr must be non-negative")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    best_epoch: int = -1
    final_state: Optional[dict] = field(default=None, repr=False)  # weights after the last epoch run

    def __len__(self):
        return len(self.train_loss)

    def write_csv(self, path: str | os.PathLike) -> None:
        # wall-clock seconds stay out of the file so reruns are byte-identical
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for i, row in enumerate(zip(self.train_loss, self.val_loss)):
                w.writerow([i, *(f"{v:.9g}" for v in row)])


class TrainingBlock(NamedTuple):
    x: np.ndarray     # (4, bx, by, bz) normalized inputs
    y: np.ndarray     # (2, bx, by, bz) FA, MD targets
    mask: np.ndarray  # (bx, by, bz)


def training_blocks(datasets: Sequence[PhantomDataset], block_size, stride=None) -> list[TrainingBlock]:
    """All mask-overlapping blocks of every dataset, in dataset then origin order."""
    bs = tuple(block_size)
    st = tuple(stride) if stride is not None else tuple(max(1, b // 2) for b in bs)
    spec = BlockSpec(bs, st)
    out = []
    for ds in datasets:
        x = normalize_input(ds.input_dwi.data, ds.mask)
        stacked = Volume(np.concatenate([x, ds.gt_fa.data, ds.gt_md.data]), ds.input_dwi.voxel_size_mm)
        for blk in extract_blocks(stacked, ds.mask, spec, drop_empty=True):
            d = blk.block.data
            out.append(TrainingBlock(np.array(d[:4]), np.array(d[4:]), np.array(blk.mask_block.bits)))
    return out


def split_dataset(blocks: Sequence, val_fraction: float = 0.2, seed: int = 0) -> tuple[list, list]:
    """Seeded block-level split; the validation share is round(n * val_fraction)."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie strictly between 0 and 1")
    n = len(blocks)
    order = np.random.default_rng([seed, 0xB10C]).permutation(n)
    n_val = min(int(round(n * val_fraction)), max(n - 1, 0))
    val = [blocks[i] for i in order[:n_val]]
    train = [blocks[i] for i in order[n_val:]]
    return train, val


def _validate(net: DUNet, blocks: Sequence[TrainingBlock]) -> float:
    losses = [masked_l1(net.forward(b.x[None], "deterministic"), b.y[None], b.mask)[0] for b in blocks]
    return float(np.mean(losses))


def train(net: DUNet, datasets: Sequence[PhantomDataset], cfg: TrainConfig,
          blocks: Optional[Sequence[TrainingBlock]] = None) -> tuple[DUNet, TrainHistory]:
    """Train ``net`` in place; the returned network holds the best-validation weights."""
    if blocks is None:
        if not datasets:
            raise ValueError("train needs at least one dataset")
        stride = None if cfg.stride is None else (cfg.stride,) * 3
        blocks = training_blocks(datasets, net.cfg.block_size, stride)
    if not blocks:
        raise ValueError("no training blocks overlap the masks")
    train_set, val_set = split_dataset(blocks, cfg.val_fraction, cfg.seed)
    params = list(net.params.values())
    state = AdamState(lr=cfg.lr)
    history = TrainHistory()
    best_state, best_loss, stale = net.state(), math.inf, 0
    net.zero_grad()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        if cfg.blocks_per_epoch is not None:
            order = order[:cfg.blocks_per_epoch]
        losses = []
        for step, i in enumerate(order):
            b = train_set[i]
            stream = RngStream(cfg.seed, derive_stream_id(epoch, step))
            pred = net.forward(b.x[None], "train", stream)
            loss, grad = masked_l1(pred, b.y[None], b.mask)
            if not math.isfinite(loss):
                net.load_state(best_state)
                raise TrainingDiverged(epoch, history)
            net.backward(grad)
            adam_step(params, state)
            losses.append(loss)
        train_loss = float(np.mean(losses))
        val_loss = _validate(net, val_set) if val_set else train_loss
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.seconds.append(time.perf_counter() - t0)
        log.debug("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        if val_loss < best_loss:
            best_loss, best_state, stale = val_loss, net.state(), 0
            history.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop after epoch %d (best %d)", epoch, history.best_epoch)
                break
    history.final_state = net.state()
    net.load_state(best_state)
    return net, history
