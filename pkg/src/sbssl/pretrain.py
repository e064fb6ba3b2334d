"""Masked-reconstruction pretraining of the encoder with a light decoder.

The decoder sums patch tokens from a chosen set of encoder blocks, runs two
point-wise projections with a GeLU between them, and maps each token back to
a p x p pixel patch (a stride-p transposed convolution). The objective is the
l1 error over corrupted pixels only, divided by the number of such pixels.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .corruption import CorruptionSpec, corrupt_batch
from .data import AugmentConfig, Volume, augment
from .encoder import EncoderConfig, EncoderState, embed, encode, init_fan_in
from .patch_embed import patches_to_image
from .tensor import Adam, ShapeError, Tensor, gelu, matmul

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


def round_half_up(x):
    return int(math.floor(x + 0.5))


def default_block_set(depth):
    """Rounded {L/2, 2L/3, 5L/6, L}; gives {6, 8, 10, 12} at L = 12."""
    if depth < 1:
        raise ValueError("block set needs depth >= 1")
    picks = {round_half_up(depth * f) for f in (1 / 2, 2 / 3, 5 / 6)} | {depth}
    return tuple(sorted(b for b in picks if b >= 1))


def decoder_param_shapes(cfg):
    k = cfg.embed_dim
    return {
        "dec.fc1.weight": (k, k), "dec.fc1.bias": (k,),
        "dec.fc2.weight": (k, k), "dec.fc2.bias": (k,),
        "dec.deconv.weight": (k, cfg.patch.patch_dim), "dec.deconv.bias": (cfg.channels,),
    }


def init_decoder(cfg, rng):
    """Weights ~ N(0, 1/fan_in), biases zero."""
    return init_fan_in(decoder_param_shapes(cfg), rng, np.dtype(cfg.dtype))


def _check_blocks(block_set, depth):
    if not block_set:
        raise ValueError("decoder block set is empty")
    bad = [b for b in block_set if not 1 <= b <= depth]
    if bad:
        raise ValueError(f"block indices {bad} out of range 1..{depth}")


def decode(blocks, block_set, dec, cfg):
    """Reconstruct (B, C, H, W) images from the sum of patch tokens of blocks in ``block_set`` (1-indexed)."""
    _check_blocks(block_set, len(blocks.outputs))
    total = None
    for b in sorted(block_set):
        e = blocks.outputs[b - 1]
        if e.ndim == 2:
            e = e.reshape((1,) + e.shape)
        e = e[:, 1:, :]
        total = e if total is None else total + e
    h = gelu(matmul(total, dec["dec.fc1.weight"]) + dec["dec.fc1.bias"])
    h = matmul(h, dec["dec.fc2.weight"]) + dec["dec.fc2.bias"]
    pix = matmul(h, dec["dec.deconv.weight"])
    img = patches_to_image(pix, cfg.patch_size, cfg.channels, cfg.image_size, cfg.image_size)
    return img + dec["dec.deconv.bias"].reshape(1, cfg.channels, 1, 1)


def masked_l1_loss(x, xbar, mask):
    """Sum of |x - xbar| over masked pixels divided by the masked-pixel count (0 when nothing is masked)."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    mask = np.asarray(mask, dtype=bool)
    if x.shape != xbar.shape or mask.shape != x.shape:
        raise ShapeError(f"masked_l1_loss shapes differ: x {x.shape}, xbar {xbar.shape}, mask {mask.shape}")
    count = int(mask.sum())
    diff = xbar.data - x
    if count == 0:
        return Tensor._from_op(np.zeros((), dtype=xbar.dtype), (xbar,), lambda g: (np.zeros_like(diff),))
    weight = mask / count
    value = np.asarray((np.abs(diff) * weight).sum(), dtype=xbar.dtype)
    return Tensor._from_op(value, (xbar,), lambda g: ((g * np.sign(diff) * weight).astype(xbar.dtype),))


def cosine_weight_decay(epoch, total_epochs, wd_start=0.04, wd_end=0.4):
    if total_epochs <= 0:
        return wd_start
    return wd_end + (wd_start - wd_end) * (1.0 + math.cos(math.pi * epoch / total_epochs)) / 2.0


def learning_rate(epoch, total_epochs, base_lr, min_lr=1e-6, warmup_frac=0.05):
    """Linear warmup over the first ``warmup_frac`` of epochs, then cosine decay to ``min_lr``."""
    warm = int(round(warmup_frac * total_epochs))
    if epoch < warm:
        return base_lr * (epoch + 1) / warm
    span = max(total_epochs - warm - 1, 1)
    t = min((epoch - warm) / span, 1.0)
    return min_lr + (base_lr - min_lr) * (1.0 + math.cos(math.pi * t)) / 2.0


@dataclass
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 5e-4
    min_lr: float = 1e-6
    warmup_frac: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    wd_start: float = 0.04
    wd_end: float = 0.4
    blocks: tuple | None = None
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    slices_per_exam: int | None = None
    seed: int = 0

    def block_set(self, depth):
        b = tuple(self.blocks) if self.blocks else default_block_set(depth)
        _check_blocks(b, depth)
        return b

    def to_dict(self):
        return asdict(self)


@dataclass
class PretrainResult:
    encoder: EncoderState
    decoder: dict
    optimizer: Adam
    log: list
    epoch: int


def _slice_pool(data):
    """Normalise input to a list of per-exam (f, H, W) arrays."""
    if isinstance(data, np.ndarray):
        if data.ndim != 3:
            raise ValueError(f"expected (N, H, W) slices, got {data.shape}")
        return [data[i:i + 1] for i in range(len(data))]
    pool = [v.slices if isinstance(v, Volume) else np.asarray(v) for v in data]
    return [p if p.ndim == 3 else p[None] for p in pool]


def epoch_slices(pool, slices_per_exam, rng):
    """Flat list of (exam, slice) index pairs for one epoch."""
    pairs = []
    for e, vol in enumerate(pool):
        f = vol.shape[0]
        if slices_per_exam is None or slices_per_exam >= f:
            pairs.extend((e, s) for s in range(f))
        else:
            pairs.extend((e, int(s)) for s in np.sort(rng.choice(f, slices_per_exam, replace=False)))
    return pairs


def reconstruct(images, encoder, decoder, block_set):
    """Forward pass for a (B, C, H, W) batch; returns the reconstruction tensor."""
    seq = embed(images, encoder)
    return decode(encode(seq, encoder), block_set, decoder, encoder.config)


def pretrain(data, enc_cfg: EncoderConfig, cfg: PretrainConfig, resume=None, on_epoch=None):
    """Train encoder + decoder on masked reconstruction.

    ``data`` is an (N, H, W) slice array or a list of volumes. ``resume`` is a
    :class:`PretrainResult` to continue from. ``on_epoch(result)`` is called
    after every epoch. Per-sample randomness is keyed on (seed, epoch, index),
    so splitting a run and resuming reproduces the unsplit run.
    """
    pool = _slice_pool(data)
    if not pool:
        raise ValueError("pretraining dataset is empty")
    dtype = np.dtype(enc_cfg.dtype)
    block_set = cfg.block_set(enc_cfg.depth)
    if resume is None:
        rng = np.random.default_rng([cfg.seed, 0])
        encoder = EncoderState.create(enc_cfg, rng)
        decoder = init_decoder(enc_cfg, rng)
        opt = Adam({**encoder.params, **decoder}, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
        result = PretrainResult(encoder, decoder, opt, [], 0)
    else:
        result = resume
    encoder, decoder, opt = result.encoder, result.decoder, result.optimizer

    for epoch in range(result.epoch, cfg.epochs):
        erng = np.random.default_rng([cfg.seed, 1, epoch])
        pairs = epoch_slices(pool, cfg.slices_per_exam, erng)
        order = erng.permutation(len(pairs))
        opt.lr = learning_rate(epoch, cfg.epochs, cfg.lr, cfg.min_lr, cfg.warmup_frac)
        opt.weight_decay = cosine_weight_decay(epoch, cfg.epochs - 1, cfg.wd_start, cfg.wd_end)
        total, seen = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            clean, corrupted, masks = [], [], []
            for j in idx:
                srng = np.random.default_rng([cfg.seed, 2, epoch, int(j)])
                e, s = pairs[j]
                img = augment(pool[e][s], cfg.augment, srng).astype(dtype)[None]
                xh, m, _ = corrupt_batch(img[None], cfg.corruption, srng, enc_cfg.patch_size)
                clean.append(img)
                corrupted.append(xh[0])
                masks.append(m[0])
            x = np.stack(clean)
            xbar = reconstruct(np.stack(corrupted), encoder, decoder, block_set)
            loss = masked_l1_loss(x, xbar, np.stack(masks))
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch + 1}, batch {lo // cfg.batch_size}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(idx)
            seen += len(idx)
        row = {"epoch": epoch + 1, "mean_loss": total / seen, "wd": opt.weight_decay, "lr": opt.lr}
        result.log.append(row)
        result.epoch = epoch + 1
        log.info("pretrain epoch %d loss %.5f", epoch + 1, row["mean_loss"])
        if on_epoch is not None:
            on_epoch(result)
    return result


# -- persistence --------------------------------------------------------------

def save_pretrain_checkpoint(path, result, run_config=None):
    arrays = {k: v.data for k, v in result.encoder.params.items()}
    arrays.update({k: v.data for k, v in result.decoder.items()})
    for k, m in result.optimizer.state["m"].items():
        arrays["opt.m." + k] = m
    for k, v in result.optimizer.state["v"].items():
        arrays["opt.v." + k] = v
    meta = {
        "kind": "pretrain",
        "encoder": result.encoder.config.to_dict(),
        "epoch": result.epoch,
        "opt_t": result.optimizer.state["t"],
        "log": result.log,
        "config": run_config,
    }
    checkpoint.save(path, arrays, meta)


def load_pretrain_checkpoint(path, cfg: PretrainConfig | None = None):
    meta, arrays = checkpoint.load(path)
    enc_cfg = EncoderConfig(**meta["encoder"])
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()
              if not k.startswith(("opt.", "dec."))}
    decoder = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items() if k.startswith("dec.")}
    encoder = EncoderState(enc_cfg, params)
    opt = Adam({**encoder.params, **decoder})
    if cfg is not None:
        opt.beta1, opt.beta2 = cfg.beta1, cfg.beta2
    if "opt.m.cls_token" in arrays:
        opt.state["m"] = {k: arrays["opt.m." + k].copy() for k in opt.params}
        opt.state["v"] = {k: arrays["opt.v." + k].copy() for k in opt.params}
        opt.state["t"] = meta["opt_t"]
    return PretrainResult(encoder, decoder, opt, list(meta["log"]), meta["epoch"]), meta


def write_loss_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "mean_loss", "wd", "lr"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
