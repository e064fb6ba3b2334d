"""Slice-based volume classification.

Each slice of an exam goes through the encoder on its own; the class-token
outputs form ``y`` (f x K). The head applies FC(K) + GeLU to every row, pools
over slices (mean by default, max optional), then a 2-way linear layer.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .data import AugmentConfig, augment_volume
from .encoder import EncoderConfig, EncoderState, class_features, embed, encode, init_fan_in
from .metrics import roc_auc, threshold_metrics
from .pretrain import NumericError, cosine_weight_decay, learning_rate
from .tensor import Adam, Tensor, cross_entropy, gelu, matmul, no_grad, stack

log = logging.getLogger(__name__)

POOLINGS = ("mean", "max")


class ArchitectureMismatch(ValueError):
    pass


def head_param_shapes(embed_dim, classes=2):
    k = embed_dim
    return {
        "head.fc.weight": (k, k), "head.fc.bias": (k,),
        "head.out.weight": (k, classes), "head.out.bias": (classes,),
    }


def init_head(cfg, rng):
    return init_fan_in(head_param_shapes(cfg.embed_dim), rng, np.dtype(cfg.dtype))


def encode_volume(slices, encoder):
    """(f, H, W) slices -> class-token features y of shape (f, K)."""
    slices = np.asarray(slices)
    if slices.ndim != 3 or slices.shape[0] == 0:
        raise ValueError(f"volume must be (f>=1, H, W), got {slices.shape}")
    images = slices[:, None].astype(encoder.config.dtype, copy=False)
    return class_features(encode(embed(images, encoder), encoder), encoder)


def _slice_features(y, head):
    return gelu(matmul(y, head["head.fc.weight"]) + head["head.fc.bias"])


def _pool(h, pooling):
    if pooling == "mean":
        return h.mean(axis=0)
    if pooling == "max":
        return h.max(axis=0)
    raise ValueError(f"unknown pooling {pooling!r}; expected one of {POOLINGS}")


def classify(y, head, pooling="mean"):
    """Two logits for one exam's slice features ``y`` (f x K)."""
    if y.shape[0] == 0:
        raise ValueError("cannot classify an exam with no slices")
    pooled = _pool(_slice_features(y, head), pooling)
    return matmul(pooled.reshape(1, -1), head["head.out.weight"]).reshape(-1) + head["head.out.bias"]


def forward_volumes(volumes, encoder, head, pooling="mean"):
    """Logits (N, 2) for a list of (f_i, H, W) slice stacks, in one encoder batch."""
    sizes = [len(v) for v in volumes]
    images = np.concatenate([np.asarray(v) for v in volumes])
    y = encode_volume(images, encoder)
    logits, lo = [], 0
    for f in sizes:
        logits.append(classify(y[lo:lo + f], head, pooling))
        lo += f
    return stack(logits)


def softmax_positive(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e[..., 1] / e.sum(axis=-1)


def predict_proba(volumes, encoder, head, pooling="mean", batch=16):
    """Positive-class probability for each volume (slices as (f, H, W) arrays or Volumes)."""
    stacks = [getattr(v, "slices", v) for v in volumes]
    out = []
    with no_grad():
        for lo in range(0, len(stacks), batch):
            out.append(softmax_positive(forward_volumes(stacks[lo:lo + batch], encoder, head, pooling).data))
    return np.concatenate(out) if out else np.zeros(0)


def oversample_indices(labels, rng):
    """Majority indices once each plus minority indices drawn uniformly with replacement to match."""
    labels = np.asarray(labels).astype(int)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("oversampling needs both classes present")
    if len(pos) == len(neg):
        return np.concatenate([neg, pos])
    major, minor = (neg, pos) if len(neg) > len(pos) else (pos, neg)
    draws = rng.choice(minor, size=len(major), replace=True)
    return np.concatenate([major, draws])


@dataclass
class FinetuneConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 5e-4
    min_lr: float = 1e-6
    warmup_frac: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    wd_start: float = 0.04
    wd_end: float = 0.4
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    pooling: str = "mean"
    freeze_encoder: bool = False
    oversample: bool = True
    seed: int = 0
    member: int = 0  # ensemble index; keys every rng together with seed

    def to_dict(self):
        return asdict(self)


@dataclass
class Model:
    encoder: EncoderState
    head: dict
    pooling: str = "mean"

    def predict(self, volumes):
        return predict_proba(volumes, self.encoder, self.head, self.pooling)


@dataclass
class FinetuneResult:
    model: Model
    log: list


def finetune(train, valid, enc_cfg: EncoderConfig, cfg: FinetuneConfig, encoder=None):
    """Train encoder + head with cross-entropy on oversampled exams.

    ``encoder`` is a pretrained :class:`EncoderState` (copied, not mutated) or
    ``None`` to start from random initialisation. ``train``/``valid`` are lists
    of labelled volumes; the log records validation accuracy and AUC per epoch.
    """
    if not train:
        raise ValueError("fine-tuning needs training exams")
    if cfg.pooling not in POOLINGS:
        raise ValueError(f"unknown pooling {cfg.pooling!r}")
    rng = np.random.default_rng([cfg.seed, 10, cfg.member])
    if encoder is None:
        encoder = EncoderState.create(enc_cfg, rng)
    else:
        if encoder.config.to_dict() != enc_cfg.to_dict():
            raise ArchitectureMismatch(
                f"checkpoint encoder {encoder.config.to_dict()} does not match config {enc_cfg.to_dict()}"
            )
        encoder = encoder.copy()
    head = init_head(enc_cfg, rng)
    trainable = dict(head) if cfg.freeze_encoder else {**encoder.params, **head}
    if cfg.freeze_encoder:
        for p in encoder.params.values():
            p.requires_grad = False
    opt = Adam(trainable, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    labels = np.array([v.label for v in train], dtype=int)
    dtype = np.dtype(enc_cfg.dtype)
    model = Model(encoder, head, cfg.pooling)
    rows = []
    for epoch in range(cfg.epochs):
        erng = np.random.default_rng([cfg.seed, 11, cfg.member, epoch])
        idx = oversample_indices(labels, erng) if cfg.oversample else np.arange(len(train))
        idx = idx[erng.permutation(len(idx))]
        opt.lr = learning_rate(epoch, cfg.epochs, cfg.lr, cfg.min_lr, cfg.warmup_frac)
        opt.weight_decay = cosine_weight_decay(epoch, cfg.epochs - 1, cfg.wd_start, cfg.wd_end)
        total = 0.0
        for lo in range(0, len(idx), cfg.batch_size):
            chunk = idx[lo:lo + cfg.batch_size]
            stacks = []
            for pos, j in enumerate(chunk):
                arng = np.random.default_rng([cfg.seed, 12, cfg.member, epoch, lo + pos])
                stacks.append(augment_volume(train[j].slices, cfg.augment, arng).astype(dtype, copy=False))
            loss = cross_entropy(forward_volumes(stacks, encoder, head, cfg.pooling), labels[chunk])
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite fine-tuning loss at epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(chunk)
        row = {"epoch": epoch + 1, "train_loss": total / len(idx), "lr": opt.lr, "wd": opt.weight_decay}
        if valid:
            row.update(evaluate(model, valid))
        rows.append(row)
        log.info("finetune epoch %d %s", epoch + 1, {k: round(v, 4) for k, v in row.items()})
    return FinetuneResult(model, rows)


def evaluate(model, volumes, threshold=0.5):
    probs = model.predict(volumes)
    labels = np.array([v.label for v in volumes], dtype=int)
    out = {"val_accuracy": threshold_metrics(probs, labels, threshold)["accuracy"]}
    out["val_auc"] = roc_auc(probs, labels).auc if 0 < labels.sum() < len(labels) else float("nan")
    return out


# -- ensembles ----------------------------------------------------------------

def ensemble_probabilities(member_probs):
    """Mean of per-member positive probabilities; ``member_probs`` is (members, exams) or (members,)."""
    arr = np.asarray(member_probs, dtype=float)
    if arr.shape[0] == 0:
        raise ValueError("ensemble has no members")
    return arr.mean(axis=0)


def ensemble_predict(members, volume):
    """Probability for one volume averaged over ``members`` (Model instances)."""
    if not members:
        raise ValueError("ensemble has no members")
    return float(ensemble_probabilities([m.predict([volume])[0] for m in members]))


def ensemble_predict_many(members, volumes):
    if not members:
        raise ValueError("ensemble has no members")
    return ensemble_probabilities([m.predict(volumes) for m in members])


# -- persistence --------------------------------------------------------------

def save_model(path, model, run_config=None, log_rows=None):
    arrays = {k: v.data for k, v in model.encoder.params.items()}
    arrays.update({k: v.data for k, v in model.head.items()})
    meta = {
        "kind": "model",
        "encoder": model.encoder.config.to_dict(),
        "pooling": model.pooling,
        "log": log_rows or [],
        "config": run_config,
    }
    checkpoint.save(path, arrays, meta)


def load_model(path):
    meta, arrays = checkpoint.load(path)
    if meta.get("kind") != "model":
        raise checkpoint.CheckpointError(f"{path} holds a {meta.get('kind')!r} checkpoint, not a model")
    cfg = EncoderConfig(**meta["encoder"])
    enc = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items() if not k.startswith("head.")}
    head = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items() if k.startswith("head.")}
    return Model(EncoderState(cfg, enc), head, meta["pooling"]), meta


def write_predictions(path, exam_ids, probs, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["exam_id", "probability", "label"])
        for e, p, y in zip(exam_ids, probs, labels):
            w.writerow([e, repr(float(p)), "" if y is None else int(y)])
