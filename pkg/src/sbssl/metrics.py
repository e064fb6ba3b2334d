"""ROC/AUC, threshold metrics, and class-token attention maps."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import resize_bilinear


@dataclass
class RocCurve:
    thresholds: np.ndarray  # descending; first entry +inf for the (0, 0) anchor
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    @property
    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def _binary(labels):
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    labels = labels.astype(int)
    p = int(labels.sum())
    if p == 0 or p == len(labels):
        raise ValueError("ROC needs both positive and negative labels")
    return labels, p, len(labels) - p


def roc_auc(scores, labels):
    """ROC over unique score thresholds (predict positive when score >= t).

    Tied scores form one step, so the curve makes a diagonal segment through
    them. The area is accumulated in integer counts, which makes it equal to
    the Mann-Whitney statistic (concordant + ties/2) / (P * N).
    """
    scores = np.asarray(scores, dtype=float)
    labels, p, n = _binary(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"{len(scores)} scores for {len(labels)} labels")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.r_[0, np.cumsum(y)[last]]
    fp = np.r_[0, np.cumsum(1 - y)[last]]
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return RocCurve(np.r_[np.inf, s[last]], fp / n, tp / p, (twice_area / 2) / (p * n))


def threshold_metrics(scores, labels, threshold=0.5):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    tn = int(np.sum(~pred & (labels == 0)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    return {
        "accuracy": (tp + tn) / max(len(labels), 1),
        "sensitivity": tp / (tp + fn) if tp + fn else float("nan"),
        "specificity": tn / (tn + fp) if tn + fp else float("nan"),
        "tp": tp, "fp": fp, "fn": fn, "tn": tn,
    }


def write_roc_csv(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, r in zip(curve.thresholds, curve.fpr, curve.tpr):
            w.writerow([repr(float(t)), repr(float(f)), repr(float(r))])
        w.writerow(["auc", repr(float(curve.auc)), ""])


# -- attention maps -----------------------------------------------------------

@dataclass
class AttentionMap:
    layer: int  # 1-indexed block
    grid: np.ndarray  # (gh, gw) in [0, 1]
    raw: np.ndarray  # head-averaged class-token weights before normalisation
    vmin: float
    vmax: float


def default_attention_layer(depth):
    """Block 10 for 12-block models; round(5L/6) when L < 10."""
    if depth >= 10:
        return 10
    return max(1, int(np.floor(5 * depth / 6 + 0.5)))


def attention_map(encoder, image, layer=None):
    """Head-averaged class-token attention over patches at ``layer`` (1-indexed)."""
    from .encoder import embed, encode
    from .tensor import no_grad

    cfg = encoder.config
    layer = default_attention_layer(cfg.depth) if layer is None else layer
    if not 1 <= layer <= cfg.depth:
        raise ValueError(f"layer {layer} out of range 1..{cfg.depth}")
    img = np.asarray(image, dtype=cfg.dtype)
    if img.ndim == 2:
        img = img[None]
    with no_grad():
        blocks = encode(embed(img[None], encoder), encoder, record_attention=True)
    attn = blocks.attentions[layer - 1][0]  # (heads, T, T)
    raw = attn[:, 0, 1:].mean(axis=0)
    g = cfg.patch.grid
    lo, hi = float(raw.min()), float(raw.max())
    grid = np.zeros(g * g) if hi == lo else (raw - lo) / (hi - lo)
    return AttentionMap(layer, grid.reshape(g, g), raw.reshape(g, g), lo, hi)


# Color ramp anchors (value, (r, g, b)): black-blue-cyan-yellow-red style heat map.
RAMP = (
    (0.00, (0, 0, 128)),
    (0.25, (0, 96, 255)),
    (0.50, (0, 224, 224)),
    (0.75, (255, 224, 0)),
    (1.00, (224, 0, 0)),
)


def color_ramp(values):
    v = np.clip(np.asarray(values, dtype=float), 0.0, 1.0)
    xs = [a for a, _ in RAMP]
    return np.stack([np.interp(v, xs, [c[i] for _, c in RAMP]) for i in range(3)], axis=-1)


def overlay_rgb(amap, image, alpha=0.5):
    """Blend the up-sampled, colour-mapped grid over a grayscale image in [0, 1]; uint8 RGB."""
    img = np.asarray(image, dtype=float)
    if img.ndim == 3:
        img = img[0]
    h, w = img.shape
    heat = color_ramp(resize_bilinear(amap.grid, h, w))
    gray = np.repeat(np.clip(img, 0, 1)[..., None] * 255.0, 3, axis=-1)
    return np.round((1 - alpha) * gray + alpha * heat).astype(np.uint8)


def render_overlay(amap, image, path, alpha=0.5):
    from PIL import Image

    Image.fromarray(overlay_rgb(amap, image, alpha), mode="RGB").save(path, format="PNG")
