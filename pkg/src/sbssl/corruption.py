"""Group-masked patch corruption.

A mask is sampled on the patch grid as a union of random axis-aligned
rectangles ("groups" of connected patches), then expanded p x p to pixels.
Masked pixels are replaced by zeros, ones or uniform noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MODES = ("zeros", "ones", "noise")


class CorruptionError(ValueError):
    pass


@dataclass(frozen=True)
class CorruptionSpec:
    mode: str = "zeros"
    ratio_max: float = 0.70
    min_group: int = 1
    max_group: int = 6
    seed: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise CorruptionError(f"unknown corruption mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 <= self.ratio_max <= 1.0:
            raise CorruptionError(f"ratio_max must lie in [0, 1], got {self.ratio_max}")
        if not 1 <= self.min_group <= self.max_group:
            raise CorruptionError(f"group bounds must satisfy 1 <= min <= max, got {self.min_group}, {self.max_group}")


@dataclass
class CorruptionMask:
    patch_mask: np.ndarray  # (gh, gw) bool
    patch_size: int
    target: float = 0.0
    groups: list = field(default_factory=list)  # (top, left, height, width) in patches

    @property
    def pixel_mask(self):
        p = self.patch_size
        return np.repeat(np.repeat(self.patch_mask, p, axis=0), p, axis=1)

    @property
    def coverage(self):
        return float(self.patch_mask.mean())

    def max_group_fraction(self):
        if not self.groups:
            return 0.0
        return max(h * w for _, _, h, w in self.groups) / self.patch_mask.size


def sample_mask(grid, spec, rng, patch_size=16):
    """Draw a target ratio ~ U(0, ratio_max) and stack rectangles until it is reached.

    ``grid`` is (rows, cols) of the patch grid. Rectangle sides are uniform on
    [min_group, max_group] clipped to the grid, positions uniform. Overlaps are
    allowed, so coverage can overshoot the target by at most the last group.
    """
    gh, gw = grid
    if gh < 1 or gw < 1:
        raise CorruptionError(f"patch grid must be at least 1x1, got {grid}")
    target = float(rng.uniform(0.0, spec.ratio_max))
    covered = np.zeros((gh, gw), dtype=bool)
    groups = []
    total = gh * gw
    count = 0
    while count < target * total:
        h = int(rng.integers(min(spec.min_group, gh), min(spec.max_group, gh) + 1))
        w = int(rng.integers(min(spec.min_group, gw), min(spec.max_group, gw) + 1))
        top = int(rng.integers(0, gh - h + 1))
        left = int(rng.integers(0, gw - w + 1))
        covered[top:top + h, left:left + w] = True
        groups.append((top, left, h, w))
        count = int(covered.sum())
    return CorruptionMask(covered, patch_size, target, groups)


def apply_corruption(x, mask, spec, rng):
    """Replace masked pixels of ``x`` (H x W or C x H x W); unmasked pixels are untouched."""
    x = np.asarray(x)
    m = mask.pixel_mask if isinstance(mask, CorruptionMask) else np.asarray(mask, dtype=bool)
    if x.shape[-2:] != m.shape:
        raise CorruptionError(f"image {x.shape} and mask {m.shape} do not match")
    m = np.broadcast_to(m, x.shape)
    if spec.mode == "zeros":
        fill = np.zeros((), dtype=x.dtype)
    elif spec.mode == "ones":
        fill = np.ones((), dtype=x.dtype)
    else:
        fill = rng.uniform(0.0, 1.0, size=x.shape).astype(x.dtype)
    return np.where(m, fill, x)


def corrupt_batch(images, spec, rng, patch_size):
    """Corrupt a (B, C, H, W) batch; returns (corrupted, pixel masks (B, C, H, W), masks)."""
    images = np.asarray(images)
    b, c, h, w = images.shape
    grid = (h // patch_size, w // patch_size)
    out = np.empty_like(images)
    pix = np.empty(images.shape, dtype=bool)
    masks = []
    for i in range(b):
        m = sample_mask(grid, spec, rng, patch_size)
        out[i] = apply_corruption(images[i], m, spec, rng)
        pix[i] = m.pixel_mask
        masks.append(m)
    return out, pix, masks


def write_mask_pgm(mask, path):
    """Write a pixel mask as an 8-bit binary PGM (P5), 255 = manipulated."""
    from PIL import Image

    m = mask.pixel_mask if isinstance(mask, CorruptionMask) else np.asarray(mask, dtype=bool)
    Image.fromarray(m.astype(np.uint8) * 255, mode="L").save(path, format="PPM")
