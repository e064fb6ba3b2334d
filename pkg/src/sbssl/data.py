"""Exam volumes on disk, augmentation, and the synthetic planted-band dataset.

On-disk layout mirrors MRNet::

    <root>/<split>/<plane>/<exam_id>.npy
    <root>/<split>-labels.csv          # header: exam_id,label
"""

from __future__ import annotations

import ast
import csv
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

NPY_MAGIC = b"\x93NUMPY"
_SUPPORTED = {"|u1": np.uint8, "<f4": np.float32, "<f8": np.float64}


class NpyFormatError(ValueError):
    """Base class for malformed NPY containers."""


class BadMagicError(NpyFormatError):
    pass


class HeaderError(NpyFormatError):
    pass


class FortranOrderError(NpyFormatError):
    pass


class UnsupportedDtypeError(NpyFormatError):
    pass


class ShapeRankError(NpyFormatError):
    pass


class PayloadLengthError(NpyFormatError):
    pass


class DataError(ValueError):
    """Dataset layout or content problem."""


@dataclass
class Volume:
    exam_id: str
    slices: np.ndarray  # (f, H, W) float32 in [0, 1]
    label: int | None = None
    plane: str = "sagittal"

    def __post_init__(self):
        if self.slices.ndim != 3 or self.slices.shape[0] < 1:
            raise DataError(f"volume {self.exam_id!r} must be (f>=1, H, W), got {self.slices.shape}")

    @property
    def num_slices(self):
        return self.slices.shape[0]


# -- NPY container ------------------------------------------------------------

def parse_npy(buf):
    """Parse NPY v1.0/v2.0 bytes; returns the raw (f, H, W) array (not rescaled)."""
    if len(buf) < 10 or buf[:6] != NPY_MAGIC:
        raise BadMagicError("missing \\x93NUMPY magic string")
    major = buf[6]
    if major == 1:
        (hlen,) = struct.unpack("<H", buf[8:10])
        start = 10
    elif major in (2, 3):
        if len(buf) < 12:
            raise HeaderError("truncated v2 header-length field")
        (hlen,) = struct.unpack("<I", buf[8:12])
        start = 12
    else:
        raise HeaderError(f"unsupported NPY format version {major}.{buf[7]}")
    raw = buf[start:start + hlen]
    if len(raw) != hlen:
        raise HeaderError("header is shorter than its length field")
    try:
        header = ast.literal_eval(raw.decode("latin1" if major < 3 else "utf8"))
    except (ValueError, SyntaxError) as exc:
        raise HeaderError(f"header is not a Python literal: {exc}") from None
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise HeaderError(f"header must have exactly descr/fortran_order/shape keys, got {header!r}")
    if header["fortran_order"]:
        raise FortranOrderError("fortran-ordered payloads are not supported")
    descr = header["descr"]
    if not isinstance(descr, str) or descr not in _SUPPORTED:
        raise UnsupportedDtypeError(f"dtype {descr!r} not supported (uint8, float32, float64 only)")
    shape = header["shape"]
    if not isinstance(shape, tuple) or len(shape) != 3:
        raise ShapeRankError(f"expected a rank-3 (f, H, W) array, got shape {shape!r}")
    dtype = np.dtype(_SUPPORTED[descr])
    need = int(np.prod(shape)) * dtype.itemsize
    payload = buf[start + hlen:]
    if len(payload) != need:
        raise PayloadLengthError(f"payload has {len(payload)} bytes, shape {shape} needs {need}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape)


def normalize_intensity(arr):
    """uint8 -> /255; float already in [0, 1] kept; other floats min-max scaled."""
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / np.float32(255.0)
    out = np.asarray(arr, dtype=np.float32)
    lo, hi = float(out.min()), float(out.max())
    if lo >= 0.0 and hi <= 1.0:
        return out.copy()
    if hi == lo:
        return np.zeros_like(out)
    return ((out - lo) / (hi - lo)).astype(np.float32)


def read_npy(path, label=None, plane="sagittal"):
    path = Path(path)
    arr = parse_npy(path.read_bytes())
    return Volume(path.stem, normalize_intensity(arr), label, plane)


def npy_bytes(arr):
    """Serialise a C-order array as NPY; v1.0 unless the header needs v2.0."""
    arr = np.ascontiguousarray(arr)
    descr = np.lib.format.dtype_to_descr(arr.dtype)
    shape = repr(tuple(int(s) for s in arr.shape))
    header = "{'descr': %r, 'fortran_order': False, 'shape': %s, }" % (descr, shape)
    body = header.encode("latin1")
    for major, fmt, prefix in ((1, "<H", 10), (2, "<I", 12)):
        pad = -(prefix + len(body) + 1) % 64
        hlen = len(body) + pad + 1
        if major == 2 or hlen < 2 ** 16:
            break
    head = NPY_MAGIC + bytes([major, 0]) + struct.pack(fmt, hlen) + body + b" " * pad + b"\n"
    return head + arr.tobytes()


def write_npy(volume, path):
    slices = volume.slices if isinstance(volume, Volume) else np.asarray(volume)
    if slices.size == 0:
        raise DataError("refusing to write an empty volume")
    Path(path).write_bytes(npy_bytes(slices.astype(np.float32, copy=False)))


def write_labels(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["exam_id", "label"])
        for exam_id, label in rows:
            w.writerow([exam_id, int(label)])


def read_labels(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["exam_id", "label"]:
            raise DataError(f"{path}: expected header exam_id,label, got {header}")
        return [(row[0], int(row[1])) for row in reader if row]


def labels_path(root, split):
    return Path(root) / f"{split}-labels.csv"


def load_split(root, split, plane="sagittal"):
    """Load every exam of a split listed in its label manifest."""
    root = Path(root)
    manifest = labels_path(root, split)
    if not manifest.exists():
        raise DataError(f"label manifest {manifest} not found")
    vols = []
    for exam_id, label in read_labels(manifest):
        f = root / split / plane / f"{exam_id}.npy"
        if not f.exists():
            raise DataError(f"exam file {f} listed in manifest is missing")
        vols.append(read_npy(f, label=label, plane=plane))
    if not vols:
        raise DataError(f"split {split!r} under {root} is empty")
    return vols


# -- augmentation -------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    crop: bool = True
    crop_scale: tuple = (0.8, 1.0)
    flip: bool = True
    flip_p: float = 0.5
    blur: bool = True
    blur_p: float = 0.5
    blur_sigma: tuple = (0.1, 2.0)
    sharpness: bool = True
    sharpness_p: float = 0.5
    sharpness_range: tuple = (0.5, 2.0)
    contrast: bool = True
    contrast_p: float = 0.5
    contrast_range: tuple = (0.8, 1.2)

    @classmethod
    def off(cls):
        return cls(crop=False, flip=False, blur=False, sharpness=False, contrast=False)


def resize_bilinear(img, out_h, out_w):
    """Corner-aligned bilinear resize of a 2-D array."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    ys = np.linspace(0.0, h - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def sample_augment_params(cfg, rng, size):
    """Draw one set of transform parameters (shared by all slices of a volume)."""
    p = {}
    if cfg.crop:
        scale = rng.uniform(*cfg.crop_scale)
        side = max(1, int(round(size * np.sqrt(scale))))
        p["crop"] = (int(rng.integers(0, size - side + 1)), int(rng.integers(0, size - side + 1)), side)
    if cfg.flip and rng.random() < cfg.flip_p:
        p["flip"] = True
    if cfg.blur and rng.random() < cfg.blur_p:
        p["blur"] = float(rng.uniform(*cfg.blur_sigma))
    if cfg.sharpness and rng.random() < cfg.sharpness_p:
        p["sharpness"] = float(rng.uniform(*cfg.sharpness_range))
    if cfg.contrast and rng.random() < cfg.contrast_p:
        p["contrast"] = float(rng.uniform(*cfg.contrast_range))
    return p


def apply_augment(img, params):
    """Apply crop-resize, flip, blur, sharpness, contrast (in that order); clamp to [0, 1]."""
    dtype = img.dtype
    out = np.asarray(img, dtype=np.float64)
    h, w = out.shape
    if "crop" in params:
        top, left, side = params["crop"]
        out = resize_bilinear(out[top:top + side, left:left + side], h, w)
    if params.get("flip"):
        out = out[:, ::-1]
    if "blur" in params:
        out = ndimage.gaussian_filter(out, params["blur"], mode="nearest")
    if "sharpness" in params:
        smooth = ndimage.uniform_filter(out, 3, mode="nearest")
        out = smooth + params["sharpness"] * (out - smooth)
    if "contrast" in params:
        m = out.mean()
        out = m + params["contrast"] * (out - m)
    return np.clip(out, 0.0, 1.0).astype(dtype)


def augment(img, cfg, rng):
    if not params_enabled(cfg):
        return img
    return apply_augment(img, sample_augment_params(cfg, rng, img.shape[-1]))


def augment_volume(slices, cfg, rng):
    if not params_enabled(cfg):
        return slices
    params = sample_augment_params(cfg, rng, slices.shape[-1])
    return np.stack([apply_augment(s, params) for s in slices])


def params_enabled(cfg):
    return cfg.crop or cfg.flip or cfg.blur or cfg.sharpness or cfg.contrast


# -- synthetic planted-band exams ---------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    n_train: int = 200
    n_valid: int = 60
    f_min: int = 6
    f_max: int = 10
    size: int = 32
    positive_rate: float = 0.25
    band_width: int = 3
    band_contrast: float = 0.35
    band_slices: int = 3
    noise_std: float = 0.02
    texture_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.positive_rate < 1.0:
            raise DataError(f"positive_rate must lie in (0, 1), got {self.positive_rate}")
        if not 1 <= self.f_min <= self.f_max:
            raise DataError(f"slice range must satisfy 1 <= f_min <= f_max, got {self.f_min}..{self.f_max}")
        if self.n_train < 1:
            raise DataError("n_train must be positive")

    def to_dict(self):
        return asdict(self)


def band_mask(size, width):
    """Anti-diagonal band through the image centre, ``width`` pixels wide."""
    yy, xx = np.mgrid[0:size, 0:size]
    return np.abs(yy + xx - (size - 1)) < width


def band_slice_range(f, band_slices):
    k = min(band_slices, f)
    start = (f - k) // 2
    return start, start + k


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1.0


def _background(rng, f, size, noise_std, texture_std):
    """Knee-like sagittal slices: soft tissue plus two bright bones across a joint gap.

    Structure sizes shrink away from the middle slice; per-exam jitter moves
    and rescales everything slightly. Texture is smoothed Gaussian noise;
    ``noise_std`` adds white noise on top.
    """
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    cy, cx = 0.5 + rng.uniform(-0.05, 0.05, size=2)
    tissue = rng.uniform(0.3, 0.4)
    bone = rng.uniform(0.65, 0.8)
    gap = rng.uniform(0.04, 0.07)
    r_fem, r_tib = rng.uniform(0.17, 0.22), rng.uniform(0.15, 0.2)
    slices = np.empty((f, size, size))
    for s in range(f):
        z = (s - (f - 1) / 2) / max(f, 2)
        shrink = np.sqrt(max(1.0 - (1.6 * z) ** 2, 0.2))
        img = np.full((size, size), 0.05)
        img[_ellipse(yy, xx, cy, cx, 0.42 * shrink, 0.36 * shrink)] = tissue
        img[_ellipse(yy, xx, cy - gap - r_fem * shrink * 0.8, cx + 0.03, r_fem * shrink, r_fem * shrink * 1.1)] = bone
        img[_ellipse(yy, xx, cy + gap + r_tib * shrink * 0.9, cx - 0.02, r_tib * shrink, r_tib * shrink * 1.3)] = bone * 0.95
        img = ndimage.gaussian_filter(img, 0.8)
        if texture_std:
            img += ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.0) * texture_std
        if noise_std:
            img += rng.standard_normal((size, size)) * noise_std
        slices[s] = img
    return slices


def synth_exams(spec, n, rng, prefix):
    n_pos = int(round(spec.positive_rate * n))
    labels = np.zeros(n, dtype=int)
    labels[rng.permutation(n)[:n_pos]] = 1
    band = band_mask(spec.size, spec.band_width)
    vols = []
    for i in range(n):
        f = int(rng.integers(spec.f_min, spec.f_max + 1))
        # background draws do not depend on the label
        slices = _background(rng, f, spec.size, spec.noise_std, spec.texture_std)
        if labels[i]:
            lo, hi = band_slice_range(f, spec.band_slices)
            slices[lo:hi][:, band] += spec.band_contrast
        vols.append(Volume(f"{prefix}{i:04d}", np.clip(slices, 0.0, 1.0).astype(np.float32), int(labels[i])))
    return vols


def generate_synthetic(spec):
    """Deterministic train/valid splits of planted-band exams: {'train': [...], 'valid': [...]}."""
    rng = np.random.default_rng(spec.seed)
    out = {"train": synth_exams(spec, spec.n_train, rng, "")}
    if spec.n_valid:
        out["valid"] = synth_exams(spec, spec.n_valid, rng, "v")
    return out


def write_dataset(splits, root, plane="sagittal"):
    root = Path(root)
    for split, vols in splits.items():
        d = root / split / plane
        d.mkdir(parents=True, exist_ok=True)
        for v in vols:
            write_npy(v, d / f"{v.exam_id}.npy")
        write_labels(labels_path(root, split), [(v.exam_id, v.label) for v in vols])


def band_discriminant(volume, width, band_slices=3):
    """Mean intensity inside the band region over the mid slices."""
    lo, hi = band_slice_range(volume.num_slices, band_slices)
    band = band_mask(volume.slices.shape[-1], width)
    return float(volume.slices[lo:hi][:, band].mean())
