"""Slice image -> token sequence.

Token layout is fixed: index 0 is the class token, indices 1..n are the
non-overlapping p x p patches in row-major grid order.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, concat, matmul


@dataclass(frozen=True)
class PatchConfig:
    image_size: int = 256
    patch_size: int = 16
    embed_dim: int = 384
    channels: int = 1

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ShapeError(
                f"image size {self.image_size} is not divisible by patch size {self.patch_size}"
            )

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid * self.grid

    @property
    def patch_dim(self):
        return self.channels * self.patch_size * self.patch_size


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def image_to_patches(images, patch_size):
    """(B, C, H, W) -> (B, n, C*p*p), patches row-major, each flattened as (C, p, p)."""
    images = _as_tensor(images)
    b, c, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"image {h}x{w} is not divisible into {patch_size}x{patch_size} patches")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, c, gh, patch_size, gw, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch_size * patch_size)


def patches_to_image(patches, patch_size, channels, height, width):
    """Inverse of :func:`image_to_patches`."""
    patches = _as_tensor(patches)
    b = patches.shape[0]
    gh, gw = height // patch_size, width // patch_size
    x = patches.reshape(b, gh, gw, channels, patch_size, patch_size)
    x = x.transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, height, width)


def patchify(images, weight, bias, patch_size):
    """Project every p x p patch to ``K`` dims.

    Equivalent to a convolution with K kernels of size p and stride p. Accepts
    a single (C, H, W) image, giving (n, K), or a batch (B, C, H, W), giving
    (B, n, K). ``weight`` is (C*p*p, K).
    """
    images = _as_tensor(images)
    single = images.ndim == 3
    if single:
        images = images.reshape((1,) + images.shape)
    if images.ndim != 4:
        raise ShapeError(f"patchify expects (C,H,W) or (B,C,H,W), got {images.shape}")
    patches = image_to_patches(images, patch_size)
    if patches.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"patch vectors have {patches.shape[-1]} entries but projection expects {weight.shape[0]}"
        )
    tokens = matmul(patches, weight) + bias
    return tokens.reshape(tokens.shape[1:]) if single else tokens


def assemble_sequence(patches, class_token, pos_embed):
    """Prepend the class token and add position embeddings once.

    ``patches`` is (n, K) or (B, n, K); ``class_token`` is (1, K) or (K,);
    ``pos_embed`` is (n+1, K).
    """
    single = patches.ndim == 2
    if single:
        patches = patches.reshape((1,) + patches.shape)
    b, n, k = patches.shape
    if pos_embed.shape != (n + 1, k):
        raise ShapeError(f"pos_embed must be {(n + 1, k)}, got {pos_embed.shape}")
    cls = class_token.reshape(1, 1, k)
    if b > 1:
        cls = cls + Tensor(np.zeros((b, 1, k), dtype=patches.dtype))
    seq = concat([cls, patches], axis=1) + pos_embed
    return seq.reshape(n + 1, k) if single else seq
