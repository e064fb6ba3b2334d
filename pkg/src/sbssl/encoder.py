"""Vision-transformer backbone.

Pre-norm blocks: ``x + Proj(MSA(LN(x)))`` followed by ``x + W2 GeLU(W1 LN(x))``.
Every block output is kept so the reconstruction decoder can read
intermediate features, and attention probabilities are kept on request.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .patch_embed import PatchConfig, assemble_sequence, patchify
from .tensor import ShapeError, Tensor, gelu, layernorm, matmul, softmax_lastdim

INIT_STD = 0.02

PRESETS = {
    "vit-tiny": dict(embed_dim=192, depth=12, heads=3),
    "vit-small": dict(embed_dim=384, depth=12, heads=6),
    "vit-base": dict(embed_dim=768, depth=12, heads=12),
    "vit-nano": dict(embed_dim=64, depth=4, heads=2),
    "vit-micro": dict(embed_dim=128, depth=8, heads=4),
}
_ALIASES = {"vit-t": "vit-tiny", "vit-s": "vit-small", "vit-b": "vit-base"}


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    depth: int = 4
    heads: int = 2
    mlp_ratio: int = 4
    image_size: int = 32
    patch_size: int = 16
    channels: int = 1
    dtype: str = "float64"

    def __post_init__(self):
        if self.embed_dim % max(self.heads, 1):
            raise ShapeError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        PatchConfig(self.image_size, self.patch_size, self.embed_dim, self.channels)

    @property
    def head_dim(self):
        return self.embed_dim // self.heads

    @property
    def patch(self):
        return PatchConfig(self.image_size, self.patch_size, self.embed_dim, self.channels)

    @property
    def num_tokens(self):
        return self.patch.num_patches + 1

    def to_dict(self):
        return asdict(self)


def preset_fields(name):
    """Architecture fields a named preset fixes (aliases vit-t/s/b accepted)."""
    key = _ALIASES.get(name.lower(), name.lower())
    if key not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return dict(PRESETS[key])


def preset(name, **overrides):
    return EncoderConfig(**{**preset_fields(name), **overrides})


def encoder_param_shapes(cfg):
    """Canonical name -> shape for the patch embedding and all blocks."""
    k, hid = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
    p = cfg.patch
    shapes = {
        "patch.weight": (p.patch_dim, k),
        "patch.bias": (k,),
        "cls_token": (1, k),
        "pos_embed": (p.num_patches + 1, k),
    }
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        shapes.update({
            b + "ln1.gain": (k,), b + "ln1.bias": (k,),
            b + "attn.qkv.weight": (k, 3 * k), b + "attn.qkv.bias": (3 * k,),
            b + "attn.proj.weight": (k, k), b + "attn.proj.bias": (k,),
            b + "ln2.gain": (k,), b + "ln2.bias": (k,),
            b + "mlp.fc1.weight": (k, hid), b + "mlp.fc1.bias": (hid,),
            b + "mlp.fc2.weight": (hid, k), b + "mlp.fc2.bias": (k,),
        })
    shapes["norm.gain"] = (k,)
    shapes["norm.bias"] = (k,)
    return shapes


def init_params(shapes, rng, dtype):
    """Gaussian(0, 0.02) for weights and embeddings, ones for LN gains, zeros for biases."""
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".gain"):
            arr = np.ones(shape, dtype=dtype)
        elif name.endswith(".bias"):
            arr = np.zeros(shape, dtype=dtype)
        else:
            arr = (rng.standard_normal(shape) * INIT_STD).astype(dtype)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


def init_fan_in(shapes, rng, dtype):
    """Weights ~ N(0, 1/fan_in) with fan_in = shape[0]; biases zero."""
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".bias"):
            arr = np.zeros(shape, dtype=dtype)
        else:
            arr = (rng.standard_normal(shape) / math.sqrt(shape[0])).astype(dtype)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


@dataclass
class EncoderState:
    config: EncoderConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config, rng):
        return cls(config, init_params(encoder_param_shapes(config), rng, np.dtype(config.dtype)))

    def __getitem__(self, name):
        return self.params[name]

    def named_parameters(self):
        return self.params.items()

    def copy(self):
        return EncoderState(self.config, {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                                          for k, v in self.params.items()})


def count_parameters(cfg, include_norm=True):
    """Trainable scalars in the encoder (patch embedding, tokens, blocks, final norm).

    Decoder and classification head are excluded.
    """
    total = 0
    for name, shape in encoder_param_shapes(cfg).items():
        if not include_norm and name.startswith("norm."):
            continue
        total += int(np.prod(shape))
    return total


@dataclass
class BlockOutputs:
    """Per-block sequences (E_1..E_L) and, when recorded, attention tensors."""

    outputs: list
    attentions: list | None
    input: Tensor

    @property
    def final(self):
        return self.outputs[-1] if self.outputs else self.input

    def __len__(self):
        return len(self.outputs)


def self_attention(q, k, v):
    """softmax(q k^T / sqrt(d)) v over the last two axes; returns (output, probabilities)."""
    d = q.shape[-1]
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
    attn = softmax_lastdim(scores)
    return matmul(attn, v), attn


def msa_block(x, params, prefix, heads):
    """Pre-norm multi-head self-attention with residual; returns (output, attention)."""
    b, t, k = x.shape
    d = k // heads
    h = layernorm(x, params[prefix + "ln1.gain"], params[prefix + "ln1.bias"])
    qkv = matmul(h, params[prefix + "attn.qkv.weight"]) + params[prefix + "attn.qkv.bias"]
    qkv = qkv.reshape(b, t, 3, heads, d).transpose(2, 0, 3, 1, 4)
    out, attn = self_attention(qkv[0], qkv[1], qkv[2])
    out = out.transpose(0, 2, 1, 3).reshape(b, t, k)
    out = matmul(out, params[prefix + "attn.proj.weight"]) + params[prefix + "attn.proj.bias"]
    return x + out, attn


def mlp_block(x, params, prefix):
    h = layernorm(x, params[prefix + "ln2.gain"], params[prefix + "ln2.bias"])
    h = gelu(matmul(h, params[prefix + "mlp.fc1.weight"]) + params[prefix + "mlp.fc1.bias"])
    h = matmul(h, params[prefix + "mlp.fc2.weight"]) + params[prefix + "mlp.fc2.bias"]
    return x + h


def embed(images, state, use_pos_embed=True):
    """(B, C, H, W) images -> (B, n+1, K) token sequences."""
    cfg = state.config
    images = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=cfg.dtype))
    if images.ndim == 3:
        images = images.reshape((1,) + images.shape)
    tokens = patchify(images, state["patch.weight"], state["patch.bias"], cfg.patch_size)
    pos = state["pos_embed"] if use_pos_embed else Tensor(np.zeros(state["pos_embed"].shape, dtype=cfg.dtype))
    return assemble_sequence(tokens, state["cls_token"], pos)


def encode(seq, state, record_attention=False):
    """Run every block in order, keeping each block's output sequence."""
    single = seq.ndim == 2
    x = seq.reshape((1,) + seq.shape) if single else seq
    outputs, attns = [], [] if record_attention else None
    for i in range(state.config.depth):
        prefix = f"blocks.{i}."
        x, attn = msa_block(x, state.params, prefix, state.config.heads)
        x = mlp_block(x, state.params, prefix)
        outputs.append(x.reshape(x.shape[1:]) if single else x)
        if record_attention:
            attns.append(attn.data[0] if single else attn.data)
    return BlockOutputs(outputs, attns, seq)


def class_features(blocks, state):
    """Final-norm class-token output of each sequence: (B, K)."""
    final = blocks.final
    if final.ndim == 2:
        final = final.reshape((1,) + final.shape)
    cls = final[:, 0, :]
    return layernorm(cls, state["norm.gain"], state["norm.bias"])


def with_dtype(state, dtype):
    cfg = replace(state.config, dtype=np.dtype(dtype).name)
    return EncoderState(cfg, {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k)
                              for k, v in state.params.items()})
