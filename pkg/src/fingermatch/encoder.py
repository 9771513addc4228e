"""Stage 1: image -> patch tokens -> unit-norm global embedding.

Non-overlapping patches are linearly embedded, summed with learned
positional rows, passed through pre-norm transformer blocks (self-attention
then MLP, each with a residual connection), pooled with GAP, and projected
by a ReLU MLP head. The final embedding is L2-normalized so downstream
similarity is a plain dot product. One shared encoder serves both
modalities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import stream
from .tensorops import (
    AttentionParams,
    Tensor,
    add,
    gap,
    l2_normalize,
    layer_norm,
    linear,
    multi_head_attention,
    relu_mlp,
)


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    width: int = 64
    layers: int = 2
    heads: int = 4
    mlp_hidden: int = 128
    embed_dim: int = 64

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2


@dataclass
class BlockParams:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    attn: AttentionParams
    ln2_gamma: Tensor
    ln2_beta: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


@dataclass
class EncoderParams:
    config: EncoderConfig
    embed_w: Tensor = None
    embed_b: Tensor = None
    pos: Tensor = None
    blocks: list = field(default_factory=list)
    head_w1: Tensor = None
    head_b1: Tensor = None
    head_w2: Tensor = None
    head_b2: Tensor = None

    def named_parameters(self) -> dict:
        out = {"embed.w": self.embed_w, "embed.b": self.embed_b, "pos": self.pos}
        for i, blk in enumerate(self.blocks):
            p = f"block{i}."
            out[p + "ln1.gamma"] = blk.ln1_gamma
            out[p + "ln1.beta"] = blk.ln1_beta
            for h in range(len(blk.attn.wq)):
                hp = f"{p}attn.h{h}."
                out[hp + "wq"] = blk.attn.wq[h]
                out[hp + "bq"] = blk.attn.bq[h]
                out[hp + "wk"] = blk.attn.wk[h]
                out[hp + "bk"] = blk.attn.bk[h]
                out[hp + "wv"] = blk.attn.wv[h]
                out[hp + "bv"] = blk.attn.bv[h]
            out[p + "attn.wo"] = blk.attn.wo
            out[p + "attn.bo"] = blk.attn.bo
            out[p + "ln2.gamma"] = blk.ln2_gamma
            out[p + "ln2.beta"] = blk.ln2_beta
            out[p + "mlp.w1"] = blk.mlp_w1
            out[p + "mlp.b1"] = blk.mlp_b1
            out[p + "mlp.w2"] = blk.mlp_w2
            out[p + "mlp.b2"] = blk.mlp_b2
        out["head.w1"] = self.head_w1
        out["head.b1"] = self.head_b1
        out["head.w2"] = self.head_w2
        out["head.b2"] = self.head_b2
        return out


def _attention_params(make, prefix: str, width: int, heads: int) -> AttentionParams:
    head_dim = width // heads
    kwargs = {k: [] for k in ("wq", "bq", "wk", "bk", "wv", "bv")}
    for h in range(heads):
        hp = f"{prefix}h{h}."
        kwargs["wq"].append(make(hp + "wq", (width, head_dim), "weight"))
        kwargs["bq"].append(make(hp + "bq", (head_dim,), "zero"))
        kwargs["wk"].append(make(hp + "wk", (width, head_dim), "weight"))
        kwargs["bk"].append(make(hp + "bk", (head_dim,), "zero"))
        kwargs["wv"].append(make(hp + "wv", (width, head_dim), "weight"))
        kwargs["bv"].append(make(hp + "bv", (head_dim,), "zero"))
    return AttentionParams(
        **kwargs,
        wo=make(prefix + "wo", (width, width), "weight"),
        bo=make(prefix + "bo", (width,), "zero"),
        heads=heads,
        width=width,
    )


def build_encoder_params(config: EncoderConfig, make) -> EncoderParams:
    """Assemble the parameter tree; `make(name, shape, kind)` supplies tensors.

    Kinds: weight (fan-in scaled), zero, one, pos (small random).
    """
    params = EncoderParams(config=config)
    params.embed_w = make("embed.w", (config.patch_dim, config.width), "weight")
    params.embed_b = make("embed.b", (config.width,), "zero")
    params.pos = make("pos", (config.tokens, config.width), "pos")
    for i in range(config.layers):
        p = f"block{i}."
        params.blocks.append(BlockParams(
            ln1_gamma=make(p + "ln1.gamma", (config.width,), "one"),
            ln1_beta=make(p + "ln1.beta", (config.width,), "zero"),
            attn=_attention_params(make, p + "attn.", config.width, config.heads),
            ln2_gamma=make(p + "ln2.gamma", (config.width,), "one"),
            ln2_beta=make(p + "ln2.beta", (config.width,), "zero"),
            mlp_w1=make(p + "mlp.w1", (config.width, config.mlp_hidden), "weight"),
            mlp_b1=make(p + "mlp.b1", (config.mlp_hidden,), "zero"),
            mlp_w2=make(p + "mlp.w2", (config.mlp_hidden, config.width), "weight"),
            mlp_b2=make(p + "mlp.b2", (config.width,), "zero"),
        ))
    params.head_w1 = make("head.w1", (config.width, config.mlp_hidden), "weight")
    params.head_b1 = make("head.b1", (config.mlp_hidden,), "zero")
    params.head_w2 = make("head.w2", (config.mlp_hidden, config.embed_dim), "weight")
    params.head_b2 = make("head.b2", (config.embed_dim,), "zero")
    return params


def init_maker(seed, dtype=np.float32, trainable: bool = True, scope: str = "encoder"):
    """Tensor factory for fresh parameters, keyed by (seed, scope, name)."""

    def make(name: str, shape: tuple, kind: str) -> Tensor:
        g = stream("init", seed, scope, name)
        if kind == "weight":
            fan_in = shape[0]
            data = g.normal(0.0, 1.0, size=shape) / np.sqrt(fan_in)
        elif kind == "pos":
            data = g.normal(0.0, 0.02, size=shape)
        elif kind == "one":
            data = np.ones(shape)
        elif kind in ("zero", "zero_weight"):
            data = np.zeros(shape)
        else:
            raise ConfigError(f"unknown parameter kind {kind!r}")
        return Tensor(data.astype(dtype), requires_grad=trainable)

    return make


def init_encoder_params(config: EncoderConfig, seed, dtype=np.float32,
                        trainable: bool = True) -> EncoderParams:
    return build_encoder_params(config, init_maker(seed, dtype, trainable, scope="encoder"))


# ---------------------------------------------------------------------------
# forward path

def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split a square image into flattened non-overlapping patches.

    Patches are enumerated row-major over the patch grid and each patch is
    flattened row-major.
    """
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ConfigError(f"patchify needs a square image, got shape {arr.shape}")
    size = arr.shape[0]
    if size % patch_size != 0:
        raise ConfigError(f"image size {size} not divisible by patch size {patch_size}")
    grid = size // patch_size
    return (
        arr.reshape(grid, patch_size, grid, patch_size)
        .transpose(0, 2, 1, 3)
        .reshape(grid * grid, patch_size * patch_size)
    )


def embed_patches(patches, embed_w, embed_b, pos):
    """Linear patch embedding plus positional rows: token[t] = Wx[t] + b + pos[t]."""
    projected = linear(patches, embed_w, embed_b)
    return add(projected, pos)


def _encoder_block(x, blk: BlockParams):
    normed = layer_norm(x, blk.ln1_gamma, blk.ln1_beta)
    x = add(x, multi_head_attention(normed, normed, blk.attn))
    hidden = relu_mlp(
        layer_norm(x, blk.ln2_gamma, blk.ln2_beta),
        [(blk.mlp_w1, blk.mlp_b1), (blk.mlp_w2, blk.mlp_b2)],
    )
    return add(x, hidden)


def encode(image: np.ndarray, params: EncoderParams, config: EncoderConfig):
    """Image -> (token set, unit-norm global embedding).

    Deterministic in (image, params); returns Tensors when params are
    Tensors (always), carrying the tape when parameters require gradients.
    """
    arr = np.asarray(image)
    expected = (config.image_size, config.image_size)
    if arr.shape != expected:
        raise ShapeError(f"image shape {arr.shape} does not match config {expected}")
    patches = patchify(arr, config.patch_size).astype(params.embed_w.data.dtype)
    tokens = embed_patches(patches, params.embed_w, params.embed_b, params.pos)
    for blk in params.blocks:
        tokens = _encoder_block(tokens, blk)
    pooled = gap(tokens)
    head = relu_mlp(pooled, [(params.head_w1, params.head_b1), (params.head_w2, params.head_b2)])
    return tokens, l2_normalize(head)
