"""Stage 2: cross-attend a candidate pair's token sets and score the match.

Each cross block runs two attention directions from the block's input (each
stream queries the other), adds residuals, then applies a per-stream MLP.
Attended tokens are pooled and normalized; the pair score is the dot product
of the two refined embeddings, symmetrized over the two argument orders so
verification never depends on probe/gallery order.
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
    as_tensor,
    dot,
    gap,
    l2_normalize,
    layer_norm,
    multi_head_attention,
    relu_mlp,
    scale,
)


@dataclass(frozen=True)
class FusionConfig:
    width: int = 64
    heads: int = 4
    blocks: int = 1
    mlp_hidden: int = 128

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.blocks < 1:
            raise ConfigError(f"need at least one cross-attention block, got {self.blocks}")


@dataclass
class CrossBlockParams:
    """One cross block: per-stream norms, one attention per direction, MLPs."""

    ln1_a_gamma: Tensor
    ln1_a_beta: Tensor
    ln1_b_gamma: Tensor
    ln1_b_beta: Tensor
    attn_a: AttentionParams  # stream A queries attend over stream B
    attn_b: AttentionParams  # stream B queries attend over stream A
    ln2_a_gamma: Tensor
    ln2_a_beta: Tensor
    ln2_b_gamma: Tensor
    ln2_b_beta: Tensor
    mlp_a_w1: Tensor
    mlp_a_b1: Tensor
    mlp_a_w2: Tensor
    mlp_a_b2: Tensor
    mlp_b_w1: Tensor
    mlp_b_b1: Tensor
    mlp_b_w2: Tensor
    mlp_b_b2: Tensor


@dataclass
class FusionParams:
    config: FusionConfig
    blocks: list = field(default_factory=list)

    def named_parameters(self) -> dict:
        out = {}
        for i, blk in enumerate(self.blocks):
            p = f"cross{i}."
            for stream_tag in ("a", "b"):
                out[f"{p}ln1_{stream_tag}.gamma"] = getattr(blk, f"ln1_{stream_tag}_gamma")
                out[f"{p}ln1_{stream_tag}.beta"] = getattr(blk, f"ln1_{stream_tag}_beta")
            for stream_tag in ("a", "b"):
                attn = getattr(blk, f"attn_{stream_tag}")
                for h in range(len(attn.wq)):
                    hp = f"{p}attn_{stream_tag}.h{h}."
                    out[hp + "wq"] = attn.wq[h]
                    out[hp + "bq"] = attn.bq[h]
                    out[hp + "wk"] = attn.wk[h]
                    out[hp + "bk"] = attn.bk[h]
                    out[hp + "wv"] = attn.wv[h]
                    out[hp + "bv"] = attn.bv[h]
                out[f"{p}attn_{stream_tag}.wo"] = attn.wo
                out[f"{p}attn_{stream_tag}.bo"] = attn.bo
            for stream_tag in ("a", "b"):
                out[f"{p}ln2_{stream_tag}.gamma"] = getattr(blk, f"ln2_{stream_tag}_gamma")
                out[f"{p}ln2_{stream_tag}.beta"] = getattr(blk, f"ln2_{stream_tag}_beta")
                out[f"{p}mlp_{stream_tag}.w1"] = getattr(blk, f"mlp_{stream_tag}_w1")
                out[f"{p}mlp_{stream_tag}.b1"] = getattr(blk, f"mlp_{stream_tag}_b1")
                out[f"{p}mlp_{stream_tag}.w2"] = getattr(blk, f"mlp_{stream_tag}_w2")
                out[f"{p}mlp_{stream_tag}.b2"] = getattr(blk, f"mlp_{stream_tag}_b2")
        return out


def _cross_attention_params(make, prefix: str, width: int, heads: int) -> AttentionParams:
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
        # zero output projection: blocks start as identity residual streams
        wo=make(prefix + "wo", (width, width), "zero_weight"),
        bo=make(prefix + "bo", (width,), "zero"),
        heads=heads,
        width=width,
    )


def build_fusion_params(config: FusionConfig, make) -> FusionParams:
    params = FusionParams(config=config)
    for i in range(config.blocks):
        p = f"cross{i}."
        fields = {}
        for tag in ("a", "b"):
            fields[f"ln1_{tag}_gamma"] = make(f"{p}ln1_{tag}.gamma", (config.width,), "one")
            fields[f"ln1_{tag}_beta"] = make(f"{p}ln1_{tag}.beta", (config.width,), "zero")
            fields[f"attn_{tag}"] = _cross_attention_params(
                make, f"{p}attn_{tag}.", config.width, config.heads
            )
            fields[f"ln2_{tag}_gamma"] = make(f"{p}ln2_{tag}.gamma", (config.width,), "one")
            fields[f"ln2_{tag}_beta"] = make(f"{p}ln2_{tag}.beta", (config.width,), "zero")
            fields[f"mlp_{tag}_w1"] = make(f"{p}mlp_{tag}.w1", (config.width, config.mlp_hidden), "weight")
            fields[f"mlp_{tag}_b1"] = make(f"{p}mlp_{tag}.b1", (config.mlp_hidden,), "zero")
            fields[f"mlp_{tag}_w2"] = make(f"{p}mlp_{tag}.w2", (config.mlp_hidden, config.width), "zero_weight")
            fields[f"mlp_{tag}_b2"] = make(f"{p}mlp_{tag}.b2", (config.width,), "zero")
        params.blocks.append(CrossBlockParams(**fields))
    return params


def init_fusion_params(config: FusionConfig, seed, dtype=np.float32,
                       trainable: bool = True) -> FusionParams:
    from .encoder import init_maker

    return build_fusion_params(config, init_maker(seed, dtype, trainable, scope="fusion"))


# ---------------------------------------------------------------------------
# forward path

def cross_attend(tokens_a, tokens_b, params: FusionParams):
    """Two-way cross-attention; both directions read the block's input."""
    a, b = as_tensor(tokens_a), as_tensor(tokens_b)
    width = params.config.width
    if a.data.shape[1] != width or b.data.shape[1] != width:
        raise ShapeError(
            f"token widths {a.data.shape[1]}/{b.data.shape[1]} do not match fusion width {width}"
        )
    for blk in params.blocks:
        na = layer_norm(a, blk.ln1_a_gamma, blk.ln1_a_beta)
        nb = layer_norm(b, blk.ln1_b_gamma, blk.ln1_b_beta)
        a = add(a, multi_head_attention(na, nb, blk.attn_a))
        b = add(b, multi_head_attention(nb, na, blk.attn_b))
        a = add(a, relu_mlp(layer_norm(a, blk.ln2_a_gamma, blk.ln2_a_beta),
                            [(blk.mlp_a_w1, blk.mlp_a_b1), (blk.mlp_a_w2, blk.mlp_a_b2)]))
        b = add(b, relu_mlp(layer_norm(b, blk.ln2_b_gamma, blk.ln2_b_beta),
                            [(blk.mlp_b_w1, blk.mlp_b_b1), (blk.mlp_b_w2, blk.mlp_b_b2)]))
    return a, b


def refined_embeddings(attended_a, attended_b):
    """GAP then L2-normalize each attended token set."""
    return l2_normalize(gap(attended_a)), l2_normalize(gap(attended_b))


def _directional_score(tokens_a, tokens_b, params: FusionParams):
    ra, rb = refined_embeddings(*cross_attend(tokens_a, tokens_b, params))
    return dot(ra, rb)


def match_score(tokens_a, tokens_b, params: FusionParams):
    """Fine-grained pair score in [-1, 1], symmetrized over argument order."""
    forward = _directional_score(tokens_a, tokens_b, params)
    backward = _directional_score(tokens_b, tokens_a, params)
    out = scale(add(as_tensor(forward), as_tensor(backward)), 0.5)
    if isinstance(tokens_a, Tensor) or isinstance(tokens_b, Tensor):
        return out
    return float(out.data)


def match_scores(pairs, params: FusionParams) -> np.ndarray:
    """Batched pair scoring: one score per (tokens_a, tokens_b) pair."""
    return np.array([float(as_tensor(match_score(a, b, params)).data) for a, b in pairs])


def score_matrix(tokens_rows, tokens_cols, params: FusionParams,
                 symmetric: bool = False) -> np.ndarray:
    """Dense fine-grained score matrix over two token-set lists.

    With `symmetric=True` (same list on both sides) only the upper triangle
    is computed and mirrored, exploiting exact score symmetry.
    """
    m, n = len(tokens_rows), len(tokens_cols)
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        start = i if symmetric else 0
        for j in range(start, n):
            s = float(as_tensor(match_score(tokens_rows[i], tokens_cols[j], params)).data)
            out[i, j] = s
            if symmetric and j != i:
                out[j, i] = s
    return out


def fused_score(global_sim: float, fine_sim: float, w: float = 1.0) -> float:
    """Blend the stage-1 cosine and the stage-2 fine score: w*fine + (1-w)*global."""
    if not (0.0 <= w <= 1.0):
        raise ConfigError(f"fusion weight must lie in [0, 1], got {w}")
    return w * fine_sim + (1.0 - w) * global_sim
