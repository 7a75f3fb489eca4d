"""Transformer block operating across channels at full spatial resolution.

Attention here mixes channels, not pixels: queries and keys are flattened over
space, L2-normalized, and their Gram matrix (head_dim x head_dim) is softmaxed,
so the map's size does not depend on the input resolution.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .engine import ConfigError, Tensor, tensor


def kaiming_uniform(rng, shape, fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


# A dozen-plus residual additions sit on the path to the deepest output; with
# unit-gain branch projections the stream's scale grows exponentially in depth
# and early training is spent renormalizing. Dampen the last projection of
# each branch (roughly 1/sqrt(n_residuals)) so the stream stays near unit
# scale at init.
RESIDUAL_GAIN = 0.2


def residual_proj(rng, shape, fan_in: int) -> Tensor:
    t = kaiming_uniform(rng, shape, fan_in)
    t.data *= RESIDUAL_GAIN
    return t


def zeros_param(shape) -> Tensor:
    return tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return tensor(np.ones(shape), requires_grad=True)


@dataclass
class ConvProj:
    """Pointwise channel mix followed by a depthwise 3x3 refinement."""

    w: Tensor   # (c_out, c_in)
    b: Tensor   # (c_out,)
    dw: Tensor  # (c_out, 3, 3)


@dataclass
class AttentionParams:
    q: ConvProj
    k: ConvProj
    v: ConvProj
    sigma: Tensor  # (heads,) learnable temperature on the score matrix
    out_w: Tensor  # (c, c)
    out_b: Tensor  # (c,)


@dataclass
class FeedForwardParams:
    w1: Tensor            # (2 * hidden, c)
    b1: Tensor            # (2 * hidden,)
    dw: Optional[Tensor]  # (2 * hidden, 3, 3) or None
    w2: Tensor            # (c, hidden)
    b2: Tensor            # (c,)


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttentionParams
    ln2_g: Optional[Tensor]
    ln2_b: Optional[Tensor]
    ffn: Optional[FeedForwardParams]


def conv_proj(x: Tensor, p: ConvProj) -> Tensor:
    return ops.dconv3x3(ops.conv1x1(x, p.w, p.b), p.dw)


def attention_forward(x: Tensor, p: AttentionParams, return_attention: bool = False):
    """Cross-channel attention over L2-normalized flattened feature maps."""
    b, c, h, w = x.shape
    heads = p.sigma.shape[0]
    if c % heads:
        raise ConfigError(f"channels {c} not divisible by heads {heads}")
    head_dim = c // heads

    def flatten_heads(t):
        return ops.reshape(t, (b, heads, head_dim, h * w))

    q = flatten_heads(conv_proj(x, p.q))
    k = flatten_heads(conv_proj(x, p.k))
    v = flatten_heads(conv_proj(x, p.v))

    q = ops.l2_normalize(q, axis=-1)
    k = ops.l2_normalize(k, axis=-1)

    scores = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2)))
    scores = ops.mul(scores, ops.reshape(p.sigma, (1, heads, 1, 1)))
    attn = ops.softmax(scores, axis=-1)

    mixed = ops.reshape(ops.matmul(attn, v), (b, c, h, w))
    out = ops.conv1x1(mixed, p.out_w, p.out_b)
    if return_attention:
        return out, attn
    return out


def gdfn_core(x: Tensor, p: FeedForwardParams) -> Tensor:
    """Gated feed-forward: expand, split, gate one half with gelu of the other."""
    hidden = ops.conv1x1(x, p.w1, p.b1)
    if p.dw is not None:
        hidden = ops.dconv3x3(hidden, p.dw)
    gate, value = ops.split_half_channels(hidden)
    return ops.conv1x1(ops.mul(ops.gelu(gate), value), p.w2, p.b2)


def block_forward(x: Tensor, p: BlockParams) -> Tensor:
    y = ops.add(x, attention_forward(ops.layer_norm(x, p.ln1_g, p.ln1_b), p.attn))
    if p.ffn is None:
        return y
    return ops.add(y, gdfn_core(ops.layer_norm(y, p.ln2_g, p.ln2_b), p.ffn))


def init_conv_proj(rng, c_in: int, c_out: int) -> ConvProj:
    return ConvProj(
        w=kaiming_uniform(rng, (c_out, c_in), fan_in=c_in),
        b=zeros_param((c_out,)),
        dw=kaiming_uniform(rng, (c_out, 3, 3), fan_in=9),
    )


def init_attention(rng, c: int, heads: int) -> AttentionParams:
    if c % heads:
        raise ConfigError(f"channels {c} not divisible by heads {heads}")
    return AttentionParams(
        q=init_conv_proj(rng, c, c),
        k=init_conv_proj(rng, c, c),
        v=init_conv_proj(rng, c, c),
        sigma=ones_param((heads,)),
        out_w=residual_proj(rng, (c, c), fan_in=c),
        out_b=zeros_param((c,)),
    )


def init_ffn(rng, c: int, expansion: int, dconv: bool) -> FeedForwardParams:
    hidden = expansion * c
    return FeedForwardParams(
        w1=kaiming_uniform(rng, (2 * hidden, c), fan_in=c),
        b1=zeros_param((2 * hidden,)),
        dw=kaiming_uniform(rng, (2 * hidden, 3, 3), fan_in=9) if dconv else None,
        w2=residual_proj(rng, (c, hidden), fan_in=hidden),
        b2=zeros_param((c,)),
    )


def init_block(rng, c: int, heads: int, expansion: int = 2,
               gdfn: bool = True, gdfn_dconv: bool = False) -> BlockParams:
    return BlockParams(
        ln1_g=ones_param((c,)),
        ln1_b=zeros_param((c,)),
        attn=init_attention(rng, c, heads),
        ln2_g=ones_param((c,)) if gdfn else None,
        ln2_b=zeros_param((c,)) if gdfn else None,
        ffn=init_ffn(rng, c, expansion, gdfn_dconv) if gdfn else None,
    )


def named_proj_tensors(prefix, p: ConvProj):
    yield f"{prefix}.w", p.w
    yield f"{prefix}.b", p.b
    yield f"{prefix}.dw", p.dw


def named_block_tensors(prefix, p: BlockParams):
    """Flat (name, tensor) pairs; names are stable checkpoint keys."""
    yield f"{prefix}.ln1.g", p.ln1_g
    yield f"{prefix}.ln1.b", p.ln1_b
    yield from named_proj_tensors(f"{prefix}.attn.q", p.attn.q)
    yield from named_proj_tensors(f"{prefix}.attn.k", p.attn.k)
    yield from named_proj_tensors(f"{prefix}.attn.v", p.attn.v)
    yield f"{prefix}.attn.sigma", p.attn.sigma
    yield f"{prefix}.attn.out.w", p.attn.out_w
    yield f"{prefix}.attn.out.b", p.attn.out_b
    if p.ffn is not None:
        yield f"{prefix}.ln2.g", p.ln2_g
        yield f"{prefix}.ln2.b", p.ln2_b
        yield f"{prefix}.ffn.w1", p.ffn.w1
        yield f"{prefix}.ffn.b1", p.ffn.b1
        if p.ffn.dw is not None:
            yield f"{prefix}.ffn.dw", p.ffn.dw
        yield f"{prefix}.ffn.w2", p.ffn.w2
        yield f"{prefix}.ffn.b2", p.ffn.b2
