"""Four-level encoder with a densely connected decoder grid and one shared head.

The decoder is a UNet++ grid: node (i, j) fuses every earlier node of row i with
an upsampled copy of node (i+1, j-1). Row-0 nodes at j = 1, 2, 3 feed the head,
which predicts a restored image (3 channels) plus a mask logit (1 channel).
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import blocks, ops
from .blocks import BlockParams, kaiming_uniform, zeros_param
from .engine import ConfigError, ShapeError, Tensor, tensor

LEVELS = 4

NESTED_NODES = [(2, 1), (1, 1), (0, 1), (1, 2), (0, 2), (0, 3)]
DIAGONAL_NODES = [(2, 1), (1, 2), (0, 3)]


@dataclass
class NetworkConfig:
    base_channels: int = 16
    levels: int = 4
    blocks_per_level: Tuple[int, ...] = (1, 1, 1, 1)
    heads_per_level: Tuple[int, ...] = (1, 2, 4, 8)
    gdfn_enabled: bool = True
    nested_enabled: bool = True
    deep_supervision_enabled: bool = True
    gdfn_dconv: bool = False

    def __post_init__(self):
        if self.levels != LEVELS:
            raise ConfigError(f"levels must be {LEVELS}, got {self.levels}")
        self.blocks_per_level = tuple(self.blocks_per_level)
        self.heads_per_level = tuple(self.heads_per_level)
        if len(self.blocks_per_level) != LEVELS or len(self.heads_per_level) != LEVELS:
            raise ConfigError("blocks_per_level and heads_per_level need one entry per level")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be positive")
        if any(n < 1 for n in self.blocks_per_level):
            raise ConfigError("every level needs at least one block")
        for i, h in enumerate(self.heads_per_level):
            if h < 1 or (self.base_channels << i) % h:
                raise ConfigError(
                    f"heads_per_level[{i}]={h} must divide {self.base_channels << i} channels"
                )

    def level_channels(self, i: int) -> int:
        return self.base_channels << i

    def decoder_nodes(self) -> List[Tuple[int, int]]:
        return list(NESTED_NODES if self.nested_enabled else DIAGONAL_NODES)


@dataclass
class DecoderNode:
    up_w: Tensor
    up_b: Tensor
    fuse_w: Tensor
    fuse_b: Tensor
    blocks: List[BlockParams]


@dataclass
class ModelParams:
    embed_w: Tensor
    embed_b: Tensor
    enc: List[List[BlockParams]]
    down: List[Tuple[Tensor, Tensor]]
    dec: Dict[Tuple[int, int], DecoderNode]
    head_w: Tensor
    head_b: Tensor


@dataclass
class ForwardOutputs:
    images: Dict[int, Tensor]
    masks: Dict[int, Tensor]          # sigmoid probabilities
    mask_logits: Dict[int, Tensor]    # pre-sigmoid, for the stable loss path
    stats: dict = field(default_factory=dict)


def _init_level_blocks(rng, cfg: NetworkConfig, level: int) -> List[BlockParams]:
    c = cfg.level_channels(level)
    return [
        blocks.init_block(rng, c, cfg.heads_per_level[level],
                          gdfn=cfg.gdfn_enabled, gdfn_dconv=cfg.gdfn_dconv)
        for _ in range(cfg.blocks_per_level[level])
    ]


def init_params(cfg: NetworkConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    c0 = cfg.base_channels
    embed_w = kaiming_uniform(rng, (c0, 4, 3, 3), fan_in=4 * 9)
    embed_b = zeros_param((c0,))

    enc = [_init_level_blocks(rng, cfg, i) for i in range(LEVELS)]
    down = []
    for i in range(LEVELS - 1):
        c = cfg.level_channels(i)
        down.append((kaiming_uniform(rng, (2 * c, 4 * c), fan_in=4 * c),
                     zeros_param((2 * c,))))

    dec: Dict[Tuple[int, int], DecoderNode] = {}
    for (i, j) in cfg.decoder_nodes():
        c = cfg.level_channels(i)
        deeper = cfg.level_channels(i + 1)
        arity = (j + 1) if cfg.nested_enabled else 2
        dec[(i, j)] = DecoderNode(
            up_w=kaiming_uniform(rng, (2 * deeper, deeper), fan_in=deeper),
            up_b=zeros_param((2 * deeper,)),
            fuse_w=kaiming_uniform(rng, (c, arity * c), fan_in=arity * c),
            fuse_b=zeros_param((c,)),
            blocks=_init_level_blocks(rng, cfg, i),
        )

    head_w = kaiming_uniform(rng, (4, c0, 3, 3), fan_in=c0 * 9)
    head_b = zeros_param((4,))
    return ModelParams(embed_w, embed_b, enc, down, dec, head_w, head_b)


def named_parameters(params: ModelParams) -> Dict[str, Tensor]:
    """Stable flat name -> tensor view of every trainable parameter."""
    out: Dict[str, Tensor] = {"embed.w": params.embed_w, "embed.b": params.embed_b}
    for i, level in enumerate(params.enc):
        for k, bp in enumerate(level):
            out.update(blocks.named_block_tensors(f"enc.{i}.block{k}", bp))
    for i, (w, b) in enumerate(params.down):
        out[f"down.{i}.w"] = w
        out[f"down.{i}.b"] = b
    for (i, j) in sorted(params.dec):
        node = params.dec[(i, j)]
        out[f"dec.{i}.{j}.up.w"] = node.up_w
        out[f"dec.{i}.{j}.up.b"] = node.up_b
        out[f"dec.{i}.{j}.fuse.w"] = node.fuse_w
        out[f"dec.{i}.{j}.fuse.b"] = node.fuse_b
        for k, bp in enumerate(node.blocks):
            out.update(blocks.named_block_tensors(f"dec.{i}.{j}.block{k}", bp))
    out["head.w"] = params.head_w
    out["head.b"] = params.head_b
    return out


def embed(params: ModelParams, image: Tensor) -> Tensor:
    b, c, h, w = image.shape
    if c != 3:
        raise ShapeError(f"expected 3 input channels, got {c}")
    if h % 8 or w % 8:
        raise ShapeError(f"spatial extent ({h}, {w}) must be divisible by 8")
    pad = tensor(np.zeros((b, 1, h, w)))
    return ops.conv3x3(ops.concat_channels([image, pad]), params.embed_w, params.embed_b)


def encode(params: ModelParams, f0: Tensor, cfg: NetworkConfig) -> List[Tensor]:
    latents = []
    x = f0
    for i in range(LEVELS):
        for bp in params.enc[i]:
            x = blocks.block_forward(x, bp)
        latents.append(x)
        if i < LEVELS - 1:
            w, b = params.down[i]
            x = ops.conv1x1(ops.space_to_depth(x), w, b)
    _check_ladder(latents, cfg, f0.shape)
    return latents


def _check_ladder(latents, cfg, f0_shape):
    b, _, h, w = f0_shape
    for i, lat in enumerate(latents):
        want = (b, cfg.level_channels(i), h >> i, w >> i)
        if lat.shape != want:
            raise ShapeError(f"latent {i} has shape {lat.shape}, expected {want}")


def _upsample(x: Tensor, node: DecoderNode) -> Tensor:
    return ops.depth_to_space(ops.conv1x1(x, node.up_w, node.up_b))


def decode(params: ModelParams, latents: List[Tensor], cfg: NetworkConfig):
    """Returns the grid of computed nodes plus the evaluation order."""
    grid: Dict[Tuple[int, int], Tensor] = {(i, 0): latents[i] for i in range(LEVELS)}
    order = cfg.decoder_nodes()
    for (i, j) in order:
        node = params.dec[(i, j)]
        up = _upsample(grid[(i + 1, j - 1)], node)
        if cfg.nested_enabled:
            skips = [grid[(i, t)] for t in range(j)]
        else:
            skips = [grid[(i, 0)]]
        x = ops.conv1x1(ops.concat_channels(skips + [up]), node.fuse_w, node.fuse_b)
        for bp in node.blocks:
            x = blocks.block_forward(x, bp)
        grid[(i, j)] = x
    return grid, order


def _predict_with_logits(params: ModelParams, feature: Tensor, clamp: bool):
    out = ops.conv3x3(feature, params.head_w, params.head_b)
    img = ops.slice_channels(out, 0, 3)
    logit = ops.slice_channels(out, 3, 4)
    mask = ops.sigmoid(logit)
    if clamp:
        img = tensor(np.clip(img.numpy(), 0.0, 1.0))
    return img, mask, logit


def predict(params: ModelParams, feature: Tensor, clamp: bool):
    img, mask, _ = _predict_with_logits(params, feature, clamp)
    return img, mask


def forward(params: ModelParams, image: Tensor, cfg: NetworkConfig,
            mode: str = "train") -> ForwardOutputs:
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    f0 = embed(params, image)
    latents = encode(params, f0, cfg)
    grid, order = decode(params, latents, cfg)

    if mode == "train" and cfg.nested_enabled and cfg.deep_supervision_enabled:
        depths = (1, 2, 3)
    else:
        depths = (3,)

    images, masks, logits = {}, {}, {}
    for d in depths:
        img, mask, logit = _predict_with_logits(params, grid[(0, d)], clamp=(mode == "infer"))
        images[d] = img
        masks[d] = mask
        logits[d] = logit
    stats = {"decoder_nodes": order, "head_calls": len(depths)}
    return ForwardOutputs(images=images, masks=masks, mask_logits=logits, stats=stats)
