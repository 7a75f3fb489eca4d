"""Training objectives: mask BCE, image L1, multi-scale feature L1, weighted total.

The feature loss runs both images through a small frozen random-weight conv
pyramid. That stands in for a pretrained backbone at this scale; the loss keeps
the multi-scale activation-difference structure, and the extractor interface
accepts any stage list, so a pretrained one can be dropped in unchanged.
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from . import ops
from .blocks import kaiming_uniform
from .engine import ConfigError, ShapeError, Tensor, tensor


@dataclass
class LossWeights:
    lambda_d: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    lambda_mask: float = 1.0
    lambda_perc: float = 0.25

    def __post_init__(self):
        self.lambda_d = tuple(float(v) for v in self.lambda_d)
        if len(self.lambda_d) != 3:
            raise ConfigError("lambda_d needs one weight per depth (3)")
        if any(v < 0 for v in self.lambda_d + (self.lambda_mask, self.lambda_perc)):
            raise ConfigError("loss weights must be >= 0")


@dataclass
class FeatureExtractor:
    """Frozen conv stages; stage k halves the running spatial extent."""

    stages: List[Tuple[Tensor, Tensor]]  # (w, b) per stage, requires_grad=False


EXTRACTOR_STAGE_IN = (3, 32, 32)
EXTRACTOR_MID = 8  # conv output channels; space_to_depth turns these into 32


def init_extractor(seed: int = 0) -> FeatureExtractor:
    rng = np.random.default_rng(seed)
    stages = []
    for cin in EXTRACTOR_STAGE_IN:
        w = kaiming_uniform(rng, (EXTRACTOR_MID, cin, 3, 3), fan_in=cin * 9)
        b = kaiming_uniform(rng, (EXTRACTOR_MID,), fan_in=cin * 9)
        w.requires_grad = False
        b.requires_grad = False
        stages.append((w, b))
    return FeatureExtractor(stages=stages)


def extract_features(x: Tensor, fx: FeatureExtractor) -> List[Tensor]:
    outs = []
    cur = x
    for w, b in fx.stages:
        cur = ops.space_to_depth(ops.gelu(ops.conv3x3(cur, w, b)))
        outs.append(cur)
    return outs


def mask_bce(logits: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy from logits, stable at saturation."""
    if logits.shape != target.shape:
        raise ShapeError(f"logit shape {logits.shape} != target shape {target.shape}")
    t = target.numpy()
    if not np.all((t == 0) | (t == 1)):
        raise ConfigError("mask target must be exactly 0/1 valued")
    pos = ops.mul(target, ops.softplus(ops.scale(logits, -1.0)))
    neg = ops.mul(ops.shift(ops.scale(target, -1.0), 1.0), ops.softplus(logits))
    return ops.mean(ops.add(pos, neg))


def image_l1(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return ops.mean(ops.absval(ops.sub(a, b)))


def perceptual(a: Tensor, b: Tensor, fx: FeatureExtractor) -> Tensor:
    total = None
    for fa, fb in zip(extract_features(a, fx), extract_features(b, fx)):
        term = ops.mean(ops.absval(ops.sub(fa, fb)))
        total = term if total is None else ops.add(total, term)
    return total


def total_loss(outputs, image_target: Tensor, mask_target: Tensor,
               weights: LossWeights, fx: FeatureExtractor):
    """Weighted per-depth sum; zero-weight depths are skipped entirely.

    Returns (scalar tensor, float breakdown dict for logging).
    """
    total = None
    breakdown = {}
    for d in (1, 2, 3):
        lam = weights.lambda_d[d - 1]
        if lam == 0.0:
            continue
        if d not in outputs.images or d not in outputs.mask_logits:
            raise ConfigError(f"depth {d} has weight {lam} but outputs lack it")
        li = image_l1(outputs.images[d], image_target)
        lm = mask_bce(outputs.mask_logits[d], mask_target)
        term = ops.add(li, ops.scale(lm, weights.lambda_mask))
        lp = None
        if weights.lambda_perc > 0.0:
            lp = perceptual(outputs.images[d], image_target, fx)
            term = ops.add(term, ops.scale(lp, weights.lambda_perc))
        breakdown[f"loss_image_{d}"] = li.item()
        breakdown[f"loss_mask_{d}"] = lm.item()
        breakdown[f"loss_perc_{d}"] = lp.item() if lp is not None else 0.0
        weighted = ops.scale(term, lam)
        total = weighted if total is None else ops.add(total, weighted)
    if total is None:
        raise ConfigError("all depth weights are zero; nothing to optimize")
    breakdown["loss_total"] = total.item()
    return total, breakdown
