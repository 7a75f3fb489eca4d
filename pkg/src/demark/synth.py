"""Synthetic watermark dataset generation.

Composites RGBA assets onto backgrounds with randomized transparency, scale,
rotation and placement, and writes (watermarked, background, mask) PNG triples
plus a line-delimited manifest. Every sample is a pure function of (seed,
index), so generation order and worker count never change the output bytes.
"""

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple

import numpy as np
from PIL import Image

from .engine import ConfigError, ShapeError


class PlacementError(ValueError):
    """Watermark would not fit inside the background."""


@dataclass
class SynthesisParams:
    alpha_range: Tuple[float, float] = (0.3, 0.7)
    scale_range: Tuple[float, float] = (0.3, 0.6)
    rotation_range: Tuple[float, float] = (-45.0, 45.0)
    mask_threshold: float = 0.05
    size: int = 64
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.alpha_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError(f"alpha_range {self.alpha_range} must lie inside (0,1]")
        slo, shi = self.scale_range
        if not (0.0 < slo <= shi <= 1.0):
            raise ConfigError(f"scale_range {self.scale_range} must lie inside (0,1]")
        if slo * self.size < 8:
            raise ConfigError(
                f"scale_range lower bound {slo} at size {self.size} yields a "
                f"watermark under 8 px")
        if not 0.0 <= self.mask_threshold < 1.0:
            raise ConfigError("mask_threshold must lie in [0,1)")


@dataclass
class Transform:
    scale: float         # fraction of min(H, W), applied to the asset's long side
    rotation_deg: float
    x: int               # top-left corner of the transformed patch
    y: int


# ---------------------------------------------------------------------------
# resampling and compositing


def _bilinear(img, sy, sx):
    """Sample channel-first img at float coords, zero outside the borders."""
    c, h, w = img.shape
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros((c,) + sx.shape)
    for oy in (0, 1):
        for ox in (0, 1):
            xi = x0 + ox
            yi = y0 + oy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            wgt = np.where(valid,
                           (fy if oy else 1.0 - fy) * (fx if ox else 1.0 - fx), 0.0)
            vals = img[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            out += vals * wgt[None]
    return out


def transform_asset(rgba, scale_px: int, rotation_deg: float):
    """Rotate+scale an RGBA asset into its bounding box, premultiplied bilinear."""
    if rgba.ndim != 3 or rgba.shape[0] != 4:
        raise ShapeError(f"asset must be (4, h, w) rgba, got {rgba.shape}")
    _, h, w = rgba.shape
    f = scale_px / max(h, w)
    theta = math.radians(rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    half_w, half_h = f * w / 2.0, f * h / 2.0
    out_w = max(1, math.ceil(2 * (abs(half_w * cos_t) + abs(half_h * sin_t))))
    out_h = max(1, math.ceil(2 * (abs(half_w * sin_t) + abs(half_h * cos_t))))

    yy, xx = np.mgrid[0:out_h, 0:out_w]
    dx = (xx + 0.5) - out_w / 2.0
    dy = (yy + 0.5) - out_h / 2.0
    # rotate back by -theta, undo the scale, recentre on the source
    sx = (cos_t * dx + sin_t * dy) / f + w / 2.0 - 0.5
    sy = (-sin_t * dx + cos_t * dy) / f + h / 2.0 - 0.5

    pm = rgba.astype(np.float64).copy()
    pm[:3] *= pm[3]
    sampled = _bilinear(pm, sy, sx)
    alpha = sampled[3]
    safe = np.maximum(alpha, 1e-8)
    rgb = np.where(alpha > 1e-8, sampled[:3] / safe, 0.0)
    return np.concatenate([np.clip(rgb, 0.0, 1.0), alpha[None]], axis=0)


def composite(background, asset_rgba, transform: Transform, alpha_global: float,
              mask_threshold: float = 0.05):
    """Blend the transformed asset over the background; returns (J, M)."""
    _, bh, bw = background.shape
    scale_px = int(round(transform.scale * min(bh, bw)))
    patch = transform_asset(asset_rgba, scale_px, transform.rotation_deg)
    ph, pw = patch.shape[1:]
    x, y = transform.x, transform.y
    if x < 0 or y < 0 or x + pw > bw or y + ph > bh:
        raise PlacementError(
            f"patch {pw}x{ph} at ({x},{y}) exceeds background {bw}x{bh}")
    a = alpha_global * patch[3]
    j = background.astype(np.float64).copy()
    region = j[:, y:y + ph, x:x + pw]
    j[:, y:y + ph, x:x + pw] = a * patch[:3] + (1.0 - a) * region
    mask = np.zeros((bh, bw))
    mask[y:y + ph, x:x + pw] = (a > mask_threshold).astype(np.float64)
    return j, mask


# ---------------------------------------------------------------------------
# PNG boundary


def save_image(path, img):
    """Channel-first float [0,1] -> 8-bit RGB PNG."""
    arr = np.round(np.clip(np.asarray(img), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def load_image(path):
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise ShapeError(f"{path}: expected RGB, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"unreadable image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1)


def save_mask(path, mask):
    arr = (np.asarray(mask) > 0.5).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


def save_probability(path, prob):
    """Grayscale PNG of a [0,1] map, quantized but not binarized."""
    arr = np.round(np.clip(np.asarray(prob), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_mask(path):
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise ShapeError(f"{path}: expected single-channel mask, got {im.mode}")
            arr = np.asarray(im, dtype=np.float64)
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"unreadable mask {path}: {exc}") from exc
    return arr / 255.0


def load_asset(path):
    try:
        with Image.open(path) as im:
            if im.mode != "RGBA":
                raise ShapeError(f"{path}: watermark assets must be RGBA, got {im.mode}")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"unreadable asset {path}: {exc}") from exc
    rgba = arr.transpose(2, 0, 1)
    if not (rgba[3] > 0).any():
        raise ConfigError(f"{path}: asset alpha is zero everywhere")
    return rgba


# ---------------------------------------------------------------------------
# dataset generation


def _list_pngs(directory, kind):
    d = Path(directory)
    if not d.is_dir():
        raise ConfigError(f"{kind} directory not found: {d}")
    files = sorted(d.glob("*.png"))
    if not files:
        raise ConfigError(f"no .png files in {kind} directory {d}")
    return files


def _worker_count(n):
    env = os.environ.get("WMF_THREADS")
    cap = int(env) if env else min(8, os.cpu_count() or 1)
    return max(1, min(cap, n))


def sample_rng(seed: int, index: int):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def generate_dataset(backgrounds_dir, assets_dir, params: SynthesisParams,
                     n: int, out_dir):
    """Write n triples + manifest.jsonl; returns the manifest records."""
    bg_files = _list_pngs(backgrounds_dir, "backgrounds")
    asset_files = _list_pngs(assets_dir, "assets")
    backgrounds = [load_image(p) for p in bg_files]
    assets = [load_asset(p) for p in asset_files]
    for p, bg in zip(bg_files, backgrounds):
        if bg.shape[1:] != (params.size, params.size):
            raise ShapeError(
                f"background {p} is {bg.shape[2]}x{bg.shape[1]}, expected "
                f"{params.size}x{params.size}")

    out = Path(out_dir)
    for sub in ("watermarked", "background", "mask"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    def make_sample(i: int) -> dict:
        rng = sample_rng(params.seed, i)
        bg_idx = int(rng.integers(len(backgrounds)))
        asset_idx = int(rng.integers(len(assets)))
        alpha = float(rng.uniform(*params.alpha_range))
        scale = float(rng.uniform(*params.scale_range))
        rot = float(rng.uniform(*params.rotation_range))
        bg = backgrounds[bg_idx]
        scale_px = int(round(scale * params.size))
        patch = transform_asset(assets[asset_idx], scale_px, rot)
        ph, pw = patch.shape[1:]
        if pw > params.size or ph > params.size:
            raise PlacementError(f"sample {i}: patch {pw}x{ph} exceeds canvas")
        x = int(rng.integers(0, params.size - pw + 1))
        y = int(rng.integers(0, params.size - ph + 1))
        tf = Transform(scale=scale, rotation_deg=rot, x=x, y=y)
        j, mask = composite(bg, assets[asset_idx], tf, alpha, params.mask_threshold)
        stem = f"{i:06d}.png"
        save_image(out / "watermarked" / stem, j)
        save_image(out / "background" / stem, bg)
        save_mask(out / "mask" / stem, mask)
        return {
            "index": i, "asset_id": asset_files[asset_idx].stem, "alpha": alpha,
            "scale": scale, "rotation_deg": rot, "x": x, "y": y, "seed": params.seed,
        }

    records = []
    if n > 0:
        with ThreadPoolExecutor(max_workers=_worker_count(n)) as pool:
            records = sorted(pool.map(make_sample, range(n)), key=lambda r: r["index"])
    with open(out / "manifest.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return records


def read_manifest(out_dir):
    path = Path(out_dir) / "manifest.jsonl"
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_sample(out_dir, index: int):
    """Returns (J, I, M) float arrays for one generated sample."""
    out = Path(out_dir)
    stem = f"{index:06d}.png"
    j = load_image(out / "watermarked" / stem)
    i = load_image(out / "background" / stem)
    m = load_mask(out / "mask" / stem)
    return j, i, m


# ---------------------------------------------------------------------------
# procedural demo inputs, so the pipeline runs without any downloads


def write_demo_backgrounds(out_dir, n: int, size: int, seed: int = 0):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    coords = np.linspace(0.0, 1.0, size)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    for i in range(n):
        img = np.zeros((3, size, size))
        for c in range(3):
            base = rng.uniform(0.2, 0.8)
            img[c] = base
            for _ in range(3):
                fy, fx = rng.uniform(0.5, 4.0, size=2)
                phase = rng.uniform(0.0, 2 * np.pi)
                amp = rng.uniform(0.05, 0.2)
                img[c] += amp * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        img = 0.1 + 0.8 * (img - img.min()) / max(img.max() - img.min(), 1e-9)
        save_image(out / f"bg{i:03d}.png", img)


def write_demo_assets(out_dir, n: int, size: int = 32, seed: int = 0):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    coords = np.arange(size) + 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cx = cy = size / 2.0
    r = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    for i in range(n):
        kind = i % 3
        if kind == 0:    # solid disk
            alpha = np.clip(size * 0.42 - r, 0.0, 1.0)
        elif kind == 1:  # ring
            alpha = np.clip(size * 0.12 - np.abs(r - size * 0.3), 0.0, 1.0)
        else:            # diagonal bars
            band = (xx + yy) % (size / 2.0)
            alpha = np.clip(size / 6.0 - np.abs(band - size / 4.0), 0.0, 1.0)
            alpha *= np.clip(size * 0.46 - np.maximum(np.abs(xx - cx), np.abs(yy - cy)),
                             0.0, 1.0)
        color = rng.uniform(0.1, 0.9, size=3)
        rgba = np.zeros((4, size, size))
        rgba[:3] = color[:, None, None]
        rgba[3] = alpha
        arr = np.round(np.clip(rgba, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGBA").save(
            out / f"asset{i:03d}.png")
