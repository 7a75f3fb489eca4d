"""Image and mask quality metrics plus the CSV evaluation report.

Scale conventions (also printed in the report header): PSNR uses peak 1.0 on
[0,1] images and is capped at 100 dB; RMSE and RMSEw are reported in 0-255
scale; IoU is a percentage. RMSEw restricts RMSE to ground-truth mask pixels
and is absent when the mask is empty.
"""

import csv

import numpy as np

from .engine import ConfigError, ShapeError

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

CSV_FIELDS = ("path", "psnr", "ssim", "rmse", "rmse_w", "f1", "iou")
CSV_CONVENTIONS = ("# psnr: peak 1.0 over [0,1] images, capped at 100 dB; "
                   "rmse/rmse_w: 0-255 scale; rmse_w: ground-truth mask pixels only; "
                   "iou: percent")


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    for name, x in (("first", a), ("second", b)):
        if x.min() < 0.0 or x.max() > 1.0:
            raise ConfigError(f"{name} image has values outside [0,1]")
    return a, b


def psnr(a, b) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, float(10.0 * np.log10(1.0 / mse)))


def luma(rgb):
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ShapeError(f"expected (3, h, w) image, got {rgb.shape}")
    r, g, b = rgb[0], rgb[1], rgb[2]
    return 0.299 * r + 0.587 * g + 0.114 * b


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA):
    half = size // 2
    yy, xx = np.ogrid[-half:half + 1, -half:half + 1]
    w = np.exp(-(yy * yy + xx * xx) / (2.0 * sigma * sigma))
    return w / w.sum()


def ssim(a, b) -> float:
    """Mean local SSIM over valid (unpadded) Gaussian windows of the luma."""
    a, b = _check_pair(a, b)
    x = luma(a)
    y = luma(b)
    h, w = x.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"image {x.shape} smaller than the {SSIM_WINDOW}px SSIM window")
    win = gaussian_window()

    def wmean(img):
        patches = np.lib.stride_tricks.sliding_window_view(img, (SSIM_WINDOW, SSIM_WINDOW))
        return np.tensordot(patches, win, axes=([2, 3], [0, 1]))

    mx = wmean(x)
    my = wmean(y)
    sxx = wmean(x * x) - mx * mx
    syy = wmean(y * y) - my * my
    sxy = wmean(x * y) - mx * my
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    score = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(score.mean())


def rmse(a, b) -> float:
    a, b = _check_pair(a, b)
    d = (a - b) * 255.0
    return float(np.sqrt(np.mean(d * d)))


def rmse_w(a, b, mask):
    """RMSE over mask=1 pixels in 0-255 scale; None when the mask is empty."""
    a, b = _check_pair(a, b)
    m = np.asarray(mask)
    if m.shape != a.shape[-2:]:
        raise ShapeError(f"mask shape {m.shape} does not match image {a.shape}")
    sel = m > 0.5
    if not sel.any():
        return None
    d = (a[:, sel] - b[:, sel]) * 255.0
    return float(np.sqrt(np.mean(d * d)))


def f1_iou(pred, gt, threshold: float = 0.5):
    """Binarize pred at >= threshold; returns (f1 in [0,1], iou in percent).

    An empty union (both masks empty) counts as a perfect match.
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0,1), got {threshold}")
    p = np.asarray(pred) >= threshold
    g = np.asarray(gt) > 0.5
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    tp = float(np.count_nonzero(p & g))
    fp = float(np.count_nonzero(p & ~g))
    fn = float(np.count_nonzero(~p & g))
    union = tp + fp + fn
    if union == 0.0:
        return 1.0, 100.0
    iou = tp / union
    f1 = 2.0 * tp / (2.0 * tp + fp + fn)
    return f1, 100.0 * iou


def evaluate_image(pred, gt, gt_mask, pred_mask) -> dict:
    f1, iou = f1_iou(pred_mask, gt_mask)
    return {
        "psnr": psnr(pred, gt),
        "ssim": ssim(pred, gt),
        "rmse": rmse(pred, gt),
        "rmse_w": rmse_w(pred, gt, gt_mask),
        "f1": f1,
        "iou": iou,
    }


def aggregate_rows(rows):
    agg = {"path": "aggregate"}
    for key in CSV_FIELDS[1:]:
        vals = [r[key] for r in rows if r.get(key) is not None]
        agg[key] = float(np.mean(vals)) if vals else None
    return agg


def write_report(path, rows):
    """Per-image rows plus one aggregate row, with the scale conventions noted."""
    with open(path, "w", newline="") as fh:
        fh.write(CSV_CONVENTIONS + "\n")
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in list(rows) + [aggregate_rows(rows)]:
            out = dict(row)
            for k, v in out.items():
                if isinstance(v, float):
                    out[k] = f"{v:.6f}"
                elif v is None:
                    out[k] = ""
            writer.writerow(out)


def read_report(path):
    """Inverse of write_report; numeric cells come back as floats, empty as None."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        row = {}
        for k, v in rec.items():
            if k == "path":
                row[k] = v
            else:
                row[k] = float(v) if v else None
        rows.append(row)
    return rows
