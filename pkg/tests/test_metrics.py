import numpy as np
import pytest

import oracle_metrics as om
from demark import metrics
from demark.engine import ConfigError, ShapeError


def rand_pair(seed, shape=(3, 16, 16)):
    r = np.random.default_rng(seed)
    return r.random(shape), r.random(shape)


# ---------------------------------------------------------------------------
# closed-form cases


def test_psnr_cases():
    a, _ = rand_pair(0)
    assert metrics.psnr(a, a) == 100.0
    b = np.clip(a, 0.0, 0.9)
    assert metrics.psnr(np.zeros((3, 4, 4)), np.full((3, 4, 4), 0.1)) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ShapeError):
        metrics.psnr(a, a[:, :8])
    with pytest.raises(ConfigError):
        metrics.psnr(a + 1.0, a)


def test_psnr_symmetry():
    a, b = rand_pair(1)
    assert metrics.psnr(a, b) == metrics.psnr(b, a)


def test_ssim_identity_is_exactly_one():
    a, _ = rand_pair(2)
    assert metrics.ssim(a, a) == 1.0


def test_ssim_constant_black_vs_white():
    black = np.zeros((3, 16, 16))
    white = np.ones((3, 16, 16))
    c1 = 0.01 ** 2
    assert metrics.ssim(black, white) == pytest.approx(c1 / (1 + c1), rel=1e-9)


def test_ssim_rejects_small_images():
    with pytest.raises(ShapeError):
        metrics.ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


def test_ssim_symmetry():
    a, b = rand_pair(3)
    assert metrics.ssim(a, b) == metrics.ssim(b, a)


def test_rmse_piecewise_case():
    a = np.zeros((3, 16, 16))
    b = a.copy()
    mask = np.zeros((16, 16))
    mask[:8, :8] = 1.0  # 25% of pixels
    b[:, :8, :8] = 0.1  # 25.5 in 0-255 scale
    assert metrics.rmse(a, b) == pytest.approx(12.75, rel=1e-9)
    assert metrics.rmse_w(a, b, mask) == pytest.approx(25.5, rel=1e-9)
    assert metrics.rmse(a, a) == 0.0


def test_rmse_w_empty_mask_absent():
    a, b = rand_pair(4)
    assert metrics.rmse_w(a, b, np.zeros((16, 16))) is None


def test_f1_iou_cases():
    gt = np.zeros((8, 8))
    gt[:2, :3] = 1.0
    assert metrics.f1_iou(gt, gt) == (1.0, 100.0)
    disjoint = np.zeros((8, 8))
    disjoint[5:, 5:] = 1.0
    assert metrics.f1_iou(disjoint, gt) == (0.0, 0.0)
    # TP=3, FP=1, FN=2
    g = np.zeros((8, 8))
    g[0, :5] = 1.0
    p = np.zeros((8, 8))
    p[0, :3] = 1.0
    p[1, 0] = 1.0
    f1, iou = metrics.f1_iou(p, g)
    assert f1 == pytest.approx(6 / 9)
    assert iou == pytest.approx(50.0)
    assert metrics.f1_iou(np.zeros((4, 4)), np.zeros((4, 4))) == (1.0, 100.0)
    with pytest.raises(ConfigError):
        metrics.f1_iou(p, g, threshold=1.0)


def test_f1_iou_threshold_is_inclusive():
    gt = np.zeros((4, 4))
    gt[0, 0] = 1.0
    soft = np.zeros((4, 4))
    soft[0, 0] = 0.5  # exactly at threshold counts as positive
    assert metrics.f1_iou(soft, gt) == (1.0, 100.0)


# ---------------------------------------------------------------------------
# scalar-loop oracle sweep (20 random cases per metric)


@pytest.mark.parametrize("seed", range(20))
def test_metrics_match_oracles(seed):
    r = np.random.default_rng(1000 + seed)
    a = r.random((3, 16, 16))
    b = r.random((3, 16, 16))
    mask = (r.random((16, 16)) > 0.6).astype(float)
    soft = r.random((16, 16))

    assert metrics.psnr(a, b) == pytest.approx(om.psnr_oracle(a, b), abs=1e-6)
    assert metrics.ssim(a, b) == pytest.approx(om.ssim_oracle(a, b), abs=1e-5)
    assert metrics.rmse(a, b) == pytest.approx(om.rmse_oracle(a, b), abs=1e-6)
    got_w = metrics.rmse_w(a, b, mask)
    want_w = om.rmse_w_oracle(a, b, mask)
    if want_w is None:
        assert got_w is None
    else:
        assert got_w == pytest.approx(want_w, abs=1e-6)
    f1, iou = metrics.f1_iou(soft, mask)
    of1, oiou = om.f1_iou_oracle(soft, mask)
    assert f1 == of1  # same integer counts, same expression
    assert iou == pytest.approx(oiou, abs=1e-10)
    # algebraic identity between the two overlap scores
    assert f1 == pytest.approx(2 * (iou / 100) / (1 + iou / 100), abs=1e-12)


# ---------------------------------------------------------------------------
# report plumbing


def test_report_roundtrip_and_aggregate(tmp_path):
    rows = []
    for seed in range(4):
        a, b = rand_pair(50 + seed)
        mask = (np.random.default_rng(60 + seed).random((16, 16)) > 0.5).astype(float)
        row = {"path": f"img{seed}.png"}
        row.update(metrics.evaluate_image(a, b, mask, mask))
        rows.append(row)
    rows[0]["rmse_w"] = None  # exercise the absent-cell path
    path = tmp_path / "report.csv"
    metrics.write_report(path, rows)

    text = path.read_text()
    assert text.startswith("#") and "0-255 scale" in text

    back = metrics.read_report(path)
    assert [r["path"] for r in back] == ["img0.png", "img1.png", "img2.png", "img3.png",
                                         "aggregate"]
    agg = back[-1]
    for key in ("psnr", "ssim", "rmse", "f1", "iou"):
        want = np.mean([r[key] for r in rows])
        assert agg[key] == pytest.approx(want, abs=1e-5)
    want_w = np.mean([r["rmse_w"] for r in rows if r["rmse_w"] is not None])
    assert agg["rmse_w"] == pytest.approx(want_w, abs=1e-5)
    for orig, rec in zip(rows, back):
        assert rec["psnr"] == pytest.approx(orig["psnr"], abs=1e-5)
