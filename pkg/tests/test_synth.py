import json

import numpy as np
import pytest

from demark import synth
from demark.engine import ConfigError, ShapeError


def opaque_asset(size=32, value=0.8):
    rgba = np.zeros((4, size, size))
    rgba[:3] = value
    rgba[3] = 1.0
    return rgba


def flat_background(size=64, value=0.2):
    return np.full((3, size, size), value)


# ---------------------------------------------------------------------------
# compositing


def test_zero_alpha_is_identity():
    bg = flat_background()
    tf = synth.Transform(scale=0.5, rotation_deg=0.0, x=10, y=10)
    j, m = synth.composite(bg, opaque_asset(), tf, alpha_global=0.0)
    np.testing.assert_array_equal(j, bg)
    np.testing.assert_array_equal(m, 0.0)


def test_full_alpha_copies_watermark():
    bg = flat_background()
    tf = synth.Transform(scale=0.5, rotation_deg=0.0, x=4, y=6)
    j, m = synth.composite(bg, opaque_asset(value=0.8), tf, alpha_global=1.0)
    region = j[:, 6:6 + 32, 4:4 + 32]
    np.testing.assert_array_equal(region, np.full((3, 32, 32), 0.8))
    np.testing.assert_array_equal(m[6:6 + 32, 4:4 + 32], 1.0)
    outside = j.copy()
    outside[:, 6:6 + 32, 4:4 + 32] = 0.2
    np.testing.assert_array_equal(outside, bg)


def test_symmetric_blend():
    bg = flat_background(value=0.2)
    tf = synth.Transform(scale=0.5, rotation_deg=0.0, x=0, y=0)
    j, _ = synth.composite(bg, opaque_asset(value=0.8), tf, alpha_global=0.5)
    assert j[0, 5, 5] == pytest.approx(0.5, abs=1e-12)


def test_out_of_bounds_placement():
    bg = flat_background()
    tf = synth.Transform(scale=0.5, rotation_deg=0.0, x=40, y=10)
    with pytest.raises(synth.PlacementError):
        synth.composite(bg, opaque_asset(), tf, alpha_global=0.5)


def test_unrotated_unit_scale_resample_is_exact():
    rng = np.random.default_rng(8)
    rgba = rng.random((4, 8, 8))
    out = synth.transform_asset(rgba, scale_px=8, rotation_deg=0.0)
    np.testing.assert_array_equal(out[3], rgba[3])
    np.testing.assert_allclose(out[:3], rgba[:3], atol=1e-12)


def test_rotation_preserves_alpha_mass_roughly():
    rgba = opaque_asset(size=16)
    a0 = synth.transform_asset(rgba, 16, 0.0)[3].sum()
    a45 = synth.transform_asset(rgba, 16, 45.0)[3].sum()
    assert a45 == pytest.approx(a0, rel=0.05)


# ---------------------------------------------------------------------------
# PNG boundary


def test_image_roundtrip_quantization_bound(tmp_path):
    rng = np.random.default_rng(9)
    img = rng.random((3, 16, 16))
    p = tmp_path / "x.png"
    synth.save_image(p, img)
    back = synth.load_image(p)
    assert np.abs(back - img).max() <= 1 / 510 + 1e-12


def test_mask_roundtrip_exact(tmp_path):
    m = (np.random.default_rng(10).random((16, 16)) > 0.5).astype(float)
    p = tmp_path / "m.png"
    synth.save_mask(p, m)
    np.testing.assert_array_equal(synth.load_mask(p), m)


def test_load_rejects_wrong_mode_and_corrupt(tmp_path):
    img = np.random.default_rng(11).random((3, 8, 8))
    rgb = tmp_path / "rgb.png"
    synth.save_image(rgb, img)
    with pytest.raises(ShapeError):
        synth.load_asset(rgb)  # RGB where RGBA expected
    with pytest.raises(ShapeError):
        synth.load_mask(rgb)
    junk = tmp_path / "junk.png"
    junk.write_bytes(b"not a png at all")
    with pytest.raises(ValueError):
        synth.load_image(junk)


def test_zero_alpha_asset_rejected(tmp_path):
    from PIL import Image
    arr = np.zeros((8, 8, 4), dtype=np.uint8)
    arr[..., :3] = 120
    p = tmp_path / "ghost.png"
    Image.fromarray(arr, mode="RGBA").save(p)
    with pytest.raises(ConfigError):
        synth.load_asset(p)


# ---------------------------------------------------------------------------
# dataset generation


@pytest.fixture
def demo_dirs(tmp_path):
    bg = tmp_path / "bg"
    assets = tmp_path / "assets"
    synth.write_demo_backgrounds(bg, n=3, size=64, seed=1)
    synth.write_demo_assets(assets, n=3, seed=2)
    return bg, assets


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_generate_zero_samples(tmp_path, demo_dirs):
    bg, assets = demo_dirs
    out = tmp_path / "out0"
    records = synth.generate_dataset(bg, assets, synth.SynthesisParams(seed=5), 0, out)
    assert records == []
    assert (out / "manifest.jsonl").read_text() == ""
    assert not list((out / "watermarked").glob("*.png"))


def test_generate_is_deterministic_and_thread_independent(tmp_path, demo_dirs, monkeypatch):
    bg, assets = demo_dirs
    params = synth.SynthesisParams(seed=7)
    monkeypatch.setenv("WMF_THREADS", "1")
    out1 = tmp_path / "t1"
    synth.generate_dataset(bg, assets, params, 6, out1)
    monkeypatch.setenv("WMF_THREADS", "3")
    out2 = tmp_path / "t3"
    synth.generate_dataset(bg, assets, params, 6, out2)
    assert _tree_bytes(out1) == _tree_bytes(out2)


def test_manifest_reparse_and_recomposition(tmp_path, demo_dirs):
    bg_dir, assets_dir = demo_dirs
    out = tmp_path / "ds"
    params = synth.SynthesisParams(seed=13)
    records = synth.generate_dataset(bg_dir, assets_dir, params, 5, out)
    assert synth.read_manifest(out) == records
    assets = {p.stem: synth.load_asset(p) for p in sorted(assets_dir.glob("*.png"))}
    for rec in records:
        j, bg, m = synth.load_sample(out, rec["index"])
        tf = synth.Transform(scale=rec["scale"], rotation_deg=rec["rotation_deg"],
                             x=rec["x"], y=rec["y"])
        j2, m2 = synth.composite(bg, assets[rec["asset_id"]], tf, rec["alpha"],
                                 params.mask_threshold)
        # J went through one quantization, bg through another
        assert np.abs(j2 - j).max() <= 2 / 255
        np.testing.assert_array_equal(m2, m)


def test_background_untouched_outside_mask(tmp_path, demo_dirs):
    bg_dir, assets_dir = demo_dirs
    out = tmp_path / "ds2"
    synth.generate_dataset(bg_dir, assets_dir, synth.SynthesisParams(seed=17), 6, out)
    for i in range(6):
        j, bg, m = synth.load_sample(out, i)
        outside = m == 0.0
        # blend bound alpha <= 0.05 plus two quantization half-steps
        assert np.abs(j - bg)[:, outside].max() <= 0.05 + 2 / 510 + 1e-9


def test_mask_area_band():
    rng = np.random.default_rng(19)
    bg = flat_background()
    assets = [opaque_asset(size=32, value=v) for v in (0.3, 0.6, 0.9)]
    params = synth.SynthesisParams(seed=23)
    fractions = []
    for i in range(300):
        srng = synth.sample_rng(params.seed, i)
        alpha = srng.uniform(*params.alpha_range)
        scale = srng.uniform(*params.scale_range)
        rot = srng.uniform(*params.rotation_range)
        patch = synth.transform_asset(assets[i % 3],
                                      int(round(scale * 64)), rot)
        ph, pw = patch.shape[1:]
        x = int(srng.integers(0, 64 - pw + 1))
        y = int(srng.integers(0, 64 - ph + 1))
        tf = synth.Transform(scale=scale, rotation_deg=rot, x=x, y=y)
        _, m = synth.composite(bg, assets[i % 3], tf, alpha)
        fractions.append(m.mean())
    fractions = np.array(fractions)
    assert (fractions > 0).all() and (fractions <= 0.45).all()
    assert 0.05 <= fractions.mean() <= 0.40


def test_missing_dirs_are_named(tmp_path, demo_dirs):
    bg, _ = demo_dirs
    missing = tmp_path / "nope"
    with pytest.raises(ConfigError, match="nope"):
        synth.generate_dataset(bg, missing, synth.SynthesisParams(), 1, tmp_path / "o")
    with pytest.raises(ConfigError, match="nope"):
        synth.generate_dataset(missing, bg, synth.SynthesisParams(), 1, tmp_path / "o")


def test_wrong_background_size_rejected(tmp_path, demo_dirs):
    _, assets = demo_dirs
    small = tmp_path / "small_bg"
    synth.write_demo_backgrounds(small, n=1, size=32, seed=3)
    with pytest.raises(ShapeError):
        synth.generate_dataset(small, assets, synth.SynthesisParams(size=64), 1,
                               tmp_path / "o")


def test_params_validation():
    with pytest.raises(ConfigError):
        synth.SynthesisParams(alpha_range=(0.0, 0.5))
    with pytest.raises(ConfigError):
        synth.SynthesisParams(scale_range=(0.05, 0.6), size=64)  # under 8 px
    with pytest.raises(ConfigError):
        synth.SynthesisParams(mask_threshold=1.0)


def test_demo_generators(tmp_path):
    bg = tmp_path / "bg"
    assets = tmp_path / "assets"
    synth.write_demo_backgrounds(bg, n=2, size=64, seed=4)
    synth.write_demo_assets(assets, n=4, seed=5)
    for p in bg.glob("*.png"):
        img = synth.load_image(p)
        assert img.shape == (3, 64, 64)
        assert img.min() >= 0.0 and img.max() <= 1.0
    loaded = [synth.load_asset(p) for p in assets.glob("*.png")]
    assert len(loaded) == 4
    for rgba in loaded:
        assert (rgba[3] > 0).any()
