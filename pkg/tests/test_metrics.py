import csv
import math

import numpy as np
import pytest

from gavn.metrics import (
    MS_SSIM_WEIGHTS,
    PSNR_CAP,
    MetricReport,
    evaluate_frames,
    ms_ssim,
    ms_ssim_levels,
    psnr,
    region_box,
    region_psnr,
    ssim,
    write_table,
)
from gavn.synthclip import SceneParams, clip_geometry, gen_clip


@pytest.fixture(scope="module")
def img():
    return np.random.default_rng(0).random((3, 64, 64))


def direct_ssim_constants(a, b, L=1.0):
    """SSIM of two constant images: variances vanish, so only luminance remains."""
    c1 = (0.01 * L) ** 2
    return (2 * a * b + c1) / (a * a + b * b + c1)


def test_psnr_examples():
    assert psnr(np.full((4, 4), 0.5), np.full((4, 4), 0.75)) == pytest.approx(12.0412, abs=1e-3)
    assert psnr(np.zeros(10), np.ones(10)) == 0.0
    x = np.random.default_rng(1).random((3, 8, 8))
    assert psnr(x, x) == PSNR_CAP


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


def test_psnr_decreases_with_noise(img):
    noise = np.random.default_rng(2).uniform(-1, 1, img.shape)
    vals = [psnr(img, img + a * noise) for a in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_ssim_identity_and_symmetry(img):
    other = np.clip(img + np.random.default_rng(3).normal(0, 0.1, img.shape), 0, 1)
    assert ssim(img, img) == 1.0
    assert abs(ssim(img, other) - ssim(other, img)) <= 1e-12
    assert -1.0 <= ssim(img, other) < 1.0


def test_ssim_constant_images_oracle():
    a, b = np.zeros((3, 16, 16)), np.ones((3, 16, 16))
    assert ssim(a, b) == pytest.approx(direct_ssim_constants(0.0, 1.0), rel=1e-12)
    c, d = np.full((16, 16), 0.3), np.full((16, 16), 0.8)
    assert ssim(c, d) == pytest.approx(direct_ssim_constants(0.3, 0.8), rel=1e-9)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ms_ssim_identity(img):
    assert ms_ssim(img, img) == 1.0


def test_ms_ssim_monotone_under_noise(img):
    rng = np.random.default_rng(4)
    noise = rng.normal(0, 1, img.shape)
    vals = [ms_ssim(img, img + s * noise) for s in (0.01, 0.03, 0.1, 0.2, 0.4)]
    assert all(x > y for x, y in zip(vals, vals[1:])), vals


def test_ms_ssim_one_level_is_ssim(img):
    other = np.clip(img + np.random.default_rng(5).normal(0, 0.05, img.shape), 0, 1)
    assert ms_ssim(img, other, levels=1, weights=[1.0]) == pytest.approx(ssim(img, other), rel=1e-12)


def test_ms_ssim_level_reduction():
    assert ms_ssim_levels(176) == 5
    assert ms_ssim_levels(64) == 3
    assert ms_ssim_levels(16) == 1


def test_ms_ssim_symmetric(img):
    other = np.clip(img * 0.9 + 0.05, 0, 1)
    assert abs(ms_ssim(img, other) - ms_ssim(other, img)) <= 1e-12


def test_ms_ssim_standard_weights():
    assert sum(MS_SSIM_WEIGHTS) == pytest.approx(1.0, abs=1e-3)


def test_ms_ssim_full_scale_matches_manual_product():
    rng = np.random.default_rng(6)
    a = rng.random((176, 176))
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    from gavn.metrics import _halve, _ssim_maps

    value, x, y = 1.0, a, b
    for i, w in enumerate(MS_SSIM_WEIGHTS):
        s, cs = _ssim_maps(x, y, 1.0)
        value *= max((s if i == 4 else cs).mean(), 0) ** w
        x, y = _halve(x), _halve(y)
    assert ms_ssim(a, b) == pytest.approx(value, rel=1e-12)


# -- region PSNR --------------------------------------------------------------------


@pytest.fixture(scope="module")
def clip():
    return gen_clip(SceneParams(), duration=0.4, seed=9)


def test_region_identical_is_cap(clip):
    f = clip.frames[0]
    for r in ("mouth", "eyes"):
        assert region_psnr(f, f, clip.landmarks[0], r) == PSNR_CAP


def test_region_locality(clip):
    f = clip.frames[3].astype(np.float64)
    y0, y1, x0, x1 = region_box(clip.landmarks[3], "mouth", 64, 64)
    g = f.copy()
    mask = np.ones(g.shape[-2:], bool)
    mask[y0:y1, x0:x1] = False
    g[:, mask] = 1.0 - g[:, mask]
    assert region_psnr(g, f, clip.landmarks[3], "mouth") == PSNR_CAP
    assert psnr(g, f) < 30


def test_mouth_box_covers_renderer_bbox(clip):
    for i in range(clip.T):
        y0, y1, x0, x1 = region_box(clip.landmarks[i], "mouth", 64, 64)
        bx0, by0, bx1, by1 = clip_geometry(clip, i).mouth_bbox()
        assert y0 <= by0 and y1 - 1 >= by1 and x0 <= bx0 and x1 - 1 >= bx1
        # and the box is no looser than the dilation allows
        assert by0 - y0 <= 4 and (y1 - 1) - by1 <= 4 and bx0 - x0 <= 4 and (x1 - 1) - bx1 <= 4


def test_region_degenerate_box():
    # eyes far outside the frame clip to an empty box
    pts = np.full((8, 2), -20.0)
    with pytest.raises(ValueError, match="degenerate"):
        region_psnr(np.zeros((3, 64, 64)), np.zeros((3, 64, 64)), pts, "eyes")


def test_region_unknown():
    with pytest.raises(ValueError):
        region_box(np.zeros((8, 2)) + 30, "nose", 64, 64)


# -- reports -------------------------------------------------------------------------


def test_report_means_recompute(clip, tmp_path):
    noisy = np.clip(clip.frames + 0.05, 0, 1)
    rep = evaluate_frames(clip.frames, noisy, clip.landmarks, clip="c", method="m")
    for k, vals in rep.per_frame.items():
        assert len(vals) == clip.T
        assert rep.means[k] == float(np.mean(vals))
    rep.save(tmp_path / "r.json")
    back = MetricReport.load(tmp_path / "r.json")
    assert back.per_frame == rep.per_frame and back.means == rep.means
    assert {"psnr_mouth", "psnr_eyes", "ssim", "ms_ssim"} <= set(rep.per_frame)


def test_report_frame_count_mismatch(clip):
    with pytest.raises(ValueError, match="frame count"):
        evaluate_frames(clip.frames, clip.frames[:-1])


def test_table_csv(clip, tmp_path):
    a = evaluate_frames(clip.frames, clip.frames, method="identity", clip="x")
    b = evaluate_frames(clip.frames, np.clip(clip.frames * 0.9, 0, 1), method="dim", clip="x")
    write_table([a, b], tmp_path / "t.csv")
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    by = {r["method"]: r for r in rows}
    assert float(by["identity"]["psnr"]) == PSNR_CAP
    assert float(by["dim"]["psnr"]) < PSNR_CAP
    assert math.isclose(float(by["identity"]["ssim"]), 1.0)
