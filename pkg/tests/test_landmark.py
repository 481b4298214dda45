import math

import numpy as np
import pytest
import torch

from gavn.degrade import DegradationSpec, degrade_clip
from gavn.landmark import (
    LandmarkNet,
    LandmarkSet,
    TrainingDiverged,
    landmark_errors,
    predict_clip_landmarks,
    predict_landmarks,
    render_heatmaps,
    train_landmark_net,
)
from gavn.synthclip import SceneParams, audio_window, clip_geometry, gen_clip


@pytest.fixture(scope="module")
def blurred():
    p = SceneParams()
    return [degrade_clip(gen_clip(p, duration=1.0, seed=s), DegradationSpec("blur", 9)) for s in range(3)]


@pytest.fixture(scope="module")
def trained(blurred):
    return train_landmark_net(blurred, epochs=6, lr=1e-3, seed=0)


def test_heatmap_peak_and_sigma_value():
    pts = np.array([[10.0, 20.0], [3.0, 4.0]])
    hm = render_heatmaps(pts, 32, 32, sigma_px=2.0)
    assert hm.shape == (2, 32, 32)
    assert hm[0, 20, 10] == 1.0
    assert hm[0, 20, 12].item() == pytest.approx(math.exp(-0.5), abs=1e-6)
    assert hm.min() >= 0.0 and hm.max() <= 1.0
    assert torch.equal(hm, render_heatmaps(pts, 32, 32, sigma_px=2.0))


def test_heatmap_batched_shape():
    assert render_heatmaps(np.zeros((5, 8, 2)), 16, 24).shape == (5, 8, 16, 24)


def test_heatmap_rejects_bad_sigma():
    with pytest.raises(ValueError):
        render_heatmaps(np.zeros((1, 2)), 8, 8, sigma_px=0.0)


def test_oracle_heatmap_peaks_match_geometry():
    clip = gen_clip(SceneParams(), duration=0.4, seed=1)
    for i in range(clip.T):
        hm = render_heatmaps(clip.landmarks[i], 64, 64).numpy()
        expected = clip_geometry(clip, i).landmarks()
        for k in range(8):
            y, x = np.unravel_index(hm[k].argmax(), hm[k].shape)
            assert (x, y) == tuple(expected[k].astype(int))


def test_oracle_set():
    s = LandmarkSet.oracle(np.ones((8, 2)))
    assert np.all(s.confidence == 1.0)


def test_zero_init_predicts_centre():
    torch.manual_seed(0)
    net = LandmarkNet(K=8, H=64, W=64, window_len=3200, segments=5)
    clip = gen_clip(SceneParams(), duration=0.4, seed=0)
    out = predict_landmarks(net, clip.frames[0], audio_window(clip, 0)[0])
    np.testing.assert_allclose(out.points, np.full((8, 2), 31.5))


def test_predictions_inside_frame(trained, blurred):
    net, _ = trained
    pts = predict_clip_landmarks(net, blurred[0])
    assert pts.min() >= 0 and pts.max() <= 63


def test_training_descends(trained):
    _, rep = trained
    assert rep.loss_final < rep.loss_init


def test_trained_beats_centre_baseline(trained):
    net, _ = trained
    held = [degrade_clip(gen_clip(SceneParams(), duration=1.0, seed=50), DegradationSpec("blur", 9))]
    err = landmark_errors(net, held).mean()
    centre = np.linalg.norm(held[0].landmarks - 31.5, axis=-1).mean()
    assert err < centre


def test_training_deterministic(blurred):
    a, _ = train_landmark_net(blurred[:1], epochs=1, seed=3)
    b, _ = train_landmark_net(blurred[:1], epochs=1, seed=3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb), na


def test_divergence_is_reported(blurred):
    bad = blurred[0].copy()
    bad.frames[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        train_landmark_net([bad], epochs=1, seed=0)
