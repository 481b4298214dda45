"""Landmarks for degraded frames: Gaussian heatmap rendering and a small
audio-assisted landmark regressor trained against pristine-frame landmarks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from gavn.diffops import Conv, leaky, sigmoid
from gavn.identity import AudioEncoder
from gavn.optim import Adam
from gavn.synthclip import MOUTH_IDS, Clip, audio_windows


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LandmarkSet:
    points: np.ndarray  # (K, 2) pixel (x, y)
    confidence: np.ndarray  # (K,)

    @classmethod
    def oracle(cls, points: np.ndarray) -> "LandmarkSet":
        return cls(np.asarray(points, dtype=np.float64), np.ones(len(points)))


def render_heatmaps(points: torch.Tensor | np.ndarray, height: int, width: int,
                    sigma_px: float = 2.0) -> torch.Tensor:
    """Gaussian bump per landmark: (..., K, 2) points -> (..., K, height, width)."""
    if sigma_px <= 0:
        raise ValueError("sigma_px must be positive")
    pts = torch.as_tensor(points, dtype=torch.float32)
    ys = torch.arange(height, dtype=pts.dtype).view(height, 1)
    xs = torch.arange(width, dtype=pts.dtype).view(1, width)
    dx = xs - pts[..., 0, None, None]
    dy = ys - pts[..., 1, None, None]
    return torch.exp(-(dx * dx + dy * dy) / (2.0 * sigma_px * sigma_px))


class LandmarkNet(nn.Module):
    """Conv frame encoder + audio embedding -> K points in normalised [0, 1] coords."""

    def __init__(self, K: int = 8, H: int = 64, W: int = 64, window_len: int = 3200,
                 segments: int = 5, width: int = 16):
        super().__init__()
        if H % 16 or W % 16:
            raise ValueError(f"frame size {H}x{W} must be divisible by 16")
        self.K, self.H, self.W = K, H, W
        self.enc = nn.ModuleList([
            Conv(3, width, stride=2),
            Conv(width, width, stride=2),
            Conv(width, 2 * width, stride=2),
            Conv(2 * width, 2 * width, stride=2),
        ])
        self.audio = AudioEncoder(window_len, width, segments)
        feat = 2 * width * (H // 16) * (W // 16)
        self.fc = nn.Linear(feat + width, 64)
        self.out = nn.Linear(64, 2 * K)
        nn.init.normal_(self.fc.weight, 0.0, math.sqrt(2.0 / self.fc.in_features))
        nn.init.zeros_(self.fc.bias)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, frames: torch.Tensor, audio: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W), (B, L) -> (B, K, 2) normalised coordinates."""
        x = frames
        for conv in self.enc:
            x = leaky(conv(x))
        a, _ = self.audio(audio)
        h = leaky(self.fc(torch.cat([x.flatten(1), a], 1)))
        return sigmoid(self.out(h)).view(-1, self.K, 2)

    def to_pixels(self, norm: torch.Tensor) -> torch.Tensor:
        scale = norm.new_tensor([self.W - 1, self.H - 1])
        return norm * scale


def predict_landmarks(net: LandmarkNet, frame: np.ndarray, audio_window: np.ndarray) -> LandmarkSet:
    with torch.no_grad():
        norm = net(torch.as_tensor(frame, dtype=torch.float32)[None],
                   torch.as_tensor(audio_window, dtype=torch.float32)[None])
    pts = net.to_pixels(norm)[0].double().numpy()
    return LandmarkSet(pts, np.ones(len(pts)))


def predict_clip_landmarks(net: LandmarkNet, clip: Clip, m: int = 2, ablate_audio: bool = False,
                           batch: int = 32) -> np.ndarray:
    """(T, K, 2) pixel landmarks for every frame of ``clip``."""
    windows = torch.as_tensor(audio_windows(clip, m))
    if ablate_audio:
        windows = torch.zeros_like(windows)
    frames = torch.as_tensor(clip.frames)
    out = []
    with torch.no_grad():
        for s in range(0, clip.T, batch):
            out.append(net.to_pixels(net(frames[s : s + batch], windows[s : s + batch])))
    return torch.cat(out).double().numpy()


@dataclass
class LandmarkReport:
    loss_init: float
    loss_final: float
    losses: list[float]


def _stack_dataset(clips: list[Clip], m: int, ablate_audio: bool):
    frames = torch.as_tensor(np.concatenate([c.frames for c in clips]))
    audio = torch.as_tensor(np.concatenate([audio_windows(c, m) for c in clips]))
    if ablate_audio:
        audio = torch.zeros_like(audio)
    H, W = frames.shape[-2:]
    lms = np.concatenate([c.landmarks for c in clips]) / np.array([W - 1, H - 1])
    return frames, audio, torch.as_tensor(lms, dtype=torch.float32)


def landmark_mse(net: LandmarkNet, frames, audio, target, batch: int = 64) -> float:
    total = 0.0
    with torch.no_grad():
        for s in range(0, len(frames), batch):
            pred = net(frames[s : s + batch], audio[s : s + batch])
            total += float(((pred - target[s : s + batch]) ** 2).sum())
    return total / target.numel()


def train_landmark_net(
    degraded_clips: list[Clip],
    epochs: int = 30,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 16,
    m: int = 2,
    ablate_audio: bool = False,
) -> tuple[LandmarkNet, LandmarkReport]:
    """Fit the regressor on degraded frames against the clips' pristine landmarks.

    ``degraded_clips`` carry the ground-truth landmarks unchanged from the
    pristine frames (degradation copies them), so they serve as targets.
    """
    frames, audio, target = _stack_dataset(degraded_clips, m, ablate_audio)
    torch.manual_seed(seed)
    net = LandmarkNet(K=target.shape[1], H=frames.shape[-2], W=frames.shape[-1],
                      window_len=audio.shape[-1], segments=2 * m + 1)
    opt = Adam(dict(net.named_parameters()), lr)
    loss_init = landmark_mse(net, frames, audio, target)
    losses = []
    n = len(frames)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        running = 0.0
        for s in range(0, n, batch_size):
            idx = torch.as_tensor(order[s : s + batch_size])
            pred = net(frames[idx], audio[idx])
            loss = ((pred - target[idx]) ** 2).mean()
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"landmark loss became {loss.item()} at epoch {epoch}, batch start {s}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += loss.item() * len(idx)
        losses.append(running / n)
    return net, LandmarkReport(loss_init, landmark_mse(net, frames, audio, target), losses)


def landmark_errors(net: LandmarkNet, clips: list[Clip], m: int = 2, ablate_audio: bool = False) -> np.ndarray:
    """Per-landmark Euclidean pixel error, (total frames, K)."""
    pred = np.concatenate([predict_clip_landmarks(net, c, m, ablate_audio) for c in clips])
    gt = np.concatenate([c.landmarks for c in clips])
    return np.linalg.norm(pred - gt, axis=-1)


def mouth_vertical_error(errors: np.ndarray) -> float:
    return float(errors[:, [MOUTH_IDS[2], MOUTH_IDS[3]]].mean())
