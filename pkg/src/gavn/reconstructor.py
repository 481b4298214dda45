"""Reconstruction module and the assembled restoration network.

Restored frames are the input frames plus a predicted residual, and the final
projection starts at zero, so an untrained model is an exact identity.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from gavn.diffops import Conv, leaky, pixel_shuffle
from gavn.identity import IdentityModule
from gavn.temporal import ATTENTION_TARGETS, TemporalModule, WindowLayout

LANDMARK_SOURCES = ("oracle", "learned")


@dataclass(frozen=True)
class ModelConfig:
    N: int = 1
    C: int = 16
    K: int = 8
    m: int = 2
    frame_size: tuple[int, int] = (64, 64)
    attention_target: str = "aligned"
    landmarks: str = "oracle"
    fps: int = 25
    sample_rate: int = 16000
    heatmap_sigma: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "frame_size", tuple(self.frame_size))
        if self.attention_target not in ATTENTION_TARGETS:
            raise ValueError(f"attention_target must be one of {ATTENTION_TARGETS}")
        if self.landmarks not in LANDMARK_SOURCES:
            raise ValueError(f"landmarks must be one of {LANDMARK_SOURCES}")
        h, w = self.frame_size
        if h % 4 or w % 4:
            raise ValueError(f"frame size {h}x{w} must be divisible by 4")
        if self.sample_rate % self.fps:
            raise ValueError("sample_rate must be a multiple of fps")

    @property
    def window_len(self) -> int:
        return (2 * self.m + 1) * self.sample_rate // self.fps

    @property
    def layout(self) -> WindowLayout:
        return WindowLayout(self.N)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frame_size"] = list(self.frame_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class UpBlock(nn.Module):
    """x2 upsampling block: conv(C -> 4C), pixel shuffle, activation, conv."""

    def __init__(self, C: int):
        super().__init__()
        self.expand = Conv(C, 4 * C)
        self.post = Conv(C, C)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.post(leaky(pixel_shuffle(self.expand(x), 2)))


class LevelFusion(nn.Module):
    """carrier * Conv(I) + Conv(I), then x2 upsampling."""

    def __init__(self, C: int):
        super().__init__()
        self.scale = Conv(C, C)
        self.shift = Conv(C, C)
        self.up = UpBlock(C)

    def forward(self, carrier: torch.Tensor, ident: torch.Tensor) -> torch.Tensor:
        if carrier.shape[-2:] != ident.shape[-2:]:
            raise ValueError(f"spatial mismatch: carrier {tuple(carrier.shape)} vs identity {tuple(ident.shape)}")
        return self.up(carrier * self.scale(ident) + self.shift(ident))


class ResidualProjection(nn.Module):
    def __init__(self, C: int):
        super().__init__()
        self.proj = Conv(C, 3, zero_init=True)

    def forward(self, feat: torch.Tensor, frame: torch.Tensor) -> torch.Tensor:
        if feat.shape[-2:] != frame.shape[-2:]:
            raise ValueError(f"feature size {tuple(feat.shape[-2:])} != frame size {tuple(frame.shape[-2:])}")
        return self.proj(feat) + frame


class Reconstruction(nn.Module):
    def __init__(self, C: int):
        super().__init__()
        self.level2 = LevelFusion(C)
        self.level1 = LevelFusion(C)
        self.out = ResidualProjection(C)

    def forward(self, temporal: torch.Tensor, i1: torch.Tensor, i2: torch.Tensor,
                frame: torch.Tensor) -> torch.Tensor:
        f2 = self.level2(temporal, i2)
        f1 = self.level1(f2, i1)
        return self.out(f1, frame)


class TemporalHead(nn.Module):
    """Temporal-only output head: two x2 blocks and a residual projection."""

    def __init__(self, C: int):
        super().__init__()
        self.up1 = UpBlock(C)
        self.up2 = UpBlock(C)
        self.out = ResidualProjection(C)

    def forward(self, temporal: torch.Tensor, frame: torch.Tensor) -> torch.Tensor:
        return self.out(self.up2(leaky(self.up1(temporal))), frame)


def _flatten_frames(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(x.shape[0] * x.shape[1], *x.shape[2:])


def check_window(cfg: ModelConfig, frames: torch.Tensor) -> None:
    lay = cfg.layout
    if frames.dim() != 5 or frames.shape[1] != lay.n_inputs:
        got = frames.shape[1] if frames.dim() == 5 else f"shape {tuple(frames.shape)}"
        raise ValueError(f"window length mismatch: expected {lay.n_inputs} frames (2N+5, N={cfg.N}), got {got}")


def centre_frames(cfg: ModelConfig, frames: torch.Tensor) -> torch.Tensor:
    return frames[:, 2 : 2 + cfg.layout.n_outputs]


class GavnModel(nn.Module):
    """Temporal + identity + reconstruction; restores the 2N+1 centre frames."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.temporal = TemporalModule(cfg.C, cfg.N, cfg.attention_target)
        self.identity = IdentityModule(cfg.C, cfg.K, cfg.window_len, 2 * cfg.m + 1)
        self.recon = Reconstruction(cfg.C)

    def forward(self, frames: torch.Tensor, heatmaps: torch.Tensor, audio: torch.Tensor,
                return_features: bool = False):
        """
        Args:
            frames: (B, 2N+5, 3, H, W) degraded window.
            heatmaps: (B, 2N+1, K, H, W) landmark heatmaps of the centre frames.
            audio: (B, 2N+1, L) audio windows of the centre frames.

        Returns:
            (B, 2N+1, 3, H, W) restored frames, unclamped.
        """
        check_window(self.cfg, frames)
        b, n_out = frames.shape[0], self.cfg.layout.n_outputs
        x = centre_frames(self.cfg, frames)
        temporal = self.temporal(frames)
        i1, i2 = self.identity(_flatten_frames(x), _flatten_frames(heatmaps), _flatten_frames(audio))
        t = _flatten_frames(temporal)
        if i2.shape[-2:] != t.shape[-2:]:
            raise AssertionError(f"identity level-2 size {tuple(i2.shape[-2:])} != temporal size {tuple(t.shape[-2:])}")
        out = self.recon(t, i1, i2, _flatten_frames(x))
        out = out.view(b, n_out, *out.shape[1:])
        if return_features:
            return out, {"T": temporal, "I1": i1, "I2": i2}
        return out


class TemporalOnlyModel(nn.Module):
    """Temporal module with the temporal-only head (first training stage)."""

    def __init__(self, cfg: ModelConfig, temporal: TemporalModule | None = None):
        super().__init__()
        self.cfg = cfg
        self.temporal = temporal if temporal is not None else TemporalModule(cfg.C, cfg.N, cfg.attention_target)
        self.head = TemporalHead(cfg.C)

    def forward(self, frames: torch.Tensor, heatmaps=None, audio=None) -> torch.Tensor:
        check_window(self.cfg, frames)
        b, n_out = frames.shape[0], self.cfg.layout.n_outputs
        x = centre_frames(self.cfg, frames)
        out = self.head(_flatten_frames(self.temporal(frames)), _flatten_frames(x))
        return out.view(b, n_out, *out.shape[1:])


def build_model(cfg: ModelConfig, seed: int = 0) -> GavnModel:
    torch.manual_seed(seed)
    return GavnModel(cfg)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def config_signature(cfg: ModelConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
