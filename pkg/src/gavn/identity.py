"""Intra-frame identity module: frame, landmark and audio features fused with
spatial attention at 1/2 and 1/4 frame resolution."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from gavn.diffops import Conv, leaky, sigmoid


class TwoLevelEncoder(nn.Module):
    """Two strided conv blocks producing features at 1/2 and 1/4 resolution."""

    def __init__(self, in_ch: int, C: int):
        super().__init__()
        self.in_ch = in_ch
        self.down1 = Conv(in_ch, C, stride=2)
        self.res1 = Conv(C, C)
        self.down2 = Conv(C, C, stride=2)
        self.res2 = Conv(C, C)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"input size {h}x{w} must be divisible by 4")
        if x.shape[1] != self.in_ch:
            raise ValueError(f"expected {self.in_ch} input channels, got {x.shape[1]}")
        f1 = leaky(self.down1(x))
        f1 = f1 + leaky(self.res1(f1))
        f2 = leaky(self.down2(f1))
        f2 = f2 + leaky(self.res2(f2))
        return f1, f2


class AudioEncoder(nn.Module):
    """Raw waveform window -> one C-vector per identity level."""

    def __init__(self, window_len: int, C: int, segments: int, hidden: int = 16):
        super().__init__()
        self.window_len = window_len
        self.segments = segments
        self.conv1 = nn.Conv1d(1, hidden, 16, stride=8, padding=4)
        self.conv2 = nn.Conv1d(hidden, hidden, 8, stride=4, padding=2)
        self.conv3 = nn.Conv1d(hidden, C, 4, stride=4)
        self.head1 = nn.Linear(C * segments, C)
        self.head2 = nn.Linear(C * segments, C)
        for m in (self.conv1, self.conv2, self.conv3, self.head1, self.head2):
            nn.init.normal_(m.weight, 0.0, math.sqrt(2.0 / (m.weight[0].numel())))
            nn.init.zeros_(m.bias)

    def forward(self, a: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if a.shape[-1] != self.window_len:
            raise ValueError(f"audio window must have {self.window_len} samples, got {a.shape[-1]}")
        x = a.reshape(-1, 1, self.window_len)
        x = leaky(self.conv1(x))
        x = leaky(self.conv2(x))
        x = leaky(self.conv3(x))
        x = F.adaptive_avg_pool1d(x, self.segments).flatten(1)
        return self.head1(x), self.head2(x)


def tile(vec: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return vec[:, :, None, None].expand(-1, -1, *like.shape[-2:])


class IdentityFusion(nn.Module):
    def __init__(self, C: int):
        super().__init__()
        self.att_landmark = Conv(2 * C, C)
        self.att_audio = Conv(2 * C, C)
        self.fuse = Conv(3 * C, C)

    def forward(self, ff: torch.Tensor, fl: torch.Tensor, fa: torch.Tensor) -> torch.Tensor:
        if not (ff.shape[-2:] == fl.shape[-2:] == fa.shape[-2:]):
            raise ValueError(
                f"spatial mismatch: frame {tuple(ff.shape)}, landmark {tuple(fl.shape)}, audio {tuple(fa.shape)}"
            )
        fl_hat = fl * sigmoid(self.att_landmark(torch.cat([fl, ff], 1)))
        fa_hat = fa * sigmoid(self.att_audio(torch.cat([fa, ff], 1)))
        return self.fuse(torch.cat([fl_hat, ff, fa_hat], 1))


class IdentityModule(nn.Module):
    """Per-frame identity features I1 (1/2 res) and I2 (1/4 res)."""

    def __init__(self, C: int = 16, K: int = 8, window_len: int = 3200, segments: int = 5):
        super().__init__()
        self.frame_enc = TwoLevelEncoder(3, C)
        self.landmark_enc = TwoLevelEncoder(K, C)
        self.audio_enc = AudioEncoder(window_len, C, segments)
        self.fuse1 = IdentityFusion(C)
        self.fuse2 = IdentityFusion(C)

    def forward(self, frame: torch.Tensor, heatmaps: torch.Tensor,
                audio: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """frame (B, 3, H, W), heatmaps (B, K, H, W), audio (B, L)."""
        if heatmaps.shape[-2:] != frame.shape[-2:]:
            raise ValueError(f"heatmaps {tuple(heatmaps.shape)} do not match frame {tuple(frame.shape)}")
        ff1, ff2 = self.frame_enc(frame)
        fl1, fl2 = self.landmark_enc(heatmaps)
        a1, a2 = self.audio_enc(audio)
        i1 = self.fuse1(ff1, fl1, tile(a1, ff1))
        i2 = self.fuse2(ff2, fl2, tile(a2, ff2))
        return i1, i2
