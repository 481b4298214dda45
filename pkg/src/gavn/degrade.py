"""Compression, blur and low-resolution distortions for clips.

Frames are ``(3, H, W)`` float arrays in [0, 1]. Every operation is a pure
function of its inputs, so degraded clips are reproducible bit for bit.
"""

from __future__ import annotations

import shutil
import subprocess
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import fft
from scipy.ndimage import correlate1d

from gavn.synthclip import Clip

KINDS = ("compression", "blur", "low_resolution")
REFERENCE_BLUR_RANGE = (15, 25)
DESK_BLUR_RANGE = (5, 9)
FACTOR_RANGE = (2, 8)


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    level: float | None = None  # quality step, kernel size or factor; None draws from the range
    seed: int = 0
    blur_kernel_range: tuple[int, int] = DESK_BLUR_RANGE

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}; expected one of {KINDS}")
        if self.level is None:
            return
        if self.kind == "blur":
            k = int(self.level)
            if k != self.level or k % 2 == 0:
                raise ValueError(f"blur kernel size must be an odd integer, got {self.level}")
        elif self.kind == "low_resolution":
            if not FACTOR_RANGE[0] <= self.level <= FACTOR_RANGE[1]:
                raise ValueError(f"downsampling factor must be in {FACTOR_RANGE}, got {self.level}")
        elif self.level <= 0:
            raise ValueError(f"quality step must be positive, got {self.level}")

    def resolve_level(self) -> float:
        if self.level is not None:
            return self.level
        rng = np.random.default_rng(self.seed)
        if self.kind == "blur":
            lo, hi = self.blur_kernel_range
            return int(rng.choice(np.arange(lo, hi + 1, 2)))
        if self.kind == "low_resolution":
            return int(rng.integers(FACTOR_RANGE[0], FACTOR_RANGE[1] + 1))
        return float(rng.uniform(0.1, 0.4))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blur_kernel_range"] = list(self.blur_kernel_range)
        d["resolved_level"] = self.resolve_level()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        d = {k: v for k, v in d.items() if k != "resolved_level"}
        if "blur_kernel_range" in d:
            d["blur_kernel_range"] = tuple(d["blur_kernel_range"])
        return cls(**d)


def scaled_blur_kernel(ref_k: int, frame_size: int = 64,
                       desk_range: tuple[int, int] = DESK_BLUR_RANGE) -> int:
    """Map a 224-px-scale kernel size in [15, 25] linearly onto ``desk_range`` (odd)."""
    if frame_size >= 224:
        return int(ref_k)
    lo, hi = REFERENCE_BLUR_RANGE
    frac = (ref_k - lo) / (hi - lo)
    k = desk_range[0] + frac * (desk_range[1] - desk_range[0])
    return int(2 * round((k - 1) / 2) + 1)


# ---------------------------------------------------------------------------
# blur
# ---------------------------------------------------------------------------


def gaussian_sigma(k: int) -> float:
    return 0.3 * ((k - 1) * 0.5 - 1) + 0.8


def gaussian_kernel1d(k: int) -> np.ndarray:
    if k % 2 == 0 or k < 1:
        raise ValueError(f"kernel size must be a positive odd integer, got {k}")
    sigma = gaussian_sigma(k)
    x = np.arange(k) - (k - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def gaussian_kernel2d(k: int) -> np.ndarray:
    g = gaussian_kernel1d(k)
    return np.outer(g, g)


def gaussian_blur(frame: np.ndarray, kernel_size: int) -> np.ndarray:
    g = gaussian_kernel1d(int(kernel_size))
    # scipy "mirror" = reflect without repeating the edge sample
    out = correlate1d(np.asarray(frame, dtype=np.float64), g, axis=-1, mode="mirror")
    out = correlate1d(out, g, axis=-2, mode="mirror")
    return out


# ---------------------------------------------------------------------------
# bicubic resize
# ---------------------------------------------------------------------------


def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    return np.where(
        x <= 1,
        (a + 2) * x3 - (a + 3) * x2 + 1,
        np.where(x < 2, a * x3 - 5 * a * x2 + 8 * a * x - 4 * a, 0.0),
    )


def _reflect_index(i: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    i = np.mod(i, period)
    return np.where(i >= n, period - i, i)


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) Catmull-Rom interpolation matrix; kernel widened when shrinking."""
    scale = n_out / n_in
    stretch = min(scale, 1.0)
    width = 4.0 / stretch
    out = np.arange(n_out)
    centre = (out + 0.5) / scale - 0.5
    left = np.floor(centre - width / 2).astype(int) + 1
    taps = int(np.ceil(width)) + 1
    idx = left[:, None] + np.arange(taps)[None, :]
    w = cubic(stretch * (centre[:, None] - idx))
    w = w / w.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.repeat(out, taps), _reflect_index(idx, n_in).ravel()), w.ravel())
    return mat


def bicubic_resize(frame: np.ndarray, scale: float | None = None,
                   size: tuple[int, int] | None = None) -> np.ndarray:
    """Resize a (C, H, W) frame; output is ``round(H*scale)`` or the explicit ``size``."""
    frame = np.asarray(frame, dtype=np.float64)
    h, w = frame.shape[-2:]
    if size is None:
        if scale is None or scale <= 0:
            raise ValueError(f"scale must be positive, got {scale}")
        size = (int(round(h * scale)), int(round(w * scale)))
    oh, ow = size
    if oh < 8 or ow < 8:
        raise ValueError(f"resize output {oh}x{ow} is smaller than 8x8")
    if (oh, ow) == (h, w):
        return frame.copy()
    mh = resize_matrix(h, oh)
    mw = resize_matrix(w, ow)
    return np.einsum("oh,...hw,pw->...op", mh, frame, mw)


def downsample(frame: np.ndarray, factor: float) -> np.ndarray:
    return bicubic_resize(frame, scale=1.0 / factor)


# ---------------------------------------------------------------------------
# compression proxy
# ---------------------------------------------------------------------------

BLOCK = 8


def _blocks(x: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    c, h, w = x.shape
    ph, pw = -h % BLOCK, -w % BLOCK
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    H, W = x.shape[-2:]
    b = x.reshape(c, H // BLOCK, BLOCK, W // BLOCK, BLOCK).transpose(0, 1, 3, 2, 4)
    return b, (h, w)


def _unblocks(b: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    c, nh, nw = b.shape[:3]
    x = b.transpose(0, 1, 3, 2, 4).reshape(c, nh * BLOCK, nw * BLOCK)
    return x[:, : hw[0], : hw[1]]


def block_dct(frame: np.ndarray) -> np.ndarray:
    b, _ = _blocks(np.asarray(frame, dtype=np.float64))
    return fft.dctn(b, axes=(-2, -1), norm="ortho")


def compress_proxy(frame: np.ndarray, quality_step: float) -> np.ndarray:
    """8x8 block DCT, uniform quantisation by ``quality_step``, inverse DCT, clamp."""
    if quality_step <= 0:
        raise ValueError(f"quality_step must be positive, got {quality_step}")
    b, hw = _blocks(np.asarray(frame, dtype=np.float64))
    coef = fft.dctn(b, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / quality_step) * quality_step
    rec = fft.idctn(coef, axes=(-2, -1), norm="ortho")
    return np.clip(_unblocks(rec, hw), 0.0, 1.0)


def x264_compress(frames: np.ndarray, crf: int = 45, fps: int = 25, ffmpeg: str = "ffmpeg") -> np.ndarray:
    """Round-trip frames through an external x264 encoder.

    Optional hook; needs an ``ffmpeg`` binary with libx264 on PATH.
    """
    exe = shutil.which(ffmpeg)
    if exe is None:
        raise RuntimeError(f"{ffmpeg!r} not found on PATH; the x264 hook needs an external encoder")
    T, _, H, W = frames.shape
    raw = (np.clip(frames, 0, 1) * 255).round().astype(np.uint8).transpose(0, 2, 3, 1).tobytes()
    with tempfile.TemporaryDirectory() as tmp:
        video = Path(tmp) / "clip.mp4"
        subprocess.run(
            [exe, "-y", "-loglevel", "error", "-f", "rawvideo", "-pix_fmt", "rgb24", "-s", f"{W}x{H}",
             "-r", str(fps), "-i", "-", "-c:v", "libx264", "-crf", str(crf), "-pix_fmt", "yuv420p", str(video)],
            input=raw, check=True,
        )
        out = subprocess.run(
            [exe, "-loglevel", "error", "-i", str(video), "-f", "rawvideo", "-pix_fmt", "rgb24", "-"],
            capture_output=True, check=True,
        ).stdout
    arr = np.frombuffer(out, dtype=np.uint8).reshape(T, H, W, 3).transpose(0, 3, 1, 2)
    return arr.astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# clips
# ---------------------------------------------------------------------------


def degrade_frame(frame: np.ndarray, kind: str, level: float) -> np.ndarray:
    if kind == "blur":
        return gaussian_blur(frame, int(level))
    if kind == "low_resolution":
        h, w = frame.shape[-2:]
        small = downsample(frame, level)
        return np.clip(bicubic_resize(small, size=(h, w)), 0.0, 1.0)
    if kind == "compression":
        return compress_proxy(frame, level)
    raise ValueError(f"unknown degradation kind {kind!r}")


def degrade_clip(clip: Clip, spec: DegradationSpec) -> Clip:
    """Apply ``spec`` frame by frame. Audio and landmarks are copied unchanged."""
    level = spec.resolve_level()
    frames = np.stack([degrade_frame(f, spec.kind, level) for f in clip.frames]).astype(np.float32)
    out = clip.copy(frames=frames)
    out.meta["degradation"] = spec.to_dict()
    return out
