"""Synthetic talking-face clips.

The mouth opening of every frame is a deterministic function of the audio
envelope, so audio carries real information about the mouth region. All
geometry is integer-valued, which makes the stored landmarks exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.io import wavfile

FPS = 25
SAMPLE_RATE = 16000

LANDMARK_NAMES = (
    "eye_left",
    "eye_right",
    "mouth_left",
    "mouth_right",
    "mouth_top",
    "mouth_bottom",
    "nose",
    "chin",
)
MOUTH_IDS = (2, 3, 4, 5)
EYE_IDS = (0, 1)


@dataclass(frozen=True)
class SceneParams:
    H: int = 64
    W: int = 64
    K: int = 8
    head_amplitude: float = 3.0
    blink_rate: float = 0.4
    texture_seed: int = 0

    def __post_init__(self):
        if self.H < 32 or self.W < 32:
            raise ValueError(f"frame must be at least 32x32, got {self.H}x{self.W}")
        if self.K < 8:
            raise ValueError(f"need at least 8 landmarks, got K={self.K}")


@dataclass
class Clip:
    frames: np.ndarray  # (T, 3, H, W) float32 in [0, 1]
    audio: np.ndarray  # (S,) float32 in [-1, 1]
    landmarks: np.ndarray  # (T, K, 2) pixel (x, y)
    fps: int = FPS
    sample_rate: int = SAMPLE_RATE
    envelope: np.ndarray | None = None  # (T,) per-frame audio envelope in [0, 1]
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def samples_per_frame(self) -> int:
        return self.sample_rate // self.fps

    def copy(self, **changes) -> "Clip":
        kw = dict(
            frames=self.frames.copy(),
            audio=self.audio.copy(),
            landmarks=self.landmarks.copy(),
            fps=self.fps,
            sample_rate=self.sample_rate,
            envelope=None if self.envelope is None else self.envelope.copy(),
            meta=json.loads(json.dumps(self.meta)),
        )
        kw.update(changes)
        return Clip(**kw)


# ---------------------------------------------------------------------------
# audio
# ---------------------------------------------------------------------------


def gen_audio(
    duration: float,
    sample_rate: int = SAMPLE_RATE,
    seed: int = 0,
    fps: int = FPS,
    silence: tuple[tuple[float, float], ...] = (),
) -> tuple[np.ndarray, np.ndarray]:
    """Burst-modulated voiced waveform and its per-frame envelope.

    The waveform is a harmonic carrier times a smooth envelope made of
    randomly placed Hann-shaped bursts. ``silence`` lists (start, end) second
    ranges where the envelope is forced to zero.

    Returns:
        (audio, env): float32 audio of ``T * sample_rate / fps`` samples and the
        per-frame envelope of length ``T = round(duration * fps)``.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    if sample_rate % fps:
        raise ValueError(f"sample_rate {sample_rate} must be a multiple of fps {fps}")
    rng = np.random.default_rng(seed)
    n_frames = int(round(duration * fps))
    spf = sample_rate // fps
    n = n_frames * spf
    t = np.arange(n) / sample_rate

    env = np.zeros(n)
    n_bursts = max(1, int(round(duration * 2.5)))
    for _ in range(n_bursts):
        center = rng.uniform(0, duration)
        width = rng.uniform(0.12, 0.35)
        amp = rng.uniform(0.5, 1.0)
        u = (t - center) / width
        env += amp * np.where(np.abs(u) < 0.5, np.cos(np.pi * u) ** 2, 0.0)
    env = np.clip(env, 0.0, 1.0)
    for start, end in silence:
        env[(t >= start) & (t < end)] = 0.0

    f0 = rng.uniform(110.0, 240.0)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    carrier = (
        0.55 * np.sin(2 * np.pi * f0 * t + phase[0])
        + 0.25 * np.sin(2 * np.pi * 2 * f0 * t + phase[1])
        + 0.1 * np.sin(2 * np.pi * 3 * f0 * t + phase[2])
        + 0.1 * rng.uniform(-1, 1, size=n)
    )
    audio = (env * carrier).astype(np.float32)
    frame_env = env.reshape(n_frames, spf).mean(axis=1)
    return audio, np.clip(frame_env, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

SKIN = np.array([0.86, 0.64, 0.52])
LIP = np.array([0.70, 0.24, 0.26])
CAVITY = np.array([0.12, 0.03, 0.05])
TEETH = np.array([0.97, 0.96, 0.92])
EYE = np.array([0.10, 0.08, 0.12])
NOSE = np.array([0.62, 0.40, 0.33])


@dataclass(frozen=True)
class FaceGeometry:
    """Integer face layout for one frame."""

    cx: int
    cy: int
    rx: int
    ry: int
    eye_dx: int
    eye_dy: int
    eye_r: int
    mouth_y: int
    mouth_hw: int
    aperture: int
    nose_y: int
    blink: bool

    def landmarks(self) -> np.ndarray:
        c, cy = self.cx, self.cy
        pts = [
            (c - self.eye_dx, cy - self.eye_dy),
            (c + self.eye_dx, cy - self.eye_dy),
            (c - self.mouth_hw, self.mouth_y),
            (c + self.mouth_hw, self.mouth_y),
            (c, self.mouth_y),
            (c, self.mouth_y + self.aperture),
            (c, self.nose_y),
            (c, cy + self.ry),
        ]
        return np.asarray(pts, dtype=np.float64)

    def mouth_bbox(self) -> tuple[int, int, int, int]:
        """(x0, y0, x1, y1) inclusive pixel box of the lips and opening."""
        return (
            self.cx - self.mouth_hw,
            self.mouth_y - 1,
            self.cx + self.mouth_hw,
            self.mouth_y + self.aperture + 1,
        )


def aperture_max(params: SceneParams) -> int:
    return max(4, int(round(0.16 * params.H)))


def face_geometry(params: SceneParams, dx: int, dy: int, env: float, blink: bool) -> FaceGeometry:
    H, W = params.H, params.W
    cx = W // 2 + dx
    cy = int(round(0.45 * H)) + dy
    return FaceGeometry(
        cx=cx,
        cy=cy,
        rx=int(round(0.30 * W)),
        ry=int(round(0.40 * H)),
        eye_dx=int(round(0.12 * W)),
        eye_dy=int(round(0.10 * H)),
        eye_r=max(2, int(round(0.045 * W))),
        mouth_y=cy + int(round(0.16 * H)),
        mouth_hw=max(3, int(round(0.12 * W))),
        aperture=int(round(aperture_max(params) * float(env))),
        nose_y=cy + int(round(0.04 * H)),
        blink=bool(blink),
    )


def _background(params: SceneParams) -> np.ndarray:
    rng = np.random.default_rng(params.texture_seed)
    H, W = params.H, params.W
    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    base = rng.uniform(0.2, 0.5, size=3)
    tilt = rng.uniform(-0.15, 0.15, size=(3, 2))
    bg = base[:, None, None] + tilt[:, 0, None, None] * xx + tilt[:, 1, None, None] * yy
    # low-frequency texture, a few smooth waves
    for _ in range(3):
        k = rng.uniform(1.0, 3.0, size=2) * 2 * np.pi
        ph = rng.uniform(0, 2 * np.pi)
        bg += 0.05 * np.sin(k[0] * xx + k[1] * yy + ph)[None]
    return bg


def render_frame(params: SceneParams, geo: FaceGeometry, background: np.ndarray) -> np.ndarray:
    H, W = params.H, params.W
    img = background.copy()
    yy, xx = np.mgrid[0:H, 0:W]

    head = ((xx - geo.cx) / geo.rx) ** 2 + ((yy - geo.cy) / geo.ry) ** 2 <= 1.0
    img[:, head] = SKIN[:, None]

    for sx in (-1, 1):
        ex, ey = geo.cx + sx * geo.eye_dx, geo.cy - geo.eye_dy
        if geo.blink:
            lid = (np.abs(yy - ey) == 0) & (np.abs(xx - ex) <= geo.eye_r)
            img[:, lid] = EYE[:, None]
        else:
            eye = (xx - ex) ** 2 + (yy - ey) ** 2 <= geo.eye_r**2
            img[:, eye] = EYE[:, None]
            glint = (xx == ex - 1) & (yy == ey - 1)
            img[:, glint] = 0.95

    nose = (np.abs(xx - geo.cx) <= 1) & (yy >= geo.nose_y - 2) & (yy <= geo.nose_y)
    img[:, nose] = NOSE[:, None]

    x0, x1 = geo.cx - geo.mouth_hw, geo.cx + geo.mouth_hw
    in_x = (xx >= x0) & (xx <= x1)
    upper = in_x & (yy == geo.mouth_y - 1)
    lower = in_x & (yy == geo.mouth_y + geo.aperture + 1)
    img[:, upper | lower] = LIP[:, None]
    if geo.aperture == 0:
        img[:, in_x & (yy == geo.mouth_y)] = LIP[:, None]
    else:
        opening = in_x & (yy >= geo.mouth_y) & (yy <= geo.mouth_y + geo.aperture)
        img[:, opening] = CAVITY[:, None]
        # upper teeth: vertical stripes, phase fixed relative to the mouth centre
        teeth_rows = max(1, (geo.aperture + 1) // 2)
        teeth = opening & (yy < geo.mouth_y + teeth_rows) & (((xx - geo.cx) % 3) != 0)
        img[:, teeth] = TEETH[:, None]
    return np.clip(img, 0.0, 1.0)


def head_path(n_frames: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth integer (dx, dy) translation per frame, |d| <= amplitude."""
    t = np.arange(n_frames) / FPS
    path = np.zeros((n_frames, 2))
    for axis in range(2):
        for _ in range(2):
            f = rng.uniform(0.3, 1.2)
            path[:, axis] += np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    path *= amplitude / 2.0
    return np.clip(np.round(path), -np.floor(amplitude), np.floor(amplitude)).astype(int)


def gen_clip(params: SceneParams, duration: float = 1.0, seed: int = 0,
             silence: tuple[tuple[float, float], ...] = ()) -> Clip:
    rng = np.random.default_rng([seed, 1])
    audio, env = gen_audio(duration, SAMPLE_RATE, seed=seed, fps=FPS, silence=silence)
    n_frames = env.shape[0]
    path = head_path(n_frames, params.head_amplitude, rng)

    blink = np.zeros(n_frames, dtype=bool)
    starts = rng.random(n_frames) < params.blink_rate / FPS
    for i in np.nonzero(starts)[0]:
        blink[i : i + 2] = True

    bg = _background(params)
    frames = np.empty((n_frames, 3, params.H, params.W), dtype=np.float32)
    lms = np.zeros((n_frames, params.K, 2), dtype=np.float64)
    for i in range(n_frames):
        geo = face_geometry(params, int(path[i, 0]), int(path[i, 1]), env[i], blink[i])
        frames[i] = render_frame(params, geo, bg)
        pts = geo.landmarks()
        lms[i, : len(pts)] = pts
        if params.K > len(pts):
            # extra points sit on the head outline
            extra = params.K - len(pts)
            ang = np.linspace(0, 2 * np.pi, extra, endpoint=False)
            lms[i, len(pts):, 0] = np.round(geo.cx + geo.rx * np.cos(ang))
            lms[i, len(pts):, 1] = np.round(geo.cy + geo.ry * np.sin(ang))
    lms[..., 0] = np.clip(lms[..., 0], 0, params.W - 1)
    lms[..., 1] = np.clip(lms[..., 1], 0, params.H - 1)
    meta = {"seed": int(seed), "scene": asdict(params), "duration": float(duration),
            "head_path": path.tolist(), "blink": blink.astype(int).tolist()}
    return Clip(frames=frames, audio=audio, landmarks=lms, envelope=env, meta=meta)


def clip_geometry(clip: Clip, i: int) -> FaceGeometry:
    """Re-derive frame ``i``'s analytic geometry from the clip's generation record."""
    params = SceneParams(**clip.meta["scene"])
    dx, dy = clip.meta["head_path"][i]
    return face_geometry(params, dx, dy, clip.envelope[i], bool(clip.meta["blink"][i]))


def audio_window(clip: Clip, t: int, m: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Audio samples and envelope for frames ``t-m .. t+m``, zero-padded at the ends."""
    if not 0 <= t < clip.T:
        raise IndexError(f"frame {t} outside clip of {clip.T} frames")
    spf = clip.samples_per_frame
    out = np.zeros((2 * m + 1) * spf, dtype=np.float32)
    env = np.zeros(2 * m + 1, dtype=np.float32)
    lo, hi = max(t - m, 0), min(t + m, clip.T - 1)
    dst = (lo - (t - m)) * spf
    out[dst : dst + (hi - lo + 1) * spf] = clip.audio[lo * spf : (hi + 1) * spf]
    if clip.envelope is not None:
        env[lo - (t - m) : hi - (t - m) + 1] = clip.envelope[lo : hi + 1]
    return out, env


def audio_windows(clip: Clip, m: int = 2) -> np.ndarray:
    return np.stack([audio_window(clip, t, m)[0] for t in range(clip.T)])


# ---------------------------------------------------------------------------
# on-disk container
# ---------------------------------------------------------------------------


def save_clip(clip: Clip, path: str | Path, extra_manifest: dict | None = None) -> Path:
    path = Path(path)
    (path / "frames").mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(clip.frames):
        img = np.round(np.clip(f, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(img, "RGB").save(path / "frames" / f"{i:06d}.png")
    wavfile.write(path / "audio.wav", clip.sample_rate, clip.audio.astype(np.float32))
    (path / "landmarks.json").write_text(json.dumps(clip.landmarks.tolist()))
    T, _, H, W = clip.frames.shape
    manifest = {
        "fps": clip.fps,
        "sample_rate": clip.sample_rate,
        "T": T,
        "H": H,
        "W": W,
        "K": int(clip.landmarks.shape[1]),
        "seed": clip.meta.get("seed"),
        "meta": clip.meta,
    }
    if clip.envelope is not None:
        manifest["envelope"] = clip.envelope.astype(np.float64).tolist()
    if extra_manifest:
        manifest.update(extra_manifest)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return path


def load_manifest(path: str | Path) -> dict:
    return json.loads((Path(path) / "manifest.json").read_text())


def load_clip(path: str | Path) -> Clip:
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise FileNotFoundError(f"no clip at {path} (missing manifest.json)")
    man = load_manifest(path)
    frames = np.empty((man["T"], 3, man["H"], man["W"]), dtype=np.float32)
    for i in range(man["T"]):
        img = np.asarray(Image.open(path / "frames" / f"{i:06d}.png").convert("RGB"))
        frames[i] = img.transpose(2, 0, 1).astype(np.float32) / 255.0
    sr, audio = wavfile.read(path / "audio.wav")
    lms = np.asarray(json.loads((path / "landmarks.json").read_text()), dtype=np.float64)
    env = man.get("envelope")
    return Clip(
        frames=frames,
        audio=np.asarray(audio, dtype=np.float32),
        landmarks=lms.reshape(man["T"], man["K"], 2),
        fps=man["fps"],
        sample_rate=int(sr),
        envelope=None if env is None else np.asarray(env, dtype=np.float32),
        meta=man.get("meta", {}),
    )
