"""Two-stage training: temporal module first, then identity + reconstruction
with a warm-up phase before fine-tuning everything.

An epoch is ``steps_per_epoch`` optimiser steps (or one pass over every
window when unset). Window sampling for epoch ``e`` of phase ``p`` draws from
``default_rng([seed, p, e])``, so a run resumed from an epoch checkpoint
replays the exact trajectory of an uninterrupted one.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from gavn.checkpoint import Checkpoint, load_checkpoint, load_module, module_arrays, save_checkpoint
from gavn.optim import Adam, AdamConfig, AdamState, NonFiniteGradient, charbonnier_loss
from gavn.reconstructor import GavnModel, ModelConfig, TemporalOnlyModel
from gavn.synthclip import Clip, audio_windows
from gavn.landmark import render_heatmaps

log = logging.getLogger(__name__)

PHASES = ("stage1", "stage2-warmup", "stage2-finetune")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class Stage1Config:
    epochs: int = 20
    lr: float = 4e-4


@dataclass(frozen=True)
class Stage2Config:
    warmup_epochs: int = 5
    warmup_lr: float = 4e-4
    finetune_epochs: int = 15
    finetune_lr: float = 2e-4


@dataclass(frozen=True)
class TrainConfig:
    stage1: Stage1Config = Stage1Config()
    stage2: Stage2Config = Stage2Config()
    adam: AdamConfig = AdamConfig()
    charbonnier_eps: float = 1e-3
    batch_size: int = 2
    steps_per_epoch: int | None = None
    seed: int = 0
    ablate: str | None = None  # None | "no-audio" | "no-identity"

    def __post_init__(self):
        for name, lr in self.lrs().items():
            if not lr > 0:
                raise ValueError(f"{name} must be positive, got {lr}")
        if self.stage1.epochs < 1 or self.stage2.warmup_epochs < 0 or self.stage2.finetune_epochs < 1:
            raise ValueError("stage epochs must be >= 1 (warm-up may be 0)")
        if self.ablate not in (None, "no-audio", "no-identity"):
            raise ValueError(f"unknown ablation {self.ablate!r}")

    def lrs(self) -> dict:
        return {"stage1.lr": self.stage1.lr, "stage2.warmup_lr": self.stage2.warmup_lr,
                "stage2.finetune_lr": self.stage2.finetune_lr}

    def phase_plan(self) -> list[tuple[str, int, float]]:
        """(phase, epochs, lr) in order; the no-identity ablation stops after stage 1."""
        plan = [("stage1", self.stage1.epochs, self.stage1.lr)]
        if self.ablate != "no-identity":
            if self.stage2.warmup_epochs:
                plan.append(("stage2-warmup", self.stage2.warmup_epochs, self.stage2.warmup_lr))
            plan.append(("stage2-finetune", self.stage2.finetune_epochs, self.stage2.finetune_lr))
        return plan

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        return cls(
            stage1=Stage1Config(**d.pop("stage1", {})),
            stage2=Stage2Config(**d.pop("stage2", {})),
            adam=AdamConfig(**d.pop("adam", {})),
            **d,
        )


# Epoch counts keep the default 20 / 5 / 15 split; 50-step epochs give exactly 2000 steps.
# Learning rates are 4x the defaults to make up for the short schedule.
DESK_PROFILE = {
    "steps_per_epoch": 50,
    "batch_size": 4,
    "stage1": Stage1Config(lr=1.6e-3),
    "stage2": Stage2Config(warmup_lr=1.6e-3, finetune_lr=8e-4),
}


def desk_config(**overrides) -> TrainConfig:
    return replace(TrainConfig(**DESK_PROFILE), **overrides)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class ClipTensors:
    degraded: torch.Tensor  # (T, 3, H, W)
    target: torch.Tensor  # (T, 3, H, W)
    heatmaps: torch.Tensor  # (T, K, H, W)
    audio: torch.Tensor  # (T, L)


def clip_tensors(degraded: Clip, gt: Clip | None, cfg: ModelConfig, landmarks: np.ndarray | None = None,
                 zero_audio: bool = False) -> ClipTensors:
    """Model inputs for a clip. ``landmarks`` overrides the clip's stored (oracle) points."""
    pts = degraded.landmarks if landmarks is None else landmarks
    H, W = degraded.frames.shape[-2:]
    audio = torch.as_tensor(audio_windows(degraded, cfg.m))
    if zero_audio:
        audio = torch.zeros_like(audio)
    return ClipTensors(
        degraded=torch.as_tensor(degraded.frames, dtype=torch.float32),
        target=torch.as_tensor((gt if gt is not None else degraded).frames, dtype=torch.float32),
        heatmaps=render_heatmaps(pts, H, W, cfg.heatmap_sigma),
        audio=audio,
    )


class WindowDataset:
    """Every run of 2N+5 consecutive frames across a set of clips."""

    def __init__(self, clips: list[ClipTensors], cfg: ModelConfig):
        self.clips = clips
        self.cfg = cfg
        n_in = cfg.layout.n_inputs
        self.index = [(c, s) for c, ct in enumerate(clips) for s in range(ct.degraded.shape[0] - n_in + 1)]
        if not self.index:
            raise ValueError(f"no clip has the {n_in} frames a window needs")

    def __len__(self) -> int:
        return len(self.index)

    def batch(self, ids) -> tuple[torch.Tensor, ...]:
        lay = self.cfg.layout
        frames, hm, au, gt = [], [], [], []
        for i in ids:
            c, s = self.index[int(i)]
            ct = self.clips[c]
            out = slice(s + 2, s + 2 + lay.n_outputs)
            frames.append(ct.degraded[s : s + lay.n_inputs])
            hm.append(ct.heatmaps[out])
            au.append(ct.audio[out])
            gt.append(ct.target[out])
        return torch.stack(frames), torch.stack(hm), torch.stack(au), torch.stack(gt)

    def epoch_batches(self, seed: int, phase: int, epoch: int, batch_size: int,
                      steps: int | None) -> list[np.ndarray]:
        rng = np.random.default_rng([seed, phase, epoch])
        if steps is None:
            order = rng.permutation(len(self))
            return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
        return [rng.integers(0, len(self), size=batch_size) for _ in range(steps)]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def make_checkpoint(model: GavnModel, head: TemporalOnlyModel | None, opt: Adam | None, header: dict,
                    extra_arrays: dict | None = None) -> Checkpoint:
    arrays = module_arrays(model, "model/")
    if head is not None:
        arrays.update(module_arrays(head.head, "head/"))
    if opt is not None:
        for name in opt.params:
            if name in opt.state.m:
                arrays[f"adam.m/{name}"] = opt.state.m[name].detach().numpy()
                arrays[f"adam.v/{name}"] = opt.state.v[name].detach().numpy()
        header = dict(header, adam_step=opt.state.step)
    if extra_arrays:
        arrays.update(extra_arrays)
    return Checkpoint(header, arrays)


def restore_optimizer(opt: Adam, ckpt: Checkpoint) -> None:
    state = AdamState(step=int(ckpt.header.get("adam_step", 0)))
    for name in opt.params:
        key = f"adam.m/{name}"
        if key in ckpt.arrays:
            state.m[name] = torch.from_numpy(ckpt.arrays[key].copy())
            state.v[name] = torch.from_numpy(ckpt.arrays[f"adam.v/{name}"].copy())
    opt.state = state


def model_from_checkpoint(ckpt: Checkpoint) -> GavnModel:
    cfg = ModelConfig.from_dict(ckpt.header["model_config"])
    model = GavnModel(cfg)
    load_module(model, ckpt, "model/")
    return model


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _named(module: torch.nn.Module, prefix: str) -> dict:
    return {f"{prefix}{n}": p for n, p in module.named_parameters()}


@dataclass
class TrainResult:
    model: GavnModel
    head: TemporalOnlyModel
    checkpoint: Checkpoint
    epoch_losses: list[dict] = field(default_factory=list)


class Trainer:
    """Runs the phase plan epoch by epoch with per-epoch checkpoints.

    When ``run_dir`` is set, ``last.ckpt`` is rewritten after every epoch,
    ``stage1.ckpt`` / ``stage2.ckpt`` mark stage ends, and ``train_log.jsonl``
    receives one line per epoch.
    """

    def __init__(self, model: GavnModel, data: WindowDataset, cfg: TrainConfig,
                 run_dir: str | Path | None = None, extra_arrays: dict | None = None):
        self.model = model
        self.data = data
        self.cfg = cfg
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.extra_arrays = extra_arrays or {}
        torch.manual_seed(cfg.seed + 7919)
        self.head = TemporalOnlyModel(model.cfg, model.temporal)
        self.global_step = 0
        self.records: list[dict] = []

    # -- trainable sets -----------------------------------------------------
    def phase_params(self, phase: str) -> dict:
        m = self.model
        if phase == "stage1":
            return {**_named(m.temporal, "temporal."), **_named(self.head.head, "head.")}
        if phase == "stage2-warmup":
            return {**_named(m.identity, "identity."), **_named(m.recon, "recon.")}
        return _named(m, "")

    def forward(self, phase: str, frames, hm, au):
        if phase == "stage1":
            return self.head(frames)
        if phase == "stage2-warmup":
            # temporal module frozen: no graph through it
            with torch.no_grad():
                temporal = self.model.temporal(frames)
            return self._forward_with_temporal(frames, hm, au, temporal)
        return self.model(frames, hm, au)

    def _forward_with_temporal(self, frames, hm, au, temporal):
        m = self.model
        b, n = hm.shape[:2]
        x = frames[:, 2 : 2 + n].reshape(b * n, *frames.shape[2:])
        i1, i2 = m.identity(x, hm.reshape(b * n, *hm.shape[2:]), au.reshape(b * n, -1))
        out = m.recon(temporal.reshape(b * n, *temporal.shape[2:]), i1, i2, x)
        return out.view(b, n, *out.shape[1:])

    # -- checkpoint helpers -------------------------------------------------
    def header(self, stage: str, phase_idx: int, epochs_done: int) -> dict:
        return {
            "format": 1,
            "stage": stage,
            "phase": PHASES[phase_idx] if phase_idx < len(PHASES) else "done",
            "phase_index": phase_idx,
            "epoch": epochs_done,
            "global_step": self.global_step,
            "seed": self.cfg.seed,
            "model_config": self.model.cfg.to_dict(),
            "train_config": self.cfg.to_dict(),
        }

    def _write_log(self) -> None:
        if self.run_dir is None:
            return
        with open(self.run_dir / "train_log.jsonl", "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def _resume(self) -> tuple[int, Checkpoint | None]:
        path = self.run_dir / "last.ckpt" if self.run_dir else None
        if path is None or not path.exists():
            return 0, None
        ckpt = load_checkpoint(path)
        load_module(self.model, ckpt, "model/")
        if any(k.startswith("head/") for k in ckpt.arrays):
            load_module(self.head.head, ckpt, "head/")
        self.global_step = int(ckpt.header["global_step"])
        done = int(ckpt.header["epoch"])
        log_path = self.run_dir / "train_log.jsonl"
        if log_path.exists():
            lines = [json.loads(x) for x in log_path.read_text().splitlines() if x.strip()]
            self.records = [r for r in lines if r["epoch"] < done]
        return done, ckpt

    # -- main loop ----------------------------------------------------------
    def run(self, phases: tuple[str, ...] | None = None, resume: bool = False,
            stop_after_epoch: int | None = None) -> TrainResult:
        """Run the phase plan (or the subset ``phases``) in order.

        Epoch numbers are global across the whole plan, so a stage-2-only run
        starts counting at ``stage1.epochs``. ``stop_after_epoch`` stops once
        that many global epochs are complete, as an interrupted run would.
        """
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
        done, resume_ckpt = self._resume() if resume else (0, None)
        plan = self.cfg.phase_plan()
        t0 = time.time()
        ckpt = resume_ckpt
        epoch0 = 0
        for p_idx, (phase, epochs, lr) in enumerate(plan):
            start, epoch0 = epoch0, epoch0 + epochs
            if (phases is not None and phase not in phases) or done >= epoch0:
                continue
            code = PHASES.index(phase)
            opt = Adam(self.phase_params(phase), lr, self.cfg.adam)
            if resume_ckpt is not None and resume_ckpt.header.get("phase") == phase:
                restore_optimizer(opt, resume_ckpt)
            stage = "stage1" if phase == "stage1" else "stage2"
            stage_ends = p_idx == len(plan) - 1 or phase == "stage1"
            for e in range(max(done - start, 0), epochs):
                loss = self._run_epoch(phase, code, e, opt)
                gepoch = start + e
                self.records.append({
                    "epoch": gepoch, "stage": phase, "step": self.global_step, "lr": lr,
                    "loss": loss, "wall_time": round(time.time() - t0, 3),
                })
                ckpt = make_checkpoint(self.model, self.head, opt, self.header(stage, code, gepoch + 1),
                                       self.extra_arrays)
                if self.run_dir is not None:
                    save_checkpoint(ckpt, self.run_dir / "last.ckpt")
                    self._write_log()
                    if stage_ends and e == epochs - 1:
                        save_checkpoint(ckpt, self.run_dir / f"{stage}.ckpt")
                log.info("epoch %d %s loss %.6f", gepoch, phase, loss)
                if stop_after_epoch is not None and gepoch + 1 >= stop_after_epoch:
                    return TrainResult(self.model, self.head, ckpt, self.records)
        return TrainResult(self.model, self.head, ckpt, self.records)

    def _run_epoch(self, phase: str, code: int, epoch: int, opt: Adam) -> float:
        cfg = self.cfg
        total, count = 0.0, 0
        for ids in self.data.epoch_batches(cfg.seed, code, epoch, cfg.batch_size, cfg.steps_per_epoch):
            frames, hm, au, gt = self.data.batch(ids)
            pred = self.forward(phase, frames, hm, au)
            loss = charbonnier_loss(pred, gt, cfg.charbonnier_eps)
            if not torch.isfinite(loss):
                last = self.run_dir / "last.ckpt" if self.run_dir else "none (no run directory)"
                raise TrainingDiverged(
                    f"{phase} loss became {loss.item()} at epoch {epoch}, step {self.global_step}; "
                    f"last good checkpoint: {last}"
                )
            opt.zero_grad()
            loss.backward()
            try:
                opt.step()
            except NonFiniteGradient as exc:
                raise TrainingDiverged(f"{exc} at step {self.global_step}") from exc
            self.global_step += 1
            total += loss.item()
            count += 1
        return total / max(count, 1)


def train_stage1(model: GavnModel, data: WindowDataset, cfg: TrainConfig,
                 run_dir: str | Path | None = None) -> TrainResult:
    """Optimise only the temporal module, through the temporal-only head."""
    return Trainer(model, data, cfg, run_dir).run(phases=("stage1",))


def train_stage2(model: GavnModel, data: WindowDataset, cfg: TrainConfig, stage1_ckpt: Checkpoint | None,
                 run_dir: str | Path | None = None) -> TrainResult:
    """Warm up identity + reconstruction on a frozen temporal module, then fine-tune all."""
    if stage1_ckpt is None:
        raise ValueError("stage 2 needs a stage-1 checkpoint, got None")
    if stage1_ckpt.stage != "stage1":
        raise ValueError(f"stage 2 needs a stage-1 checkpoint, got stage marker {stage1_ckpt.stage!r}")
    if cfg.ablate == "no-identity":
        raise ValueError("the no-identity ablation has no second stage")
    load_module(model, stage1_ckpt, "model/")
    trainer = Trainer(model, data, cfg, run_dir)
    if any(k.startswith("head/") for k in stage1_ckpt.arrays):
        load_module(trainer.head.head, stage1_ckpt, "head/")
    trainer.global_step = int(stage1_ckpt.header.get("global_step", 0))
    return trainer.run(phases=("stage2-warmup", "stage2-finetune"))


def train_all(model: GavnModel, data: WindowDataset, cfg: TrainConfig, run_dir: str | Path | None = None,
              resume: bool = False, stop_after_epoch: int | None = None,
              extra_arrays: dict | None = None) -> TrainResult:
    return Trainer(model, data, cfg, run_dir, extra_arrays).run(resume=resume, stop_after_epoch=stop_after_epoch)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def window_centres(T: int, N: int) -> list[int]:
    """Centres of consecutive output blocks of 2N+1 frames covering ``0..T-1``."""
    n_out = 2 * N + 1
    if T < n_out:
        raise ValueError(f"clip of {T} frames is shorter than one output block ({n_out})")
    centres = list(range(N, T - N, n_out))
    if centres[-1] + N < T - 1:
        centres.append(T - 1 - N)
    return centres


@torch.no_grad()
def restore_tensors(model, ct: ClipTensors, N: int) -> torch.Tensor:
    """Sliding-window restoration; window frames beyond the clip repeat the edge frame."""
    T = ct.degraded.shape[0]
    out = torch.empty_like(ct.degraded)
    for c in window_centres(T, N):
        idx = [min(max(i, 0), T - 1) for i in range(c - N - 2, c + N + 3)]
        outs = slice(c - N, c + N + 1)
        pred = model(ct.degraded[idx][None], ct.heatmaps[outs][None], ct.audio[outs][None])
        out[outs] = pred[0]
    return out


def mean_loss(model, data: WindowDataset, eps: float = 1e-3) -> float:
    vals = []
    with torch.no_grad():
        for i in range(len(data)):
            frames, hm, au, gt = data.batch([i])
            vals.append(charbonnier_loss(model(frames, hm, au), gt, eps).item())
    return float(np.mean(vals))


def psnr_tensor(a: torch.Tensor, b: torch.Tensor) -> float:
    mse = float(((a.double() - b.double()) ** 2).mean())
    return 100.0 if mse == 0 else min(100.0, 10 * math.log10(1.0 / mse))
