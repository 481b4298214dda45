"""Glue between clips on disk, the landmark regressor, training and restoration."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from gavn.checkpoint import Checkpoint, load_checkpoint, load_module, module_arrays
from gavn.landmark import LandmarkNet, predict_clip_landmarks, train_landmark_net
from gavn.reconstructor import GavnModel, ModelConfig, TemporalOnlyModel
from gavn.synthclip import Clip
from gavn.trainer import ClipTensors, TrainConfig, WindowDataset, clip_tensors, restore_tensors

LANDMARK_PREFIX = "landmark/"


def zero_audio(cfg: TrainConfig) -> bool:
    return cfg.ablate == "no-audio"


def fit_landmarks(degraded: list[Clip], model_cfg: ModelConfig, train_cfg: TrainConfig, epochs: int = 30,
                  lr: float = 1e-3, batch_size: int = 16) -> LandmarkNet | None:
    """Train the regressor when the model uses learned landmarks, else ``None``."""
    if model_cfg.landmarks != "learned":
        return None
    net, _ = train_landmark_net(degraded, epochs=epochs, lr=lr, seed=train_cfg.seed, batch_size=batch_size,
                                m=model_cfg.m, ablate_audio=zero_audio(train_cfg))
    return net


def clip_inputs(degraded: Clip, gt: Clip | None, model_cfg: ModelConfig, ablate: str | None,
                landmark_net: LandmarkNet | None) -> ClipTensors:
    no_audio = ablate == "no-audio"
    pts = None
    if landmark_net is not None:
        pts = predict_clip_landmarks(landmark_net, degraded, model_cfg.m, ablate_audio=no_audio)
    return clip_tensors(degraded, gt, model_cfg, landmarks=pts, zero_audio=no_audio)


def build_dataset(degraded: list[Clip], gt: list[Clip], model_cfg: ModelConfig, train_cfg: TrainConfig,
                  landmark_net: LandmarkNet | None) -> WindowDataset:
    if len(degraded) != len(gt):
        raise ValueError(f"{len(degraded)} degraded clips but {len(gt)} ground-truth clips")
    cts = [clip_inputs(d, g, model_cfg, train_cfg.ablate, landmark_net) for d, g in zip(degraded, gt)]
    return WindowDataset(cts, model_cfg)


def landmark_arrays(net: LandmarkNet | None) -> dict:
    return {} if net is None else module_arrays(net, LANDMARK_PREFIX)


def landmark_net_for(model_cfg: ModelConfig) -> LandmarkNet:
    H, W = model_cfg.frame_size
    return LandmarkNet(K=model_cfg.K, H=H, W=W, window_len=model_cfg.window_len, segments=2 * model_cfg.m + 1)


@dataclass
class Restorer:
    """A trained checkpoint ready for sliding-window inference."""

    model: torch.nn.Module
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    landmark_net: LandmarkNet | None
    header: dict

    def restore(self, clip: Clip) -> np.ndarray:
        ct = clip_inputs(clip, None, self.model_cfg, self.train_cfg.ablate, self.landmark_net)
        out = restore_tensors(self.model, ct, self.model_cfg.N)
        return out.clamp(0.0, 1.0).numpy()


def restorer_from_checkpoint(ckpt: Checkpoint) -> Restorer:
    model_cfg = ModelConfig.from_dict(ckpt.header["model_config"])
    train_cfg = TrainConfig.from_dict(ckpt.header["train_config"])
    full = GavnModel(model_cfg)
    load_module(full, ckpt, "model/")
    model: torch.nn.Module = full
    if ckpt.stage == "stage1" or train_cfg.ablate == "no-identity":
        model = TemporalOnlyModel(model_cfg, full.temporal)
        load_module(model.head, ckpt, "head/")
    net = None
    if model_cfg.landmarks == "learned":
        net = landmark_net_for(model_cfg)
        load_module(net, ckpt, LANDMARK_PREFIX)
    model.eval()
    return Restorer(model, model_cfg, train_cfg, net, ckpt.header)


def load_restorer(path: str | Path) -> Restorer:
    return restorer_from_checkpoint(load_checkpoint(path))


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
