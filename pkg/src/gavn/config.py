"""Declarative run configuration: one JSON tree holding scene, data splits,
degradation grid, model, training and paths. Every run writes the resolved
tree (all defaults expanded, paths absolute) next to its outputs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from gavn.degrade import DegradationSpec
from gavn.reconstructor import ModelConfig
from gavn.synthclip import SceneParams
from gavn.trainer import DESK_PROFILE, TrainConfig

SPLITS = ("train", "val", "test")
RESOLVED_NAME = "resolved_config.json"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    seed_start: int
    count: int

    @property
    def seeds(self) -> range:
        return range(self.seed_start, self.seed_start + self.count)


def default_splits() -> dict[str, SplitSpec]:
    return {"train": SplitSpec(0, 8), "val": SplitSpec(1000, 2), "test": SplitSpec(2000, 2)}


def default_degradations() -> tuple[DegradationSpec, ...]:
    return (
        DegradationSpec("compression", 0.2),
        DegradationSpec("blur", 7),
        DegradationSpec("low_resolution", 4),
    )


@dataclass(frozen=True)
class LandmarkTrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 16


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    scene: SceneParams = SceneParams()
    duration: float = 2.0
    splits: dict = field(default_factory=default_splits)
    degradations: tuple = field(default_factory=default_degradations)
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig(**DESK_PROFILE)
    landmark_net: LandmarkTrainConfig = LandmarkTrainConfig()
    train_degradation: str = "blur"
    data_dir: str = "data"
    degraded_dir: str = "degraded"
    run_dir: str = "run"

    def __post_init__(self):
        if set(self.splits) != set(SPLITS):
            raise ConfigError(f"splits must be exactly {SPLITS}, got {sorted(self.splits)}")
        ranges = sorted((s.seed_start, s.seed_start + s.count, n) for n, s in self.splits.items())
        for (a0, a1, an), (b0, b1, bn) in zip(ranges, ranges[1:]):
            if b0 < a1:
                raise ConfigError(f"seed ranges of splits {an!r} [{a0}, {a1}) and {bn!r} [{b0}, {b1}) overlap")
        for n, s in self.splits.items():
            if s.count < 1:
                raise ConfigError(f"split {n!r} needs at least one clip")
        kinds = [d.kind for d in self.degradations]
        if len(set(kinds)) != len(kinds):
            raise ConfigError(f"degradation grid repeats a kind: {kinds}")
        if self.train_degradation not in kinds:
            raise ConfigError(f"train_degradation {self.train_degradation!r} is not in the grid {kinds}")
        if tuple(self.model.frame_size) != (self.scene.H, self.scene.W):
            raise ConfigError(f"model.frame_size {self.model.frame_size} != scene size {(self.scene.H, self.scene.W)}")
        if self.model.K != self.scene.K:
            raise ConfigError(f"model.K {self.model.K} != scene.K {self.scene.K}")
        if self.duration <= 0:
            raise ConfigError("duration must be positive")

    def degradation(self, kind: str) -> DegradationSpec:
        for d in self.degradations:
            if d.kind == kind:
                return d
        raise ConfigError(f"no {kind!r} degradation in the grid")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "scene": asdict(self.scene),
            "duration": self.duration,
            "splits": {n: asdict(s) for n, s in sorted(self.splits.items())},
            "degradations": [
                {k: v for k, v in d.to_dict().items() if k != "resolved_level"} for d in self.degradations
            ],
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "landmark_net": asdict(self.landmark_net),
            "train_degradation": self.train_degradation,
            "data_dir": self.data_dir,
            "degraded_dir": self.degraded_dir,
            "run_dir": self.run_dir,
        }

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "RunConfig":
        """Build from a (possibly partial) tree; relative paths resolve against ``base``."""
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            kw = {}
            for k in ("seed", "duration", "train_degradation"):
                if k in d:
                    kw[k] = d[k]
            if "scene" in d:
                kw["scene"] = SceneParams(**d["scene"])
            if "splits" in d:
                kw["splits"] = {**default_splits(), **{n: SplitSpec(**s) for n, s in d["splits"].items()}}
            if "degradations" in d:
                kw["degradations"] = tuple(DegradationSpec.from_dict(x) for x in d["degradations"])
            if "model" in d:
                kw["model"] = ModelConfig.from_dict(d["model"])
            if "train" in d:
                merged = TrainConfig(**DESK_PROFILE).to_dict()
                for k, v in d["train"].items():
                    merged[k] = {**merged[k], **v} if isinstance(merged.get(k), dict) else v
                kw["train"] = TrainConfig.from_dict(merged)
            if "landmark_net" in d:
                kw["landmark_net"] = LandmarkTrainConfig(**d["landmark_net"])
            for k in ("data_dir", "degraded_dir", "run_dir"):
                if k in d:
                    kw[k] = d[k]
            cfg = cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        if base is not None:
            cfg = cfg.with_base(base)
        return cfg

    def with_base(self, base: Path) -> "RunConfig":
        fix = lambda p: str((Path(base) / p).resolve())  # noqa: E731
        return replace(self, data_dir=fix(self.data_dir), degraded_dir=fix(self.degraded_dir),
                       run_dir=fix(self.run_dir))

    def with_overrides(self, seed: int | None = None, ablate: str | None = None, landmarks: str | None = None,
                       attention: str | None = None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed, train=replace(cfg.train, seed=seed))
        if ablate is not None:
            cfg = replace(cfg, train=replace(cfg.train, ablate=ablate))
        if landmarks is not None:
            cfg = replace(cfg, model=replace(cfg.model, landmarks=landmarks))
        if attention is not None:
            cfg = replace(cfg, model=replace(cfg.model, attention_target=attention))
        return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().with_base(Path.cwd())
    path = Path(path)
    try:
        tree = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(tree, base=path.parent)


def write_resolved(cfg: RunConfig, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = directory / RESOLVED_NAME
    out.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return out
