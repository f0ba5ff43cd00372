"""JSON run configuration with strict key checking and two presets."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .losses import LossConfig, LossWeights
from .model import NetConfig
from .pipeline import PipelineParams
from .train import TrainSchedule


class ConfigError(ValueError):
    pass


@dataclass
class NetSection:
    in_channels: int = 2
    depth: int = 4
    widths: tuple = (16, 32, 64, 64)
    kernel: int = 3
    slope: float = 0.2
    size: int = 64
    conv_type: str = "gconv"
    bn_encoder: tuple | None = None
    bn_decoder: tuple | None = None

    def build(self) -> NetConfig:
        return NetConfig(**asdict(self))


@dataclass
class LossSection:
    c_valid: float = 30.0
    c_hole: float = 240.0
    c_perceptual: float = 0.2
    c_style: float = 0.05
    c_tv: float = 250.0
    c_lap: float = 20.0
    lap_levels: int = 3
    lap_exponent_sign: int = 1
    lap_reduction: str = "sum"
    tv_region: str = "dilated_hole"
    extractor_widths: tuple = (8, 16, 32)
    extractor_seed: int = 1234

    def build(self) -> LossConfig:
        w = LossWeights(self.c_valid, self.c_hole, self.c_perceptual, self.c_style, self.c_tv, self.c_lap)
        return LossConfig(w, self.lap_levels, self.lap_exponent_sign, self.lap_reduction, self.tv_region)


@dataclass
class TrainSection:
    phase1_epochs: int = 20
    phase2_epochs: int = 20
    phase1_lr: float = 1e-4
    phase2_lr: float = 5e-5
    batch_size: int = 8
    checkpoint_every: int = 0
    seed: int = 0
    hole_coverage: tuple = (0.25, 0.30)
    hole_pool: int = 256
    val_slices: int = 32

    def build(self) -> TrainSchedule:
        return TrainSchedule(self.phase1_epochs, self.phase2_epochs, self.phase1_lr, self.phase2_lr,
                             self.batch_size, checkpoint_every=self.checkpoint_every, seed=self.seed)


@dataclass
class PipelineSection:
    radius: float = 5.0
    interval: int = 3
    top_k: int = 3
    widths: tuple = (3, 5, 7, 9, 11)
    epsilon: float = 0.05
    r_min: float = 2.0
    theta_lo: float = 0.0
    theta_hi: float = 0.8
    theta_step: float = 0.02
    lam: float = 0.5
    gate_threshold: float = 0.1
    clip_to_ooi: bool = True
    batch_size: int = 16
    walk_score: str = "slice"
    workers: int = 1

    def build(self) -> PipelineParams:
        d = asdict(self)
        d.pop("workers")
        return PipelineParams(**d)


@dataclass
class PhantomSection:
    size: int = 64
    channels: int = 2
    train_slices: int = 500
    slices_per_subject: int = 10
    train_seed: int = 0
    val_seed: int = 99
    tumoral_subjects: int = 5
    healthy_subjects: int = 5
    eval_slices: int = 10
    tumor_radius: float = 4.0
    tumor_count: int = 1
    eval_seed: int = 1000


@dataclass
class MetricsSection:
    scale: float = 255.0
    ssim_mode: str = "global"


_SECTIONS = {"net": NetSection, "loss": LossSection, "train": TrainSection,
             "pipeline": PipelineSection, "phantom": PhantomSection, "metrics": MetricsSection}


@dataclass
class RunConfig:
    net: NetSection = field(default_factory=NetSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    phantom: PhantomSection = field(default_factory=PhantomSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = sorted(set(doc) - set(_SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        sections = {}
        for name, klass in _SECTIONS.items():
            body = doc.get(name, {})
            if not isinstance(body, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in fields(klass)}
            bad = sorted(set(body) - allowed)
            if bad:
                raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(bad)}")
            values = {k: tuple(v) if isinstance(v, list) else v for k, v in body.items()}
            sections[name] = klass(**values)
        cfg = cls(**sections)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls.from_dict(doc)

    def validate(self):
        """Build every component once so bad values fail at load time."""
        try:
            self.net.build()
            self.loss.build()
            self.train.build()
            self.pipeline.build()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if self.metrics.ssim_mode not in ("global", "windowed"):
            raise ConfigError("metrics.ssim_mode must be 'global' or 'windowed'")
        if self.metrics.scale <= 0:
            raise ConfigError("metrics.scale must be > 0")
        if self.phantom.channels != self.net.in_channels:
            raise ConfigError("phantom.channels must equal net.in_channels")
        if self.phantom.size != self.net.size:
            raise ConfigError("phantom.size must equal net.size")

    @classmethod
    def desk(cls) -> "RunConfig":
        """64x64 phantom-scale run."""
        cfg = cls()
        cfg.loss.lap_reduction = "mean"
        # phantom tumors sit well above this; healthy residual specks stay below
        cfg.pipeline.r_min = 3.5
        return cfg

    @classmethod
    def paper(cls) -> "RunConfig":
        """Full-scale hyperparameters (lung-cancer pipeline constants)."""
        p = PipelineParams.paper_lc()
        return cls(
            net=NetSection(depth=8, widths=(64, 128, 256, 512, 512, 512, 512, 512), size=512),
            loss=LossSection(),
            train=TrainSection(phase1_epochs=150, phase2_epochs=150),
            pipeline=PipelineSection(radius=p.radius, interval=p.interval, widths=p.widths, r_min=p.r_min),
            phantom=PhantomSection(size=512),
        )


PRESETS = {"desk": RunConfig.desk, "paper": RunConfig.paper}
