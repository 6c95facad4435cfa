"""Flat ``key = value`` run configuration shared by every command."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .em_trainer import EmConfig
from .errors import DomainError
from .geometry_error import PolarErrorModel
from .segmodel import ModelSpec, TrainSchedule
from .synth import SceneSpec


class ConfigError(DomainError):
    """Malformed config text, unknown key, or out-of-range value."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # scene
    height: int = 256
    width: int = 256
    n_lines: int = 2
    turn_std: float = 0.08
    vertex_spacing: float = 2.0
    min_length: float = 50.0
    margin: float = 4.0
    min_separation: float = 24.0
    amplitude: float = 1.0
    noise_std: float = 0.35
    n_distractors: int = 2
    kernel_width: float = 2.0
    shift_max: float = 6.0
    phi: float = 0.7
    offset_mean: float = 0.0
    offset_std: float = -1.0          # < 0: half of shift_max
    # chunks, candidates and the location-error model
    chunk_len: float = 20.0
    buffer: float = 2.0
    resolution: float = 1.0
    n_side: int = 9
    step: float = 1.0
    rho_max: float = 9.0
    delta_rho: float = 1.0
    delta_theta: float = math.pi / 4
    # EM
    epsilon: float = 0.05
    top_k: int = 5
    max_iterations: int = 8
    estep: str = "sample"
    retrain_from_scratch: bool = True
    # windows
    window_size: int = 32
    n_train_windows: int = 28
    n_val_windows: int = 4
    augment: bool = True
    # model
    model: str = "unet"
    widths: tuple = (6, 12, 24)
    dropout: float = 0.2
    # schedule
    initial_lr: float = 0.1
    lr_halving_patience: int = 5
    min_lr: float = 1e-5
    early_stop_patience: int = 20
    max_epochs: int = 50
    batch_size: int = 16

    def __post_init__(self):
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        for name in ("buffer", "resolution", "chunk_len"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.window_size < 4 or self.window_size % 4:
            raise ConfigError(f"window_size must be a positive multiple of 4, got {self.window_size}")
        if self.window_size > self.height // 2 or self.window_size > self.width:
            raise ConfigError(f"window_size {self.window_size} does not fit a half scene")
        # the component constructors enforce the remaining ranges
        try:
            self.scene_spec()
            self.error_model()
            self.schedule()
            self.model_spec()
            self.em_config()
        except DomainError as exc:
            raise ConfigError(str(exc)) from exc

    # component views

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(
            height=self.height, width=self.width, n_lines=self.n_lines,
            turn_std=self.turn_std, vertex_spacing=self.vertex_spacing,
            min_length=self.min_length, margin=self.margin,
            min_separation=self.min_separation, amplitude=self.amplitude,
            noise_std=self.noise_std, n_distractors=self.n_distractors,
            kernel_width=self.kernel_width, rho_max=self.shift_max,
            delta_rho=self.delta_rho, phi=self.phi, offset_mean=self.offset_mean,
            offset_std=None if self.offset_std < 0 else self.offset_std,
            chunk_len=self.chunk_len, seed=self.seed,
        )

    def error_model(self) -> PolarErrorModel:
        return PolarErrorModel(delta_rho=self.delta_rho, delta_theta=self.delta_theta,
                               rho_max=self.rho_max)

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(
            initial_lr=self.initial_lr, lr_halving_patience=self.lr_halving_patience,
            min_lr=self.min_lr, early_stop_patience=self.early_stop_patience,
            max_epochs=self.max_epochs, batch_size=self.batch_size,
            dropout_rate=self.dropout,
        )

    def model_spec(self, in_channels: int | None = None) -> ModelSpec:
        if in_channels is None:
            in_channels = 1 + self.n_distractors
        return ModelSpec(kind=self.model, in_channels=in_channels,
                         widths=tuple(self.widths), dropout=self.dropout, seed=self.seed)

    def _shape(self, shape):
        return (self.height, self.width) if shape is None else tuple(shape[:2])

    def train_region(self, shape=None):
        """Lower half of the scene: train and validation windows."""
        h, w = self._shape(shape)
        return (h - h // 2, 0, h // 2, w)

    def test_region(self, shape=None):
        """Upper half of the scene: held-out test windows."""
        h, w = self._shape(shape)
        return (0, 0, h // 2, w)

    def em_config(self, shape=None) -> EmConfig:
        return EmConfig(
            epsilon=self.epsilon, top_k=self.top_k, max_iterations=self.max_iterations,
            retrain_from_scratch=self.retrain_from_scratch, chunk_len=self.chunk_len,
            n_side=self.n_side, step=self.step, error_model=self.error_model(),
            buffer=self.buffer, resolution=self.resolution, estep=self.estep,
            window_size=self.window_size, n_train_windows=self.n_train_windows,
            n_val_windows=self.n_val_windows, augment=self.augment,
            train_region=self.train_region(shape),
        )

    # text form

    def replace(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    def to_text(self) -> str:
        out = []
        for k, v in asdict(self).items():
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            out.append(f"{k} = {v}\n")
        return "".join(out)

    @classmethod
    def from_text(cls, text: str, **overrides) -> "RunConfig":
        defaults = cls()
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            key, _, val = (s.strip() for s in line.partition("="))
            if key not in _FIELDS:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            kw[key] = _coerce(key, val, getattr(defaults, key))
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def from_file(cls, path, **overrides) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


_FIELDS = {f.name for f in fields(RunConfig)}


def _coerce(key, val, default):
    try:
        if isinstance(default, bool):
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(val)
        if isinstance(default, float):
            return float(val)
        if isinstance(default, tuple):
            return tuple(int(v) for v in val.split(","))
        return val
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {val!r}") from None
