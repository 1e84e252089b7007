"""One INI file configures a whole experiment.

Each section maps onto one dataclass; unknown sections or keys are errors.
Example::

    [forecast]
    velocity_window = 4
    horizon = 15
    flow_stack = 9

    [net]
    conv = 8x3x2, 16x3x2

    [split]
    rule = range
    ranges = train:0-250, test:251-346
    folds = 5

Values given on the command line as ``section.key=value`` override the file.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field, fields

from trajforecast.annotate import FilterConfig, TrackerConfig
from trajforecast.dataset import SplitSpec
from trajforecast.flow import PreprocessConfig
from trajforecast.kinematics import ForecastConfig
from trajforecast.model import NetSpec
from trajforecast.train import AdamConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    stride: int = 1
    min_history: int = 0  # 0: max(flow_stack, velocity_window)
    frame_step: int = 1  # keep every k-th frame at ingestion (2 for 30 -> 15 fps)


@dataclass(frozen=True)
class NetConfig:
    conv: str = "8x3x2,16x3x2"
    activation: str = "relu"
    precision: int = 32
    input_offset: float = 0.5

    def layers(self) -> tuple[tuple[int, int, int], ...]:
        out = []
        for part in self.conv.split(","):
            part = part.strip()
            if not part:
                continue
            try:
                c, k, s = (int(x) for x in part.lower().split("x"))
            except ValueError:
                raise ConfigError(f"net.conv: cannot parse layer {part!r} (want OUTxKERNELxSTRIDE)") from None
            out.append((c, k, s))
        return tuple(out)


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 0.0  # 0 keeps [optim] values
    lr_reduced: float = 0.0
    max_epochs: int = 0


@dataclass(frozen=True)
class PretrainConfig:
    fraction: float = 1.0


@dataclass(frozen=True)
class SynthConfig:
    n_videos: int = 40
    kinds: tuple[str, ...] = ("start_walk", "stop", "constant_velocity")
    seed: int = 0
    flow_noise: float = 0.25
    frame_width: int = 320
    frame_height: int = 180
    speed_min: float = 2.0
    speed_max: float = 5.0
    extra_frames: int = 2
    drop_rate: float = 0.0
    jitter: float = 0.0
    video_prefix: str = "video"


@dataclass(frozen=True)
class EvalConfig:
    per_coordinate: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    forecast: ForecastConfig = field(default_factory=ForecastConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    net: NetConfig = field(default_factory=NetConfig)
    optim: AdamConfig = field(default_factory=AdamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def net_spec(self, in_channels: int | None = None, input_size: int | None = None,
                 horizon: int | None = None) -> NetSpec:
        return NetSpec(
            in_channels=in_channels or 2 * self.forecast.flow_stack,
            input_size=input_size or self.preprocess.crop_to,
            conv=self.net.layers(),
            horizon=horizon or self.forecast.horizon,
            activation=self.net.activation,
            precision=self.net.precision,
            input_offset=self.net.input_offset,
        )

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for f in fields(self):
            section = getattr(self, f.name)
            cp[f.name] = {k.name: _render(getattr(section, k.name)) for k in fields(section)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _render(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _parse(section: str, key: str, raw: str, typ):
    raw = raw.strip()
    where = f"{section}.{key}"
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typing.get_origin(typ) is tuple:
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        if typing.get_origin(typ) is typing.Union:
            return None if raw.lower() in ("", "none") else raw
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def build_config(sections: dict[str, dict[str, str]]) -> ExperimentConfig:
    top = {f.name: f for f in fields(ExperimentConfig)}
    values = {}
    for name, entries in sections.items():
        if name not in top:
            raise ConfigError(f"unknown config section [{name}]")
        cls = top[name].default_factory
        hints = typing.get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, raw in entries.items():
            if key not in known:
                raise ConfigError(f"unknown config key {name}.{key}")
            kwargs[key] = _parse(name, key, raw, hints[key])
        try:
            values[name] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}]: {exc}") from None
    cfg = ExperimentConfig(**values)
    cfg.net.layers()
    try:
        cfg.net_spec()
    except ValueError as exc:
        raise ConfigError(f"[net]: {exc}") from None
    return cfg


def read_sections(text: str, source: str = "<config>") -> dict[str, dict[str, str]]:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    return {s: dict(cp[s]) for s in cp.sections()}


def apply_overrides(sections: dict[str, dict[str, str]], overrides: dict[str, str]) -> dict[str, dict[str, str]]:
    out = {k: dict(v) for k, v in sections.items()}
    for dotted, value in overrides.items():
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        out.setdefault(section, {})[key] = str(value)
    return out


def load_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    sections = {}
    if path is not None:
        try:
            with open(path) as fh:
                sections = read_sections(fh.read(), str(path))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return build_config(apply_overrides(sections, overrides or {}))


def replace_section(cfg: ExperimentConfig, name: str, **changes) -> ExperimentConfig:
    return dataclasses.replace(cfg, **{name: dataclasses.replace(getattr(cfg, name), **changes)})
