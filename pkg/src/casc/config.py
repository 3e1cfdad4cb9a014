"""Config file handling: INI sections [codec], [channel], [can], [ldm],
[train] mapped onto frozen dataclasses. Every default is overridable."""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields, replace

from casc.channel import ChannelConfig
from casc.codec import CodecConfig
from casc.errors import ConfigurationError

STAGE_DEFAULT_LR = {1: 4.5e-6, 2: 1e-6}
DEFAULT_EPOCHS = 500
DEFAULT_TRAIN_SNRS = "5,10,15,20"


@dataclass(frozen=True)
class CanSection:
    enabled: bool = True


@dataclass(frozen=True)
class LdmSection:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    base_width: int = 64

    def __post_init__(self):
        if self.timesteps < 1:
            raise ConfigurationError("timesteps must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    stage: int
    epochs: int = DEFAULT_EPOCHS
    lr_initial: float | None = None  # None -> stage default (4.5e-6 / 1e-6)
    batch_size: int = 16
    seed: int = 0
    snr_db_train: str = DEFAULT_TRAIN_SNRS
    # weight-generator heads train slower: their parameter count dwarfs the
    # denoiser's and adaptive-moment steps move zero-initialized heads at
    # full stride otherwise
    can_lr_scale: float = 0.05

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigurationError(f"training stage must be 1 or 2, got {self.stage}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")

    @property
    def lr(self) -> float:
        return STAGE_DEFAULT_LR[self.stage] if self.lr_initial is None else self.lr_initial

    def snr_values(self) -> tuple[float, ...]:
        if isinstance(self.snr_db_train, (int, float)):
            return (float(self.snr_db_train),)
        vals = tuple(float(v) for v in str(self.snr_db_train).split(",") if v.strip())
        if not vals:
            raise ConfigurationError(f"cannot parse training SNR grid {self.snr_db_train!r}")
        return vals


@dataclass(frozen=True)
class TrainSection:
    epochs: int = DEFAULT_EPOCHS
    lr_initial: float | None = None
    batch_size: int = 16
    seed: int = 0
    snr_db_train: str = DEFAULT_TRAIN_SNRS
    can_lr_scale: float = 0.05

    def for_stage(self, stage: int) -> TrainConfig:
        return TrainConfig(
            stage=stage,
            epochs=self.epochs,
            lr_initial=self.lr_initial,
            batch_size=self.batch_size,
            seed=self.seed,
            snr_db_train=self.snr_db_train,
            can_lr_scale=self.can_lr_scale,
        )


@dataclass(frozen=True)
class FullConfig:
    codec: CodecConfig = field(default_factory=CodecConfig)
    channel: ChannelConfig = field(default_factory=lambda: ChannelConfig(snr_db=20.0))
    can: CanSection = field(default_factory=CanSection)
    ldm: LdmSection = field(default_factory=LdmSection)
    train: TrainSection = field(default_factory=TrainSection)


_SECTIONS = ("codec", "channel", "can", "ldm", "train")
_TYPES = {"codec": CodecConfig, "channel": ChannelConfig, "can": CanSection, "ldm": LdmSection, "train": TrainSection}


def _coerce(raw: str, pytype):
    if pytype is bool or pytype == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"cannot parse boolean {raw!r}")
    return pytype(raw)


def _section_from_items(cls, items: dict[str, str]):
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    for key, raw in items.items():
        if key not in known:
            raise ConfigurationError(f"unknown option {key!r} for section [{cls.__name__}]")
        f = known[key]
        if key == "lr_initial":
            kwargs[key] = None if raw.strip().lower() in ("", "none", "default") else float(raw)
        elif f.type in ("bool", bool):
            kwargs[key] = _coerce(raw, bool)
        elif f.type in ("int", int):
            kwargs[key] = int(raw)
        elif f.type in ("float", float):
            kwargs[key] = float(raw)
        else:
            kwargs[key] = raw
    return cls(**kwargs)


def _new_parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep option case (the channel count is 'L')
    return parser


def load_config(path) -> FullConfig:
    parser = _new_parser()
    with open(path, "r", encoding="utf-8") as fh:
        parser.read_file(fh)
    return parse_config(parser)


def loads_config(text: str) -> FullConfig:
    parser = _new_parser()
    parser.read_file(io.StringIO(text))
    return parse_config(parser)


def parse_config(parser: configparser.ConfigParser) -> FullConfig:
    for sec in parser.sections():
        if sec not in _SECTIONS:
            raise ConfigurationError(f"unknown config section [{sec}]")
    kwargs = {}
    for sec in _SECTIONS:
        if parser.has_section(sec):
            kwargs[sec] = _section_from_items(_TYPES[sec], dict(parser.items(sec)))
    return FullConfig(**kwargs)


def config_to_dict(cfg: FullConfig) -> dict:
    return {sec: asdict(getattr(cfg, sec)) for sec in _SECTIONS}


def config_from_dict(d: dict) -> FullConfig:
    kwargs = {}
    for sec in _SECTIONS:
        if sec in d:
            kwargs[sec] = _TYPES[sec](**d[sec])
    return FullConfig(**kwargs)


def dump_config(cfg: FullConfig) -> str:
    parser = _new_parser()
    for sec in _SECTIONS:
        parser.add_section(sec)
        for key, val in asdict(getattr(cfg, sec)).items():
            parser.set(sec, key, "" if val is None else str(val))
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def with_overrides(cfg: FullConfig, **section_overrides) -> FullConfig:
    """Shallow-replace named sections, e.g. with_overrides(cfg, channel=new_channel)."""
    return replace(cfg, **section_overrides)
