"""Run configuration: typed sections, INI files and environment overrides.

Values are resolved with the precedence command-line flags > SEBCOMM_SEED
> INI file > defaults. The effective configuration is written next to every
run's outputs as ``run_config.ini`` so the run can be repeated.
"""

import configparser
import logging
import os
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from channel import ChannelSpec
from errors import ParameterError
from seb_pipeline import ModelConfig
from trainer import DEFAULT_LAMBDAS, DEFAULT_LR_SCHEDULE, LossConfig, TrainConfig

logger = logging.getLogger(__name__)

BASE_DATA_DIR = Path(os.getenv("SEBCOMM_DATA_DIR", Path(__file__).resolve().parent / "user-data"))
OUTPUT_DIR = BASE_DATA_DIR / "outputs"
CHECKPOINT_DIR = BASE_DATA_DIR / "checkpoints"
SEED_ENV = "SEBCOMM_SEED"
CONFIG_FILENAME = "run_config.ini"

LrSchedule = Tuple[Tuple[float, int], ...]


@dataclass
class PathsConfig:
    corpus: Path = BASE_DATA_DIR / "corpus"
    manifest: Path = OUTPUT_DIR / "subsets.json"
    checkpoint_dir: Path = CHECKPOINT_DIR
    output_dir: Path = OUTPUT_DIR


@dataclass
class LossSection:
    lambdas: Tuple[float, ...] = DEFAULT_LAMBDAS
    beta: float = 1.0


@dataclass
class ChannelSection:
    snr_db: Tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0)
    gain: complex = 1.0 + 0.0j

    def __post_init__(self):
        if self.gain == 0:
            raise ParameterError("channel gain must be non-zero")


@dataclass
class TrainingSection:
    seed: int = 0
    augment_count: int = 16
    crop_size: Tuple[int, int] = (256, 256)
    crop_scale: Tuple[float, float] = (0.5, 1.0)
    lr_schedule: LrSchedule = DEFAULT_LR_SCHEDULE
    max_steps: Optional[int] = None
    kmeans_iterations: int = 10
    num_workers: int = 0
    log_every: int = 50
    auto_split: bool = True


@dataclass
class EvalConfig:
    """Corpus splitting and sweep settings."""
    j_max: int = 8
    projector: str = "channel_mean"
    projector_source: str = ""
    cbr: float = 1.0 / 30.0
    msssim: bool = True


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossSection = field(default_factory=LossSection)
    channel: ChannelSection = field(default_factory=ChannelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def seed(self) -> int:
        return self.training.seed

    def loss_config(self, lam: float) -> LossConfig:
        return LossConfig(lam=lam, beta=self.loss.beta)

    def checkpoint_path(self, lam: float) -> Path:
        return Path(self.paths.checkpoint_dir) / f"seb_lambda{lam:g}.pt"

    def channel_spec(self, snr_db: float) -> ChannelSpec:
        """Link at ``snr_db`` with the configured gain and the run seed."""
        return ChannelSpec(snr_db=snr_db, gain=self.channel.gain, seed=self.seed)

    def train_config(self, lam: float) -> TrainConfig:
        t = self.training
        out = Path(self.paths.output_dir)
        return TrainConfig(
            seed=t.seed,
            augment_count=t.augment_count,
            crop_size=t.crop_size,
            crop_scale=t.crop_scale,
            lr_schedule=t.lr_schedule,
            max_steps=t.max_steps,
            kmeans_iterations=t.kmeans_iterations,
            log_path=out / f"train_lambda{lam:g}.jsonl",
            checkpoint_path=self.checkpoint_path(lam),
            snapshot_dir=out / "snapshots",
            num_workers=t.num_workers,
            log_every=t.log_every,
        )


SECTIONS = ("paths", "model", "loss", "channel", "training", "eval")


def _split_list(text: str):
    return [item.strip() for item in text.split(",") if item.strip()]


def _convert(hint, text: str) -> Any:
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if text.lower() in ("", "none"):
            return None
        return _convert(next(a for a in args if a is not type(None)), text)
    if hint == LrSchedule:
        stages = []
        for item in _split_list(text):
            lr, _, epochs = item.partition(":")
            stages.append((float(lr), int(epochs or 1)))
        return tuple(stages)
    if origin is tuple:
        items = _split_list(text)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], item) for item in items)
        if len(items) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_convert(a, item) for a, item in zip(args, items))
    if hint is bool:
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if hint is complex:
        return complex(text.replace(" ", ""))
    if hint is Path:
        return Path(text).expanduser()
    return hint(text)


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return ", ".join(f"{lr:g}:{epochs}" for lr, epochs in value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _apply(section_obj, name: str, values: Mapping[str, str], origin: str):
    hints = typing.get_type_hints(type(section_obj))
    known = {f.name for f in fields(section_obj)}
    updates = {}
    for key, text in values.items():
        if key not in known:
            raise ParameterError(f"{origin}: unknown key [{name}] {key}")
        try:
            updates[key] = _convert(hints[key], text)
        except (TypeError, ValueError) as err:
            raise ParameterError(f"{origin}: bad value for [{name}] {key}: {err}") from err
    current = {f.name: getattr(section_obj, f.name) for f in fields(section_obj)}
    current.update(updates)
    try:
        return type(section_obj)(**current)
    except ValueError as err:
        raise ParameterError(f"{origin}: invalid [{name}] section: {err}") from err


def load_run_config(path: Optional[Path] = None, overrides: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional INI file, the environment and flags.

    Args:
        path: INI file with any of the sections paths, model, loss,
            channel, training, eval.
        overrides: ``section.key`` → string value, from command-line flags.

    Raises:
        ParameterError: On a missing file, unknown section or key, or an
            unparsable value.
    """
    config = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path, encoding="utf-8"):
            raise ParameterError(f"config file not found: {path}")
        for name in parser.sections():
            if name not in SECTIONS:
                raise ParameterError(f"{path}: unknown section [{name}]")
            setattr(config, name, _apply(getattr(config, name), name, dict(parser[name]), str(path)))

    env_seed = os.getenv(SEED_ENV)
    if env_seed is not None:
        config.training = _apply(config.training, "training", {"seed": env_seed}, SEED_ENV)
        logger.info("Seed %s taken from %s", env_seed, SEED_ENV)

    grouped: Dict[str, Dict[str, str]] = {}
    for dotted, text in (overrides or {}).items():
        name, _, key = dotted.partition(".")
        if name not in SECTIONS or not key:
            raise ParameterError(f"override {dotted!r} must be section.key with a known section")
        grouped.setdefault(name, {})[key] = str(text)
    for name, values in grouped.items():
        setattr(config, name, _apply(getattr(config, name), name, values, "command line"))
    return config


def write_run_config(config: RunConfig, directory: Path) -> Path:
    """Echo the effective configuration into ``directory/run_config.ini``."""
    parser = configparser.ConfigParser()
    for name in SECTIONS:
        section = getattr(config, name)
        parser[name] = {f.name: _format(getattr(section, f.name)) for f in fields(section)}
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    target = directory / CONFIG_FILENAME
    with open(target, "w", encoding="utf-8") as f:
        parser.write(f)
    return target
