"""Flat ``key=value`` run configuration.

Resolution order, strongest first: explicit overrides (CLI flags), environment
variables named ``GMGE_<KEY>`` (upper case), the config file, the defaults
below. Blank lines and ``#`` comments are ignored in files.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Callable

from .ctprep import PrepConfig
from .densenet3d import ConfigError, DenseBlockConfig, ModelConfig
from .pipeline.train import TrainConfig

ENV_PREFIX = "GMGE_"


class ConfigValidationError(ValueError):
    pass


def _triple(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ValueError(f"expected WxHxD, got {text!r}")
    return tuple(int(p) for p in parts)


def _blocks(text: str) -> tuple[DenseBlockConfig, ...]:
    out = []
    for item in text.split(","):
        n, k = item.split(":")
        out.append(DenseBlockConfig(int(n), int(k)))
    return tuple(out)


def _transitions(text: str) -> tuple[bool, ...] | None:
    if text == "auto":
        return None
    flags = text.split(",")
    if any(f not in ("0", "1") for f in flags):
        raise ValueError(f"expected 'auto' or comma-separated 0/1 flags, got {text!r}")
    return tuple(f == "1" for f in flags)


@dataclass(frozen=True)
class Key:
    name: str
    kind: type
    doc: str
    check: Callable[[object], bool] | None = None
    parse: Callable[[str], object] | None = None  # extra validation of string-typed keys


def _pos(v) -> bool:
    return v > 0


def _nonneg(v) -> bool:
    return v >= 0


def _unit(v) -> bool:
    return 0 < v < 1


KEYS: tuple[Key, ...] = (
    Key("manifest", str, "manifest CSV (relative paths resolve against the config file)"),
    Key("run_dir", str, "output directory for all artifacts"),
    Key("seed", int, "master seed for splits, initialisation and shuffling", _nonneg),
    Key("workers", int, "worker processes for cross-validation folds", _pos),
    Key("hu_lo", float, "lower end of the HU window"),
    Key("hu_hi", float, "upper end of the HU window"),
    Key("spacing_mm", float, "isotropic resampling target", _pos),
    Key("slab_margin_mm", float, "margin added above the nose and below the acromion", _nonneg),
    Key("grid", str, "preprocessed grid WxHxD", parse=_triple),
    Key("voi", str, "VOI extent WxHxD", parse=_triple),
    Key("blocks", str, "dense blocks as layers:growth, comma separated", parse=_blocks),
    Key("initial_channels", int, "stem output channels", _pos),
    Key("stem_stride", int, "stride of the stem convolution", _pos),
    Key("extractor_transitions", str, "transition after each block: auto or 0/1 flags", parse=_transitions),
    Key("classifier_transitions", str, "transition after each block: auto or 0/1 flags", parse=_transitions),
    Key("extractor_epochs", int, "extractor training epochs", _nonneg),
    Key("classifier_epochs", int, "classifier training epochs per fold", _nonneg),
    Key("batch_size", int, "classifier mini-batch size", _pos),
    Key("extractor_batch_size", int, "extractor mini-batch size", _pos),
    Key("rho", float, "Adadelta decay", _unit),
    Key("eps", float, "Adadelta epsilon", _pos),
    Key("lr", float, "multiplier on the Adadelta step", _pos),
    Key("extractor_n", int, "patients reserved for the extractor", _pos),
    Key("extractor_val_frac", float, "share of the extractor set held out for validation", _unit),
    Key("test_frac", float, "share of the remaining patients used as test set", _unit),
    Key("folds", int, "cross-validation folds over the train portion"),
    Key("cam_threshold", float, "heat fraction of the maximum that enters the VOI centroid", _unit),
    Key("signal_floor", float, "minimum heatmap maximum; below it extraction fails", _nonneg),
    Key("intensity_floor", float, "normalised intensity that separates body from air", _nonneg),
    Key("heatmap_stride", int, "slice stride of the PGM heatmap export", _pos),
    Key("decision_threshold", float, "probability threshold for confusion metrics", _unit),
    Key("alpha", float, "significance level of the paired t-test"),
    Key("phantom_per_class", int, "synth: phantoms per class", _pos),
)
KEY_INDEX = {k.name: k for k in KEYS}


@dataclass(frozen=True)
class RunConfig:
    manifest: str = ""
    run_dir: str = "run"
    seed: int = 0
    workers: int = 1
    hu_lo: float = -400.0
    hu_hi: float = 400.0
    spacing_mm: float = 1.0
    slab_margin_mm: float = 30.0
    grid: str = "150x150x90"
    voi: str = "90x90x25"
    blocks: str = "4:12,4:12,4:12,4:12,4:12"
    initial_channels: int = 16
    stem_stride: int = 2
    extractor_transitions: str = "auto"
    classifier_transitions: str = "auto"
    extractor_epochs: int = 30
    classifier_epochs: int = 20
    batch_size: int = 8
    extractor_batch_size: int = 8
    rho: float = 0.95
    eps: float = 1e-6
    lr: float = 1.0
    extractor_n: int = 30
    extractor_val_frac: float = 0.2
    test_frac: float = 0.2
    folds: int = 5
    cam_threshold: float = 0.6
    signal_floor: float = 0.05
    intensity_floor: float = 0.05
    heatmap_stride: int = 10
    decision_threshold: float = 0.5
    alpha: float = 0.05
    phantom_per_class: int = 100

    def __post_init__(self):
        for key in KEYS:
            value = getattr(self, key.name)
            if key.check is not None and not key.check(value):
                raise ConfigValidationError(f"{key.name}={value!r} is out of range ({key.doc})")
            if key.parse is not None:
                try:
                    key.parse(value)
                except (ValueError, ConfigError) as exc:
                    raise ConfigValidationError(f"{key.name}={value!r}: {exc}") from None
        if self.hu_lo >= self.hu_hi:
            raise ConfigValidationError(f"hu_lo={self.hu_lo} must be below hu_hi={self.hu_hi}")
        if self.folds < 2:
            raise ConfigValidationError(f"folds={self.folds} must be at least 2")
        if self.alpha not in (0.10, 0.05, 0.01):
            raise ConfigValidationError(f"alpha={self.alpha} must be one of 0.1, 0.05, 0.01")
        for name in ("extractor_transitions", "classifier_transitions"):
            flags = _transitions(getattr(self, name))
            if flags is not None and len(flags) != len(_blocks(self.blocks)):
                raise ConfigValidationError(f"{name} needs one flag per block")

    # ---------------------------------------------------------------- loading

    @staticmethod
    def parse_value(name: str, text: str, source: str = "") -> object:
        key = KEY_INDEX.get(name)
        where = f" ({source})" if source else ""
        if key is None:
            raise ConfigValidationError(f"unknown config key {name!r}{where}")
        try:
            return key.kind(text.strip())
        except ValueError:
            raise ConfigValidationError(f"{name} expects {key.kind.__name__}, got {text!r}{where}") from None

    @staticmethod
    def read_file(path) -> dict[str, object]:
        path = Path(path)
        values: dict[str, object] = {}
        for no, line in enumerate(path.read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigValidationError(f"{path}:{no}: expected key=value, got {line!r}")
            name, text = (s.strip() for s in line.split("=", 1))
            values[name] = RunConfig.parse_value(name, text, f"{path}:{no}")
        if values.get("manifest"):
            m = Path(str(values["manifest"]))
            if not m.is_absolute():
                values["manifest"] = str(path.parent / m)
        return values

    @classmethod
    def resolve(cls, path=None, env=None, overrides: dict | None = None) -> "RunConfig":
        values: dict[str, object] = {}
        if path is not None:
            values.update(cls.read_file(path))
        env = os.environ if env is None else env
        for name, text in env.items():
            if name.startswith(ENV_PREFIX):
                key = name[len(ENV_PREFIX):].lower()
                values[key] = cls.parse_value(key, text, f"environment {name}")
        for name, value in (overrides or {}).items():
            if value is None:
                continue
            values[name] = cls.parse_value(name, str(value), "command line") if isinstance(value, str) else value
        return cls(**values)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!s}\n" for f in fields(self))

    def with_values(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    # ---------------------------------------------------------------- derived settings

    @property
    def grid_whd(self) -> tuple[int, int, int]:
        return _triple(self.grid)

    @property
    def voi_whd(self) -> tuple[int, int, int]:
        return _triple(self.voi)

    def prep_config(self) -> PrepConfig:
        return PrepConfig(self.hu_lo, self.hu_hi, self.spacing_mm, self.slab_margin_mm, self.grid_whd)

    def model_config(self, role: str, extent_whd, seed: int) -> ModelConfig:
        """DenseNet for ``role`` ('extractor' or 'classifier') on a single-channel WxHxD input."""
        w, h, d = extent_whd
        flags = _transitions(self.extractor_transitions if role == "extractor" else self.classifier_transitions)
        return ModelConfig(
            input_shape=(1, d, h, w),
            blocks=_blocks(self.blocks),
            initial_channels=self.initial_channels,
            transitions=flags,
            stem_stride=self.stem_stride,
            seed=seed,
        )

    def train_config(self, role: str, seed: int) -> TrainConfig:
        if role == "extractor":
            epochs, batch = self.extractor_epochs, self.extractor_batch_size
        else:
            epochs, batch = self.classifier_epochs, self.batch_size
        return TrainConfig(epochs=epochs, batch_size=batch, rho=self.rho, eps=self.eps, lr=self.lr, seed=seed)


def phantom_run_config(manifest: str = "manifest.csv") -> RunConfig:
    """Desk-scale settings matched to the default phantom (32^3 grid, 16^3 VOI)."""
    return RunConfig(
        manifest=manifest,
        slab_margin_mm=6.0,
        grid="32x32x32",
        voi="16x16x16",
        blocks="2:4,2:4",
        initial_channels=8,
        stem_stride=2,
        extractor_transitions="0,0",
        classifier_transitions="auto",
        extractor_n=60,
        extractor_epochs=30,
        classifier_epochs=8,
        extractor_batch_size=4,
    )
