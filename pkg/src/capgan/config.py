"""Run configuration: nested dataclasses with strict dict/JSON round-tripping."""

import dataclasses
import hashlib
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .content_encoder import EncoderConfig
from .errors import CapganError, ConfigError
from .freqsel import DEFAULT_LUMA, FilterSpec
from .synthesis import SynthesisConfig

SCHEMA_VERSION = 1


@dataclass
class EncoderSettings:
    depths: List[int] = field(default_factory=lambda: [128, 256, 512, 512])
    bn_momentum: float = 0.9


@dataclass
class Phase1Config:
    lr: float = 0.0002
    betas: Tuple[float, float] = (0.0, 0.99)
    batch_size: int = 16
    r1_lambda: float = 5.0
    # 1 = regularize every D step; >1 = lazy R1 with the penalty scaled by the interval
    r1_interval: int = 1
    ema_decay: float = 0.999
    ema_interval: int = 10
    mix_prob: float = 0.9
    w_avg_decay: float = 0.995
    total_steps: int = 10000
    seed: Optional[int] = None
    log_interval: int = 10
    sample_interval: int = 1000
    snapshot_steps: List[int] = field(default_factory=list)


@dataclass
class Phase2Config:
    lr: float = 0.0001
    betas: Tuple[float, float] = (0.9, 0.999)
    batch_size: int = 16
    epochs: int = 50
    pool_size: int = 2048
    holdout_size: int = 256
    filter: FilterSpec = field(default_factory=lambda: FilterSpec("low", 5))
    luma: Tuple[float, float, float] = DEFAULT_LUMA
    use_ema: bool = True
    seed: Optional[int] = None


@dataclass
class DatasetSpec:
    source: str = "synthetic"
    path: Optional[str] = None
    count: int = 5000
    seed: int = 0
    image_size: int = 32


@dataclass
class MetricsConfig:
    extractor: str = "pixel-pca-64"
    n_real: int = 2000
    n_fake: int = 2000
    k: int = 3
    content_pairs: int = 500
    psi: float = 1.0


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase2: Phase2Config = field(default_factory=Phase2Config)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def __post_init__(self):
        if self.phase1.seed is None:
            self.phase1.seed = self.seed + 1
        if self.phase2.seed is None:
            self.phase2.seed = self.seed + 2

    def encoder_config(self, depths: Optional[List[int]] = None) -> EncoderConfig:
        return EncoderConfig(depths=list(depths or self.encoder.depths), d_style=self.synthesis.d_style,
                             in_size=self.synthesis.image_size // 2, bn_momentum=self.encoder.bn_momentum)

    # ------------------------------------------------------------------ presets

    @classmethod
    def desk(cls, seed: int = 0) -> "RunConfig":
        """32-px synthetic-shapes experiment sized for a single CPU core."""
        cfg = cls(
            seed=seed,
            # at 32 px the shape outline is decided in the 16x16 layers, so they count as coarse
            synthesis=SynthesisConfig(image_size=32, d_z=128, d_style=128, style_split_resolution=16,
                                      channels={4: 128, 8: 128, 16: 64, 32: 32}, mapping_depth=4),
            phase1=Phase1Config(total_steps=10000, batch_size=16, lr=0.002, ema_decay=0.99, snapshot_steps=[500]),
            phase2=Phase2Config(epochs=20, batch_size=16, pool_size=2048, filter=FilterSpec("low", 5)),
            data=DatasetSpec(source="synthetic", count=5000, seed=seed, image_size=32),
        )
        cfg.validate()
        return cfg

    @classmethod
    def toy(cls, seed: int = 0) -> "RunConfig":
        """Seconds-scale configuration for tests."""
        cfg = cls(
            seed=seed,
            synthesis=SynthesisConfig(image_size=16, d_z=16, d_style=16,
                                      channels={4: 16, 8: 16, 16: 8}, mapping_depth=2),
            encoder=EncoderSettings(depths=[8, 8, 16]),
            phase1=Phase1Config(total_steps=20, batch_size=4, ema_interval=2, ema_decay=0.9,
                                log_interval=5, sample_interval=0),
            phase2=Phase2Config(epochs=2, batch_size=8, pool_size=32, holdout_size=16, filter=FilterSpec("low", 2)),
            data=DatasetSpec(source="synthetic", count=64, seed=seed, image_size=16),
            metrics=MetricsConfig(extractor="pixel-pca-8", n_real=48, n_fake=48, k=3, content_pairs=24),
        )
        cfg.validate()
        return cfg

    # ------------------------------------------------------------------ validation

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} is not supported (expected {SCHEMA_VERSION})")
        self.synthesis.validate()
        self.encoder_config()  # raises on a depth/size mismatch
        p1, p2 = self.phase1, self.phase2
        _check(p1.lr > 0, "phase1.lr must be > 0")
        _check(p2.lr > 0, "phase2.lr must be > 0")
        for name, betas in (("phase1.betas", p1.betas), ("phase2.betas", p2.betas)):
            _check(len(betas) == 2 and all(0.0 <= b < 1.0 for b in betas), f"{name} must be two values in [0, 1)")
        _check(p1.r1_lambda >= 0, "phase1.r1_lambda must be >= 0")
        _check(p1.r1_interval >= 1, "phase1.r1_interval must be >= 1")
        _check(0.0 <= p1.mix_prob <= 1.0, "phase1.mix_prob must lie in [0, 1]")
        _check(0.0 <= p1.ema_decay <= 1.0, "phase1.ema_decay must lie in [0, 1]")
        _check(p1.ema_interval >= 1, "phase1.ema_interval must be >= 1")
        _check(0.0 <= p1.w_avg_decay < 1.0, "phase1.w_avg_decay must lie in [0, 1)")
        _check(p1.total_steps >= 0, "phase1.total_steps must be >= 0")
        _check(p1.batch_size >= 1 and p2.batch_size >= 1, "batch sizes must be >= 1")
        _check(p1.log_interval >= 1, "phase1.log_interval must be >= 1")
        _check(p1.sample_interval >= 0, "phase1.sample_interval must be >= 0")
        _check(p2.epochs >= 1, "phase2.epochs must be >= 1")
        _check(p2.pool_size >= p2.batch_size, "phase2.pool_size must be >= phase2.batch_size")
        _check(p2.holdout_size >= 1, "phase2.holdout_size must be >= 1")
        _check(abs(sum(p2.luma) - 1.0) <= 1e-6 and min(p2.luma) >= 0, "phase2.luma must be nonnegative and sum to 1")
        try:
            p2.filter.validate_for((self.synthesis.image_size // 2,) * 2)
        except CapganError as exc:
            raise ConfigError(f"phase2.filter: {exc}") from None
        d = self.data
        _check(d.source in ("synthetic", "folder"), "data.source must be 'synthetic' or 'folder'")
        _check(d.source != "folder" or d.path, "data.path is required for folder datasets")
        _check(d.count >= 1, "data.count must be >= 1")
        _check(d.image_size == self.synthesis.image_size,
               f"data.image_size ({d.image_size}) must match synthesis.image_size ({self.synthesis.image_size})")
        m = self.metrics
        _check(m.k >= 1 and m.n_real > m.k, "metrics.k must be >= 1 and < metrics.n_real")
        _check(m.n_fake >= 1 and m.content_pairs >= 1, "metrics sample counts must be >= 1")
        _check(0.0 <= m.psi <= 1.0, "metrics.psi must lie in [0, 1]")
        _check(m.extractor.startswith("pixel-pca-"), "metrics.extractor must be 'pixel-pca-<dims>'")

    # ------------------------------------------------------------------ (de)serialization

    def to_dict(self) -> Dict[str, Any]:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        try:
            cfg = _from_plain(cls, data, "")
        except ConfigError:
            raise
        except (CapganError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def load(cls, path) -> "RunConfig":
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, assignments: List[str]) -> "RunConfig":
        """Apply ``dotted.path=value`` overrides; values are parsed as JSON when possible."""
        data = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} must look like key.path=value")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = data
            parts = key.split(".")
            for part in parts[:-1]:
                if not isinstance(node, dict) or part not in node:
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[part]
            if not isinstance(node, dict) or parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(data)


def _check(ok: bool, message: str) -> None:
    if not ok:
        raise ConfigError(message)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _from_plain(tp, value, path):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path or 'config'} must be a mapping")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        unknown = sorted(set(value) - names)
        if unknown:
            where = path or "top level"
            raise ConfigError(f"unknown config key(s) {unknown} at {where}; allowed: {sorted(names)}")
        kwargs = {k: _from_plain(hints[k], v, f"{path}.{k}" if path else k) for k, v in value.items()}
        return tp(**kwargs)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _from_plain(args[0], value, path)
    if origin in (list, List):
        (inner,) = typing.get_args(tp)
        _expect(isinstance(value, list), path, "a list")
        return [_from_plain(inner, v, path) for v in value]
    if origin in (tuple, Tuple):
        args = typing.get_args(tp)
        _expect(isinstance(value, (list, tuple)) and len(value) == len(args), path, f"a list of {len(args)} values")
        return tuple(_from_plain(a, v, path) for a, v in zip(args, value))
    if origin in (dict, Dict):
        kt, vt = typing.get_args(tp)
        _expect(isinstance(value, dict), path, "a mapping")
        return {_from_plain(kt, k, path): _from_plain(vt, v, path) for k, v in value.items()}
    if tp is bool:
        _expect(isinstance(value, bool), path, "true or false")
        return value
    if tp is int:
        if isinstance(value, str):
            value = int(value)
        _expect(isinstance(value, int) and not isinstance(value, bool), path, "an integer")
        return value
    if tp is float:
        _expect(isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value),
                path, "a finite number")
        return float(value)
    if tp is str:
        _expect(isinstance(value, str), path, "a string")
        return value
    return value


def _expect(ok, path, what):
    if not ok:
        raise ConfigError(f"{path} must be {what}")
