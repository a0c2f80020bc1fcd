"""JSON run configuration with strict key checking.

Every section is optional; omitted keys take their defaults. Unknown keys,
wrong types and out-of-range values raise :class:`ConfigError`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, List, Optional

from .losses import DIST_MODES, RECON_VARIANTS
from .networks import NetworkConfig
from .optim import OptimizerConfig
from .pipeline import STAGE_ORDER, StageConfig, TrainSettings, stage_preset


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    root: Optional[str] = None
    width: int = 64
    height: int = 32
    count: int = 200
    seed: int = 0
    fb: Optional[float] = None


@dataclass(frozen=True)
class NetworkSection:
    base_channels: int = 8
    levels: int = 4
    d_max_fraction: float = 0.3
    init_disparity_fraction: float = 0.04
    seed: int = 0


@dataclass(frozen=True)
class OptimizerSection:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 2e-5


@dataclass(frozen=True)
class StageOverride:
    name: str
    epochs: Optional[int] = None
    steps_per_epoch: Optional[int] = None


@dataclass(frozen=True)
class ScheduleSection:
    stages: tuple = ()
    scale_factor: float = 1.0
    steps_per_epoch: Optional[int] = None
    batch_size: int = 8
    augment: bool = True
    seed: int = 0


@dataclass(frozen=True)
class LossSection:
    alpha: float = 0.85
    recon_variant: str = "upsample_full"
    dist_mode: str = "disparity"
    lambda_s: Optional[float] = None
    lambda_b: Optional[float] = None
    lambda_t: Optional[float] = None
    lambda_dist: Optional[float] = None


@dataclass(frozen=True)
class EvalSection:
    cap_meters: float = 80.0
    min_disp: float = 0.01
    batch_size: int = 8


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    loss: LossSection = field(default_factory=LossSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- conversions to the library's own config types ---------------------------

    def network_config(self) -> NetworkConfig:
        n = self.network
        return NetworkConfig(base_channels=n.base_channels, num_encoder_levels=n.levels,
                             d_max_fraction=n.d_max_fraction,
                             init_disparity_fraction=n.init_disparity_fraction, seed=n.seed)

    def optimizer_config(self) -> OptimizerConfig:
        o = self.optimizer
        return OptimizerConfig(learning_rate=o.lr, beta1=o.beta1, beta2=o.beta2, epsilon=o.eps,
                               weight_decay=o.weight_decay)

    def train_settings(self) -> TrainSettings:
        s = self.schedule
        return TrainSettings(batch_size=s.batch_size, seed=s.seed, augment=s.augment,
                             scale_factor=s.scale_factor, steps_per_epoch=s.steps_per_epoch)

    def stages(self) -> List[StageConfig]:
        """The five presets with the loss and schedule overrides applied.

        A ``lambda_s``/``lambda_b``/``lambda_t`` override only touches stages
        whose preset weight is non-zero, so it cannot switch on a branch a
        stage does not train; ``lambda_dist`` applies wherever distillation is
        active.
        """
        lo = self.loss
        overrides = {o.name: o for o in self.schedule.stages}
        out = []
        for name in STAGE_ORDER:
            st = stage_preset(name, dist_mode=lo.dist_mode, recon_variant=lo.recon_variant, alpha=lo.alpha)
            w = st.weights
            changes = {}
            for key in ("lambda_s", "lambda_b", "lambda_t"):
                val = getattr(lo, key)
                if val is not None and getattr(w, key) > 0:
                    changes[key] = val
            if lo.lambda_dist is not None and w.dist_mode != "none":
                changes["lambda_dist"] = lo.lambda_dist
            st = replace(st, weights=replace(w, **changes))
            o = overrides.get(name)
            if o is not None:
                if o.epochs is not None:
                    st = replace(st, epochs=o.epochs)
                if o.steps_per_epoch is not None:
                    st = replace(st, steps_per_epoch=o.steps_per_epoch)
            out.append(st)
        return out

    def to_dict(self) -> dict:
        def conv(obj):
            if hasattr(obj, "__dataclass_fields__"):
                return {f.name: conv(getattr(obj, f.name)) for f in fields(obj)}
            if isinstance(obj, (list, tuple)):
                return [conv(x) for x in obj]
            return obj
        return conv(self)


# -- parsing ------------------------------------------------------------------------

_NUMBER = (int, float)


def _check_type(section: str, key: str, value: Any, annotation: str):
    where = f"{section}.{key}"
    optional = "Optional" in annotation
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{where}: null is not allowed")
    base = annotation.replace("Optional[", "").rstrip("]")
    if base == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    elif base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif base == "float":
        if isinstance(value, bool) or not isinstance(value, _NUMBER):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        value = float(value)
    elif base == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def _build(cls, section: str, raw: Any):
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected an object, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {unknown}; allowed: {sorted(known)}")
    kwargs = {}
    for key, value in raw.items():
        f = known[key]
        if key == "stages":
            if not isinstance(value, list):
                raise ConfigError(f"{section}.stages: expected a list")
            kwargs[key] = tuple(_build(StageOverride, f"{section}.stages[{i}]", v) for i, v in enumerate(value))
        else:
            kwargs[key] = _check_type(section, key, value, str(f.type))
    return cls(**kwargs)


_SECTIONS = {"data": DataSection, "network": NetworkSection, "optimizer": OptimizerSection,
             "schedule": ScheduleSection, "loss": LossSection, "eval": EvalSection}


def _validate(cfg: RunConfig) -> None:
    d, n, s, lo, e = cfg.data, cfg.network, cfg.schedule, cfg.loss, cfg.eval
    checks = [
        (d.width > 0 and d.height > 0, "data.width and data.height must be positive"),
        (d.count >= 2, "data.count must be >= 2"),
        (d.fb is None or d.fb > 0, "data.fb must be positive"),
        (s.batch_size >= 1, "schedule.batch_size must be >= 1"),
        (s.scale_factor >= 0, "schedule.scale_factor must be >= 0"),
        (s.steps_per_epoch is None or s.steps_per_epoch >= 1, "schedule.steps_per_epoch must be >= 1"),
        (lo.dist_mode in DIST_MODES, f"loss.dist_mode must be one of {list(DIST_MODES)}"),
        (lo.recon_variant in RECON_VARIANTS, f"loss.recon_variant must be one of {list(RECON_VARIANTS)}"),
        (e.cap_meters > 0, "eval.cap_meters must be positive"),
        (e.min_disp > 0, "eval.min_disp must be positive"),
        (e.batch_size >= 1, "eval.batch_size must be >= 1"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
    seen = set()
    for o in s.stages:
        if o.name not in STAGE_ORDER:
            raise ConfigError(f"schedule.stages: unknown stage {o.name!r}; expected one of {list(STAGE_ORDER)}")
        if o.name in seen:
            raise ConfigError(f"schedule.stages: stage {o.name!r} listed twice")
        seen.add(o.name)
        if o.epochs is not None and o.epochs < 0:
            raise ConfigError(f"schedule.stages[{o.name}].epochs must be >= 0")
        if o.steps_per_epoch is not None and o.steps_per_epoch < 1:
            raise ConfigError(f"schedule.stages[{o.name}].steps_per_epoch must be >= 1")
    try:
        cfg.network_config()
        cfg.optimizer_config()
        cfg.stages()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    div = 2 ** n.levels
    if d.width % div or d.height % div:
        raise ConfigError(f"data size {d.width}x{d.height} must be divisible by 2**network.levels = {div}")


def config_from_dict(raw: Any) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}; allowed: {sorted(_SECTIONS)}")
    cfg = RunConfig(**{name: _build(cls, name, raw[name]) for name, cls in _SECTIONS.items() if name in raw})
    _validate(cfg)
    return cfg


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return config_from_dict(raw)


def load_config(path: Optional[str]) -> RunConfig:
    """Read a config file; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))

