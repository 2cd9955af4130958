"""
Training Configuration
TrainConfig with presets, key = value config files, environment overrides and validation.
"""
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, Optional

from dotenv import dotenv_values

from metrics import EvalConfig
from photometry import LossWeights

ENV_PREFIX = "NIGHTDEPTH_"
AGGREGATIONS = ("average", "min")
REFERENCE_SOURCES = ("render", "toy_net")

PRESETS: Dict[str, Dict[str, object]] = {
    "robotcar-night": {"sigma": 0.008, "epsilon": 10.0, "eta": 1e-3, "xi": 2.5e-4, "tau": 2.5e-4,
                       "max_depth": 40.0},
    "nuscenes-night": {"sigma": 0.004, "epsilon": 20.0, "eta": 1e-3, "xi": 4e-4, "tau": 4e-4,
                       "max_depth": 60.0},
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    """Unknown key, uncoercible value or violated constraint."""


@dataclass
class TrainConfig:
    # run
    height: int = 64
    width: int = 64
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    # loss weights
    alpha: float = 0.85
    eta: float = 1e-3
    xi: float = 2.5e-4
    tau: float = 2.5e-4
    # enhancement and masking
    sigma: float = 0.008
    epsilon: float = 10.0
    beta: float = 0.98
    levels: int = 256
    # optimizer schedule
    lr_base: float = 3e-5
    lr_target: float = 1e-4
    warmup_iters: int = 500
    halving_epoch: int = 15
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    # module toggles
    use_photometric: bool = True
    use_pbr: bool = True
    use_mcie: bool = True
    use_sbm: bool = True
    # variants
    aggregation: str = "average"
    smoothness_normalize: bool = True
    histogram_source: str = "snippet"
    stats_mode: str = "histogram"
    reference_source: str = "render"
    reference_epochs: int = 2
    # evaluation
    max_depth: float = 40.0
    min_depth: float = 1e-3
    val_fraction: float = 0.1
    # runtime
    max_iterations_per_epoch: int = 0
    progress: bool = True
    preset: str = ""

    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, eta=self.eta, xi=self.xi, tau=self.tau)

    def eval_config(self) -> EvalConfig:
        return EvalConfig(max_depth=self.max_depth, min_depth=self.min_depth)

    def validate(self) -> "TrainConfig":
        """Raise ConfigError on the first violated constraint."""
        checks = [
            (self.height > 0 and self.width > 0 and self.height % 16 == 0 and self.width % 16 == 0,
             f"resolution must be a positive multiple of 16, got {self.height}x{self.width}"),
            (self.epochs > 0, f"epochs must be positive, got {self.epochs}"),
            (self.batch_size > 0, f"batch_size must be positive, got {self.batch_size}"),
            (0.0 <= self.alpha <= 1.0, f"alpha must be in [0, 1], got {self.alpha}"),
            (min(self.eta, self.xi, self.tau) >= 0, "eta, xi and tau must be non-negative"),
            (self.sigma > 0, f"sigma must be positive, got {self.sigma}"),
            (0.0 <= self.epsilon <= 100.0, f"epsilon must be in [0, 100], got {self.epsilon}"),
            (0.0 <= self.beta < 1.0, f"beta must be in [0, 1), got {self.beta}"),
            (self.levels >= 2, f"levels must be at least 2, got {self.levels}"),
            (0 < self.lr_base and 0 < self.lr_target, "learning rates must be positive"),
            (self.warmup_iters >= 0, f"warmup_iters must be non-negative, got {self.warmup_iters}"),
            (0 < self.min_depth < self.max_depth,
             f"need 0 < min_depth < max_depth, got {self.min_depth}, {self.max_depth}"),
            (0.0 <= self.val_fraction < 1.0, f"val_fraction must be in [0, 1), got {self.val_fraction}"),
            (self.aggregation in AGGREGATIONS, f"aggregation must be one of {AGGREGATIONS}"),
            (self.histogram_source in ("snippet", "target"), "histogram_source must be snippet or target"),
            (self.stats_mode in ("histogram", "scalar"), "stats_mode must be histogram or scalar"),
            (self.reference_source in REFERENCE_SOURCES, f"reference_source must be one of {REFERENCE_SOURCES}"),
            (self.use_photometric or self.use_pbr,
             "use_photometric and use_pbr are both off: nothing to train"),
            (not self.preset or self.preset in PRESETS, f"unknown preset '{self.preset}'"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {str(value).lower() if isinstance(value, bool) else value}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_text())

    def with_overrides(self, overrides: Dict[str, object]) -> "TrainConfig":
        return replace(self, **coerce_overrides(overrides))

    @classmethod
    def load(cls, path=None, overrides: Optional[Dict[str, object]] = None,
             preset: Optional[str] = None, use_env: bool = True) -> "TrainConfig":
        """
        Build a config from every source, later ones winning.

        Args:
            path: Optional key = value file
            overrides: Values from the command line
            preset: Named preset (also settable as `preset` in any source)
            use_env: Read NIGHTDEPTH_<KEY> environment variables

        Returns:
            Validated TrainConfig
        """
        layers = []
        if path is not None:
            if not Path(path).exists():
                raise ConfigError(f"Config file not found: {path}")
            layers.append({k: v for k, v in dotenv_values(path).items() if v is not None})
        if use_env:
            env = {}
            for f in fields(cls):
                value = os.getenv(ENV_PREFIX + f.name.upper())
                if value is not None:
                    env[f.name] = value
            layers.append(env)
        layers.append({k: v for k, v in (overrides or {}).items() if v is not None})

        merged: Dict[str, object] = {}
        for layer in layers:
            merged.update(layer)
        chosen = preset or merged.get("preset") or ""
        if chosen and chosen not in PRESETS:
            raise ConfigError(f"Unknown preset '{chosen}', expected one of {sorted(PRESETS)}")

        values: Dict[str, object] = dict(PRESETS.get(chosen, {}))
        values.update(merged)
        values["preset"] = chosen
        return cls(**coerce_overrides(values)).validate()


def coerce_overrides(values: Dict[str, object]) -> Dict[str, object]:
    """Convert raw strings to each field's type; unknown keys are errors."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(f"Unknown config key '{key}'")
        out[key] = _coerce(key, types[key], raw)
    return out


def _coerce(key: str, kind, raw):
    if not isinstance(raw, str):
        if kind is float and isinstance(raw, (int, float)) and not isinstance(raw, bool):
            return float(raw)
        if isinstance(raw, kind):
            return raw
        raw = str(raw)
    text = raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"Config key '{key}' expects {kind.__name__}, got '{raw}'") from None
