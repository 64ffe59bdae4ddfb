"""
Configuration Module - Model/training configuration, presets and JSON loading
"""
import dataclasses
import json
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

from dcgct import (
    NUM_JOINTS, DEFAULT_EPOCHS, DEFAULT_BATCH_SIZE, LR_SINGLE_FRAME, LR_SEQUENCE,
    PER_EPOCH_DECAY, FIVE_EPOCH_DECAY, ConfigError,
)

log = logging.getLogger("dcgct.config")

VARIANTS = (
    "double_chain",     # full model: L2G + G2L chains with FIM
    "double_no_fim",    # L2G + G2L chains, no feature interaction
    "parallel_double",  # LCM on the C1 split, GCM on the C2 split
    "l2g_single",       # LCM -> GCM on all C channels
    "g2l_single",       # GCM -> LCM on all C channels
    "lcm_only",
    "gcm_only",
)
DOUBLE_VARIANTS = ("double_chain", "double_no_fim", "parallel_double")


@dataclass
class ModelConfig:
    joints: int = NUM_JOINTS
    layers: int = 3
    channels: int = 160
    c1: int = 32
    c2: int = 128
    heads: int = 8
    mlp_expansion: int = 4
    fim_reduction: int = 2
    lcm_expansion: int = 2
    frames: int = 1
    seq_dim: int = 1024
    variant: str = "double_chain"
    dropout: float = 0.0
    ln_eps: float = 1e-5
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    @property
    def is_sequence(self) -> bool:
        return self.frames > 1

    @property
    def chain_dims(self) -> Tuple[int, int]:
        return self.c1, self.c2

    def validate(self) -> "ModelConfig":
        """Raise ConfigError on any violated invariant; returns self"""
        for name in ("joints", "layers", "channels", "heads", "mlp_expansion",
                     "fim_reduction", "lcm_expansion", "frames", "seq_dim"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.frames % 2 == 0:
            raise ConfigError(f"frames must be odd, got {self.frames}")
        if self.variant in DOUBLE_VARIANTS:
            if self.c1 < 1 or self.c2 < 1 or self.c1 + self.c2 != self.channels:
                raise ConfigError(f"c1 + c2 must equal channels ({self.c1} + {self.c2} != {self.channels})")
            if self.c1 % self.heads or self.c2 % self.heads:
                raise ConfigError(f"heads ({self.heads}) must divide c1 ({self.c1}) and c2 ({self.c2})")
        elif self.channels % self.heads:
            raise ConfigError(f"heads ({self.heads}) must divide channels ({self.channels})")
        if self.variant == "double_chain" and self.channels % self.fim_reduction:
            raise ConfigError(f"fim_reduction ({self.fim_reduction}) must divide channels ({self.channels})")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.ln_eps <= 0 or self.bn_eps <= 0:
            raise ConfigError("normalization eps must be > 0")
        if not 0.0 < self.bn_momentum <= 1.0:
            raise ConfigError(f"bn_momentum must be in (0, 1], got {self.bn_momentum}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        return _from_dict(cls, data).validate()


@dataclass
class TrainConfig:
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    lr0: Optional[float] = None   # None: default for the input arity
    per_epoch_decay: float = PER_EPOCH_DECAY
    five_epoch_decay: float = FIVE_EPOCH_DECAY
    joint_weights: Optional[List[float]] = None
    weights_profile: Optional[str] = None
    flip_augment: bool = True
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    determinism: bool = True   # False with DCGCT_THREADS > 1: batches consumed as prepared
    queue_size: int = 4

    def resolved_lr0(self, frames: int) -> float:
        if self.lr0 is not None:
            return self.lr0
        return LR_SEQUENCE if frames > 1 else LR_SINGLE_FRAME

    def resolved_weights(self, joints: int) -> List[float]:
        """Joint weights θ: explicit list, then profile file, then all ones"""
        if self.joint_weights is not None:
            weights = list(self.joint_weights)
        elif self.weights_profile:
            weights = load_joint_weights(self.weights_profile)
        else:
            weights = [1.0] * joints
        if len(weights) != joints:
            raise ConfigError(f"joint_weights has {len(weights)} entries, expected {joints}")
        if any(w <= 0 for w in weights):
            raise ConfigError("joint_weights must all be > 0")
        return weights

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr0 is not None and self.lr0 <= 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        for name in ("per_epoch_decay", "five_epoch_decay"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1], got {value}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("beta1/beta2 must be in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be > 0")
        if self.queue_size < 1:
            raise ConfigError("queue_size must be >= 1")
        if self.joint_weights is not None and any(w <= 0 for w in self.joint_weights):
            raise ConfigError("joint_weights must all be > 0")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        return _from_dict(cls, data).validate()


def _from_dict(cls, data: Dict[str, Any]):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"bad {cls.__name__}: {e}")


# Named presets; values override ModelConfig defaults
MODEL_PRESETS: Dict[str, Dict[str, Any]] = {
    "paper": {},
    "layers1": {"layers": 1},
    "layers2": {"layers": 2},
    "layers4": {"layers": 4},
    "channels80": {"channels": 80, "c1": 16, "c2": 64},
    "channels200": {"channels": 200, "c1": 40, "c2": 160},
    "channels320": {"channels": 320, "c1": 64, "c2": 256},
    "ratio1_1": {"c1": 80, "c2": 80},
    "ratio1_3": {"c1": 40, "c2": 120},
    "ratio3_1": {"c1": 120, "c2": 40},
    "ratio4_1": {"c1": 128, "c2": 32},
    "ratio1_5": {"channels": 192, "c1": 32, "c2": 160},
    "ratio5_1": {"channels": 192, "c1": 160, "c2": 32},
    "lcm_only": {"variant": "lcm_only"},
    "gcm_only": {"variant": "gcm_only"},
    "l2g_single": {"variant": "l2g_single"},
    "g2l_single": {"variant": "g2l_single"},
    "parallel_double": {"variant": "parallel_double", "c1": 80, "c2": 80},
    "double_no_fim": {"variant": "double_no_fim", "c1": 80, "c2": 80},
    "double_fim_1_1": {"c1": 80, "c2": 80},
    "frames9": {"frames": 9},
    "frames27": {"frames": 27},
    "frames81": {"frames": 81, "layers": 4},
    "frames243": {"frames": 243, "layers": 4},
    "tiny": {"joints": 17, "layers": 1, "channels": 16, "c1": 8, "c2": 8, "heads": 2, "seq_dim": 16},
}


def model_preset(name: str, **overrides) -> ModelConfig:
    """
    Build a ModelConfig from a named preset

    Args:
        name: Preset name (see MODEL_PRESETS)
        overrides: Field overrides applied on top of the preset

    Returns:
        Validated ModelConfig
    """
    if name not in MODEL_PRESETS:
        raise ConfigError(f"unknown model preset {name!r}")
    values = dict(MODEL_PRESETS[name])
    values.update(overrides)
    return ModelConfig.from_dict(values)


def _read_json(path: str) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON in {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def load_run_config(path: Optional[str]) -> Tuple[ModelConfig, TrainConfig]:
    """
    Load a run configuration file

    Accepts either {"model": {...}, "train": {...}} or a bare model object.
    A "preset" key inside "model" selects the base preset.

    Args:
        path: JSON file path, or None for all defaults

    Returns:
        (ModelConfig, TrainConfig)
    """
    if path is None:
        return ModelConfig().validate(), TrainConfig().validate()

    data = _read_json(path)
    if "model" in data or "train" in data:
        extra = sorted(set(data) - {"model", "train"})
        if extra:
            raise ConfigError(f"{path}: unknown top-level keys: {', '.join(extra)}")
        model_data = dict(data.get("model", {}))
        train_data = dict(data.get("train", {}))
    else:
        model_data, train_data = dict(data), {}

    preset = model_data.pop("preset", None)
    model_cfg = model_preset(preset, **model_data) if preset else ModelConfig.from_dict(model_data)
    train_cfg = TrainConfig.from_dict(train_data)
    log.debug(f"Loaded run config from {path}")
    return model_cfg, train_cfg


def save_run_config(path: str, model_cfg: ModelConfig, train_cfg: TrainConfig):
    """Write a run configuration with every default materialized"""
    with open(path, "w") as f:
        json.dump({"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}, f, indent=2)


def load_joint_weights(path: str) -> List[float]:
    """
    Load a joint-weight profile

    File format: {"weights": [θ_0, ..., θ_{N-1}]} or a bare list.
    """
    if not os.path.exists(path):
        raise ConfigError(f"joint weight profile not found: {path}")
    with open(path, "r") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed joint weight profile {path}: {e}")
    weights = data.get("weights") if isinstance(data, dict) else data
    if not isinstance(weights, list) or not all(isinstance(w, (int, float)) for w in weights):
        raise ConfigError(f"{path}: expected a list of numbers under 'weights'")
    return [float(w) for w in weights]
