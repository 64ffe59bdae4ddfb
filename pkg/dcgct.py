"""
DC-GCT - Common definitions, constants and process-wide switches
"""
import logging
import os
import sys

__version__ = "0.3.0"

# Skeleton
NUM_JOINTS = 17
ROOT_JOINT = 0

# Paper training settings
DEFAULT_EPOCHS = 30
DEFAULT_BATCH_SIZE = 512
LR_SINGLE_FRAME = 5e-4
LR_SEQUENCE = 1e-3
PER_EPOCH_DECAY = 0.95
FIVE_EPOCH_DECAY = 0.5

# Regression head output unit: one head unit is one meter
OUTPUT_SCALE_MM = 1000.0

# Evaluation
PCK_THRESHOLD_MM = 150.0
AUC_THRESHOLDS_MM = tuple(float(t) for t in range(5, 155, 5))

# Checkpoint format
CHECKPOINT_MAGIC = b"DCGCTCKP"
CHECKPOINT_VERSION = 1

# Exit codes
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

# Calibration targets: preset name -> learnable parameter count
PARAM_TARGETS = {
    "paper": 2.07e6,
    "layers1": 0.66e6,
    "layers2": 1.38e6,
    "layers4": 2.76e6,
    "channels80": 0.52e6,
    "channels200": 3.23e6,
    "channels320": 8.23e6,
    "ratio1_1": 1.68e6,
    "ratio1_3": 1.96e6,
    "ratio3_1": 1.96e6,
    "ratio4_1": 2.07e6,
    "ratio1_5": 3.10e6,
    "ratio5_1": 3.10e6,
    "lcm_only": 2.25e6,
    "gcm_only": 0.93e6,
    "l2g_single": 2.56e6,
    "g2l_single": 2.56e6,
    "parallel_double": 1.11e6,
    "double_no_fim": 1.56e6,
    "double_fim_1_1": 1.68e6,
    "frames9": 2.28e6,
    "frames27": 2.32e6,
    "frames81": 3.11e6,
    "frames243": 3.44e6,
}
PARAM_TOLERANCE = 0.10

# Calibration targets: preset name -> FLOPs for one forward pass, B=1
FLOP_TARGETS = {
    "frames9": 77e6,
    "frames27": 78e6,
    "frames81": 82e6,
    "frames243": 93e6,
}
FLOP_TOLERANCE = 0.20


# Exceptions
class DCGCTError(Exception):
    """Base class for every error raised by the toolkit"""


class ConfigError(DCGCTError):
    """Usage or configuration problem (exit code 2)"""


class TopologyError(ConfigError):
    pass


class ShapeError(ConfigError):
    pass


class CheckpointError(ConfigError):
    pass


class DatasetError(ConfigError):
    pass


class NumericalError(DCGCTError):
    """NaN/Inf encountered (exit code 3)"""


class GradientError(DCGCTError):
    pass


def env_flag(name: str) -> bool:
    """Check if a boolean environment switch is on"""
    env = os.getenv(name)
    return env is not None and env not in ("", "0", "false", "False")


def check_finite_enabled() -> bool:
    """NaN/Inf assertions after every tensor op (DCGCT_CHECK_FINITE=1)"""
    return env_flag("DCGCT_CHECK_FINITE")


def worker_count() -> int:
    """Worker cap from DCGCT_THREADS, defaults to 1"""
    env = os.getenv("DCGCT_THREADS")
    if not env:
        return 1
    try:
        return max(1, int(env))
    except ValueError:
        raise ConfigError(f"DCGCT_THREADS must be an integer, got {env!r}")


def setup_logging(level: str = None) -> logging.Logger:
    """
    Bind the process logger to the current stderr at the given level

    Args:
        level: Level name; falls back to DCGCT_LOG_LEVEL, then INFO

    Returns:
        The "dcgct" logger
    """
    logger = logging.getLogger("dcgct")
    level = level or os.getenv("DCGCT_LOG_LEVEL", "INFO")
    logger.setLevel(level.upper())
    for old in list(logger.handlers):
        logger.removeHandler(old)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("[%(levelname)s] %(message)s"))
    logger.addHandler(handler)
    logger.propagate = False
    return logger
