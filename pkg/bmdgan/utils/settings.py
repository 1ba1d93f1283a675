import os
from typing import Optional

TRUE_VALUES = {"1", "true", "yes", "on"}
FALSE_VALUES = {"0", "false", "no", "off"}


class BMDGANSettingsError(ValueError):
    """
    Raised when a bmdgan environment variable holds a value that cannot be parsed.
    """


def strtobool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in TRUE_VALUES:
        return True
    if value in FALSE_VALUES:
        return False
    raise ValueError(f"Invalid truth value: {raw}")


BMDGAN_DEBUG_RAW = os.environ.get("BMDGAN_DEBUG", "false")
try:
    BMDGAN_DEBUG = strtobool(BMDGAN_DEBUG_RAW)
except ValueError:
    raise BMDGANSettingsError(f"Could not parse BMDGAN_DEBUG as bool: {BMDGAN_DEBUG_RAW}")

# Torch device used for training and inference
BMDGAN_DEVICE = os.environ.get("BMDGAN_DEVICE", "cpu")

THREAD_WORKERS_RAW = os.environ.get("BMDGAN_THREAD_WORKERS", "2")
try:
    THREAD_WORKERS = int(THREAD_WORKERS_RAW)
except ValueError:
    raise BMDGANSettingsError(
        f"Could not parse BMDGAN_THREAD_WORKERS as int: {THREAD_WORKERS_RAW}"
    )
if THREAD_WORKERS < 1:
    raise BMDGANSettingsError(
        f"BMDGAN_THREAD_WORKERS must be at least 1: {THREAD_WORKERS_RAW}"
    )

BMDGAN_TORCH_THREADS: Optional[int] = None
BMDGAN_TORCH_THREADS_RAW = os.environ.get("BMDGAN_TORCH_THREADS")
try:
    if BMDGAN_TORCH_THREADS_RAW is not None:
        BMDGAN_TORCH_THREADS = int(BMDGAN_TORCH_THREADS_RAW)
except ValueError:
    raise BMDGANSettingsError(
        f"Could not parse BMDGAN_TORCH_THREADS as int: {BMDGAN_TORCH_THREADS_RAW}"
    )

BMDGAN_RUN_SLOW_RAW = os.environ.get("BMDGAN_RUN_SLOW", "false")
try:
    BMDGAN_RUN_SLOW = strtobool(BMDGAN_RUN_SLOW_RAW)
except ValueError:
    raise BMDGANSettingsError(
        f"Could not parse BMDGAN_RUN_SLOW as bool: {BMDGAN_RUN_SLOW_RAW}"
    )

# Stable artifact names under out_dir
MANIFEST_FILENAME = "manifest.json"
IMAGES_DIRNAME = "images"
CHECKPOINT_FILENAME_TEMPLATE = "ckpt_stage{stage}.bin"
BASELINE_CHECKPOINT_FILENAME = "baseline.bin"
CALIBRATION_FILENAME = "calibration.json"
REPORT_FILENAME = "report.json"
PREDICTIONS_FILENAME = "predictions.json"
TRAIN_LOG_FILENAME = "train_log.jsonl"
PLOTS_DIRNAME = "plots"
PROGRESS_DIRNAME = "progress"
