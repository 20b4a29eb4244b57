"""Constants for slimkws."""

from logging import Logger, getLogger

LOGGER: Logger = getLogger(__package__)

DOMAIN = "slimkws"

DEFAULT_WIDTHS = (1.0, 0.75, 0.5, 0.25)

BATCH_NORM_EPS = 1e-5
BATCH_NORM_MOMENTUM = 0.1
LAYER_NORM_EPS = 1e-5
EMBEDDING_INIT_STD = 0.02

SAMPLE_RATE = 16000
WINDOW_MS = 25.0
HOP_MS = 10.0
LOW_HZ = 20.0
LOG_FLOOR = 1e-6

CHECKPOINT_MAGIC = b"SLNK"
CHECKPOINT_VERSION = 2

ENV_THREADS = "SLNK_THREADS"
ENV_DEBUG = "SLNK_DEBUG"

EXIT_OK = 0
EXIT_INTERNAL_ERROR = 1
EXIT_USER_ERROR = 2
