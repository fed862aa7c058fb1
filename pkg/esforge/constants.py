"""
Environment variable names and default values for esforge.

All environment variables are optional and have sensible defaults. A `.env`
file in the working directory is loaded first.
"""

import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

# Runtime settings
ESFORGE_THREADS = int(os.getenv("ESFORGE_THREADS", "0")) or (os.cpu_count() or 1)
ESFORGE_LOG_LEVEL = os.getenv("ESFORGE_LOG_LEVEL", "INFO").upper()
ESFORGE_OUTPUT_DIR = Path(os.getenv("ESFORGE_OUTPUT_DIR", "runs"))

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"

# Seed namespaces (kept disjoint so training, evaluation and noise never share streams)
TAG_ES_MEMBER = 0x45530001
TAG_INIT = 0x494E4954
TAG_TRAIN_POOL = 0x54524E50
TAG_EVAL_SET = 0x4556414C
TAG_ROLLOUT = 0x524F4C4C
TAG_BATCH = 0x42415443
TAG_PRETRAIN = 0x50524554
TAG_DEMO = 0x44454D4F

# Defaults
DEFAULT_TAU = 1e-6
DEFAULT_TRAIN_POOL_SIZE = 200
DEFAULT_EVAL_SIZE = 500
DEFAULT_CHECKPOINT_EVERY = 25
ZSCORE_STD_FLOOR = 1e-12
