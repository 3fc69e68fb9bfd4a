"""Constants shared across snapkit."""

# Page model
PAGE_SIZE = 4096  # bytes
ITEM_SIZE = 4  # bytes
ITEM_DTYPES = {1: "<u1", 2: "<u2", 4: "<u4", 8: "<u8"}

# File magics (8 bytes each)
IMAGE_MAGIC = b"SNAPIMG1"
FULL_MAGIC = b"SNAPFULL"
INCR_MAGIC = b"SNAPINCR"
TRACE_MAGIC = b"SNAPTRC1"
KV_MAGIC = b"SNAPKV01"

# Tick model
TICK_MS = 100
CHECKPOINT_INTERVAL_S = 5.0  # desk scale
CHECKPOINT_COUNT = 5
ZIPF_ALPHA = 2.0

# Full-scale settings, still selectable
FULL_SCALE_CHECKPOINT_INTERVAL_S = 10.0
FULL_SCALE_CHECKPOINT_COUNT = 10
FULL_SCALE_UF_CHOICES = (16_000, 32_000, 64_000, 128_000, 256_000)
FULL_SCALE_DATASET_MB_CHOICES = (1000, 2000, 4000, 8000)

# Trace generation refuses to allocate beyond this many bytes
TRACE_MEMORY_BUDGET = 1 << 30

# Striped latches for per-page mutual exclusion
LATCH_STRIPES = 1024

# Virtual engines
LOCK_WAIT_TIMEOUT = 2.0  # seconds
MAX_CLIENT_THREADS = 32

# Key-value layer
KV_VALUE_MAX = 1 << 20
KV_VALUE_SIZE = 100  # YCSB default field length
KV_SAVE_SECONDS = 10.0
KV_SAVE_CHANGES = 1

# Output
OUTPUT_ENV = "SNAPKIT_OUT"
DEFAULT_OUTPUT_DIR = "runs"
