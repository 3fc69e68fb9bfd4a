"""snapkit - in-memory snapshot algorithms and their benchmark harness."""

__version__ = "0.1.0"

from .algorithms import ALGORITHMS, available_algorithms, create_algorithm
from .core import PageImage, PageStore, SnapshotAlgorithm, oracle_replay
from .persist import FileSink, MemorySink, NullSink, merge
from .virtual import VIRTUAL_ENGINES, create_engine

__all__ = [
    "ALGORITHMS",
    "VIRTUAL_ENGINES",
    "FileSink",
    "MemorySink",
    "NullSink",
    "PageImage",
    "PageStore",
    "SnapshotAlgorithm",
    "available_algorithms",
    "create_algorithm",
    "create_engine",
    "merge",
    "oracle_replay",
]
