"""Snapshot sinks, the full/incremental snapshot file formats and Merge.

File layout (all integers little-endian, 8 bytes)::

    magic "SNAPFULL" | checkpoint_id | page_count | page_size | raw pages
    magic "SNAPINCR" | checkpoint_id | page_count | page_size | (index, page)*

Incremental indices are strictly ascending.
"""

from __future__ import annotations

import logging
import os
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Optional, Union

import numpy as np

from . import config
from .core import PageImage, item_dtype
from .errors import MergeError, SnapshotError, SnapshotFormatError, StoreShapeError

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<8sQQQ")
_INDEX = struct.Struct("<Q")

FULL = "full"
INCREMENTAL = "incremental"


@dataclass
class SnapshotFile:
    """A full or incremental snapshot, in memory and/or on disk.

    ``pages`` holds every page for a full snapshot and only the listed
    ``indices`` for an incremental one. File-backed snapshots may leave
    ``pages`` unloaded until ``materialize()``.
    """

    kind: str
    checkpoint_id: int
    page_count: int
    page_size: int
    pages: Optional[np.ndarray] = None
    indices: Optional[np.ndarray] = None
    path: Optional[Path] = None
    item_size: int = config.ITEM_SIZE

    @property
    def is_full(self) -> bool:
        return self.kind == FULL

    def materialize(self) -> "SnapshotFile":
        """Load ``pages`` (and ``indices``) from ``path`` if not in memory yet; returns self."""
        if self.pages is None:
            if self.path is None:
                raise SnapshotError("snapshot has neither pages nor a path")
            loaded = read_snapshot_file(self.path, self.item_size)
            self.pages, self.indices = loaded.pages, loaded.indices
        return self

    def to_image(self) -> PageImage:
        self.materialize()
        if not self.is_full:
            raise SnapshotError("an incremental snapshot is not a full image; merge it first")
        return PageImage(self.pages, logical_time=self.checkpoint_id)

    def expected_size(self) -> int:
        """Byte length the on-disk file should have."""
        if self.is_full:
            return _HEADER.size + self.page_count * self.page_size
        count = 0 if self.indices is None else len(self.indices)
        return _HEADER.size + count * (_INDEX.size + self.page_size)


def _write_header(fh: BinaryIO, magic: bytes, checkpoint_id: int, page_count: int, page_size: int) -> None:
    fh.write(_HEADER.pack(magic, checkpoint_id, page_count, page_size))


def write_snapshot_file(snapshot: SnapshotFile, path: Union[str, Path]) -> Path:
    """Write ``snapshot`` to ``path`` in its on-disk format."""
    path = Path(path)
    snapshot.materialize()
    try:
        with open(path, "wb") as fh:
            if snapshot.is_full:
                _write_header(fh, config.FULL_MAGIC, snapshot.checkpoint_id, snapshot.page_count, snapshot.page_size)
                fh.write(np.ascontiguousarray(snapshot.pages).tobytes())
            else:
                _write_header(fh, config.INCR_MAGIC, snapshot.checkpoint_id, snapshot.page_count, snapshot.page_size)
                for index, page in zip(snapshot.indices, snapshot.pages):
                    fh.write(_INDEX.pack(int(index)))
                    fh.write(page.tobytes())
    except OSError as e:
        raise OSError(f"could not write snapshot {path}: {e}") from e
    snapshot.path = path
    return path


def read_snapshot_file(path: Union[str, Path], item_size: int = config.ITEM_SIZE) -> SnapshotFile:
    """Load a snapshot file. A corrupt header raises ``SnapshotFormatError``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise OSError(f"could not read snapshot {path}: {e}") from e
    if len(data) < _HEADER.size:
        raise SnapshotFormatError(f"{path}: shorter than the snapshot header")
    magic, checkpoint_id, page_count, page_size = _HEADER.unpack_from(data)
    dtype = item_dtype(item_size)
    if page_count < 1 or page_size < 1 or page_size % dtype.itemsize:
        raise SnapshotFormatError(f"{path}: bad shape {page_count} x {page_size}")
    items = page_size // dtype.itemsize
    payload = memoryview(data)[_HEADER.size:]
    if magic == config.FULL_MAGIC:
        if len(payload) != page_count * page_size:
            raise SnapshotFormatError(
                f"{path}: payload is {len(payload)} bytes, expected {page_count * page_size}"
            )
        pages = np.frombuffer(payload, dtype=dtype).reshape(page_count, items).copy()
        return SnapshotFile(FULL, checkpoint_id, page_count, page_size, pages, None, path, item_size)
    if magic == config.INCR_MAGIC:
        record = _INDEX.size + page_size
        if len(payload) % record:
            raise SnapshotFormatError(f"{path}: truncated incremental record")
        count = len(payload) // record
        raw = np.frombuffer(payload, dtype=np.uint8).reshape(count, record)
        indices = raw[:, : _INDEX.size].copy().view("<u8").reshape(count).astype(np.int64)
        pages = raw[:, _INDEX.size:].copy().view(dtype).reshape(count, items)
        if count and (np.any(np.diff(indices) <= 0) or indices[-1] >= page_count):
            raise SnapshotFormatError(f"{path}: incremental indices not strictly ascending in range")
        return SnapshotFile(INCREMENTAL, checkpoint_id, page_count, page_size, pages, indices, path, item_size)
    raise SnapshotFormatError(f"{path}: unknown magic {magic!r}")


def _check_mergeable(incremental: SnapshotFile, previous_full: SnapshotFile) -> None:
    """Merge needs a full predecessor of the same shape at checkpoint id - 1."""
    if not previous_full.is_full:
        raise MergeError("previous snapshot must be a full snapshot")
    if (incremental.page_count, incremental.page_size) != (previous_full.page_count, previous_full.page_size):
        raise StoreShapeError(
            f"shape mismatch: incremental {incremental.page_count}x{incremental.page_size}, "
            f"full {previous_full.page_count}x{previous_full.page_size}"
        )
    if incremental.checkpoint_id != previous_full.checkpoint_id + 1:
        raise MergeError(
            f"checkpoint {incremental.checkpoint_id} does not follow {previous_full.checkpoint_id}"
        )


def merge(incremental: SnapshotFile, previous_full: SnapshotFile) -> SnapshotFile:
    """Overlay an incremental snapshot on the previous full snapshot.

    Page i comes from the incremental snapshot when present, else from
    ``previous_full``. A full snapshot passed as ``incremental`` acts as one
    that lists every page.
    """
    _check_mergeable(incremental, previous_full)
    incremental.materialize()
    previous_full.materialize()
    pages = previous_full.pages.copy()
    if incremental.is_full:
        pages[:] = incremental.pages
    elif len(incremental.indices):
        pages[incremental.indices] = incremental.pages
    return SnapshotFile(
        FULL,
        incremental.checkpoint_id,
        incremental.page_count,
        incremental.page_size,
        pages,
        item_size=previous_full.item_size,
    )


def merge_files(
    incremental_path: Union[str, Path],
    previous_full_path: Union[str, Path],
    out_path: Union[str, Path],
    item_size: int = config.ITEM_SIZE,
) -> SnapshotFile:
    """File-to-file Merge; writes and returns the new full snapshot."""
    merged = merge(
        read_snapshot_file(incremental_path, item_size),
        read_snapshot_file(previous_full_path, item_size),
    )
    write_snapshot_file(merged, out_path)
    return merged


def verify_file(snapshot: Union[SnapshotFile, str, Path], expected: PageImage) -> bool:
    """True iff the snapshot's payload pages equal ``expected`` byte for byte."""
    if not isinstance(snapshot, SnapshotFile):
        snapshot = read_snapshot_file(snapshot, expected.pages.dtype.itemsize)
    snapshot.materialize()
    if (snapshot.page_count, snapshot.page_size) != (expected.page_count, expected.page_size):
        return False
    if snapshot.is_full:
        return bool(np.array_equal(snapshot.pages, expected.pages))
    return bool(np.array_equal(snapshot.pages, expected.pages[snapshot.indices]))


class SnapshotSink(ABC):
    """Receives the pages of one checkpoint from a traverse.

    Pages arrive in ascending index order; every index is emitted exactly
    once, either with its bytes or as "same as the last snapshot".
    """

    cross_process = True

    def __init__(self) -> None:
        self.checkpoint_id: Optional[int] = None
        self.incremental = False

    @abstractmethod
    def open(self, checkpoint_id: int, incremental: bool = False) -> None:
        ...

    @abstractmethod
    def emit_page(self, index: int, page: np.ndarray) -> None:
        ...

    @abstractmethod
    def emit_from_last(self, index: int) -> None:
        ...

    @abstractmethod
    def close(self) -> Optional[SnapshotFile]:
        ...

    def abort(self) -> None:
        """Drop a checkpoint whose traverse failed."""
        self.checkpoint_id = None

    def adopt(self, checkpoint_id: int, image: Optional[PageImage] = None) -> Optional[SnapshotFile]:
        """Record a checkpoint produced outside this process (fork child)."""
        return None


class NullSink(SnapshotSink):
    """Discards everything; used for throughput runs."""

    def open(self, checkpoint_id: int, incremental: bool = False) -> None:
        self.checkpoint_id = checkpoint_id
        self.incremental = incremental

    def emit_page(self, index: int, page: np.ndarray) -> None:
        pass

    def emit_from_last(self, index: int) -> None:
        pass

    def close(self) -> None:
        self.checkpoint_id = None
        return None


class _OrderedSink(SnapshotSink):
    """Shared bookkeeping for sinks that enforce the emission contract."""

    def __init__(self, page_count: int, page_size: int, item_size: int = config.ITEM_SIZE):
        super().__init__()
        self.page_count = page_count
        self.page_size = page_size
        self.item_size = item_size
        self._next_index = 0

    def _start(self, checkpoint_id: int, incremental: bool) -> None:
        """Begin a checkpoint; only one may be open at a time."""
        if self.checkpoint_id is not None:
            raise SnapshotError(f"sink already open for checkpoint {self.checkpoint_id}")
        self.checkpoint_id = checkpoint_id
        self.incremental = incremental
        self._next_index = 0

    def _advance(self, index: int) -> None:
        if index != self._next_index:
            raise SnapshotError(f"page {index} emitted out of order, expected {self._next_index}")
        self._next_index += 1

    def _finish(self) -> int:
        """Check that every page was emitted and close the checkpoint.

        Returns the id of the checkpoint just closed.
        """
        if self._next_index != self.page_count:
            raise SnapshotError(
                f"checkpoint {self.checkpoint_id} emitted {self._next_index} of {self.page_count} pages"
            )
        checkpoint_id = self.checkpoint_id
        self.checkpoint_id = None
        return checkpoint_id


class MemorySink(_OrderedSink):
    """Builds every checkpoint as an in-memory full image (merging as it goes)."""

    cross_process = False

    def __init__(self, page_count: int, page_size: int = config.PAGE_SIZE, item_size: int = config.ITEM_SIZE):
        super().__init__(page_count, page_size, item_size)
        items = page_size // item_size
        self.last = np.zeros((page_count, items), dtype=item_dtype(item_size))
        self.snapshots: dict[int, SnapshotFile] = {}
        self.emitted: dict[int, list[int]] = {}
        self._building: Optional[np.ndarray] = None
        self._emitted: list[int] = []

    def open(self, checkpoint_id: int, incremental: bool = False) -> None:
        self._start(checkpoint_id, incremental)
        self._building = self.last.copy()
        self._emitted = []

    def emit_page(self, index: int, page: np.ndarray) -> None:
        self._advance(index)
        self._building[index] = page
        self._emitted.append(index)

    def emit_from_last(self, index: int) -> None:
        # the building image already starts as a copy of the last one
        self._advance(index)

    def close(self) -> SnapshotFile:
        checkpoint_id = self._finish()
        self.last = self._building
        self._building = None
        self.emitted[checkpoint_id] = self._emitted
        snapshot = SnapshotFile(FULL, checkpoint_id, self.page_count, self.page_size, self.last, item_size=self.item_size)
        self.snapshots[checkpoint_id] = snapshot
        return snapshot

    def abort(self) -> None:
        super().abort()
        self._building = None

    def adopt(self, checkpoint_id: int, image: Optional[PageImage] = None) -> SnapshotFile:
        if image is None:
            raise SnapshotError("memory sink needs the image produced by the child")
        self.last = image.pages
        self.emitted[checkpoint_id] = list(range(self.page_count))
        snapshot = SnapshotFile(FULL, checkpoint_id, self.page_count, self.page_size, self.last, item_size=self.item_size)
        self.snapshots[checkpoint_id] = snapshot
        return snapshot

    def image(self, checkpoint_id: int) -> PageImage:
        """The merged full image of ``checkpoint_id``."""
        return self.snapshots[checkpoint_id].to_image()


class FileSink(_OrderedSink):
    """Writes checkpoints under ``directory``.

    Full traverses stream a ``full_NNNN.snap``; incremental traverses stream
    ``incr_NNNN.snap`` and are merged with the previous full file into the
    next ``full_NNNN.snap`` on close.
    """

    def __init__(
        self,
        directory: Union[str, Path],
        page_count: int,
        page_size: int = config.PAGE_SIZE,
        item_size: int = config.ITEM_SIZE,
        keep_incremental: bool = True,
    ):
        super().__init__(page_count, page_size, item_size)
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.keep_incremental = keep_incremental
        self.last_full: Optional[Path] = None
        self._fh: Optional[BinaryIO] = None
        self._path: Optional[Path] = None
        self._from_last = 0

    def full_path(self, checkpoint_id: int) -> Path:
        return self.directory / f"full_{checkpoint_id:04d}.snap"

    def incremental_path(self, checkpoint_id: int) -> Path:
        return self.directory / f"incr_{checkpoint_id:04d}.snap"

    def open(self, checkpoint_id: int, incremental: bool = False) -> None:
        if incremental and self.last_full is None:
            raise SnapshotError("incremental checkpoint without a previous full snapshot")
        self._start(checkpoint_id, incremental)
        self._path = self.incremental_path(checkpoint_id) if incremental else self.full_path(checkpoint_id)
        self._from_last = 0
        try:
            self._fh = open(self._path, "wb")
            magic = config.INCR_MAGIC if incremental else config.FULL_MAGIC
            _write_header(self._fh, magic, checkpoint_id, self.page_count, self.page_size)
        except OSError as e:
            self.checkpoint_id = None
            raise OSError(f"could not open snapshot {self._path}: {e}") from e

    def emit_page(self, index: int, page: np.ndarray) -> None:
        self._advance(index)
        if self.incremental:
            self._fh.write(_INDEX.pack(index))
        self._fh.write(page.tobytes())

    def emit_from_last(self, index: int) -> None:
        self._advance(index)
        if not self.incremental:
            # a full file still needs the bytes; take them from the last full file
            self._fh.write(self._last_page(index))
        else:
            self._from_last += 1

    def _last_page(self, index: int) -> bytes:
        """Bytes of page ``index`` in the last full file."""
        if self.last_full is None:
            raise SnapshotError("no previous full snapshot to copy from")
        with open(self.last_full, "rb") as fh:
            fh.seek(_HEADER.size + index * self.page_size)
            return fh.read(self.page_size)

    def close(self) -> SnapshotFile:
        """Finish the file; an incremental one is merged into the next full file.

        Returns the full snapshot for this checkpoint, file-backed and not
        loaded into memory.
        """
        checkpoint_id = self._finish()
        self._fh.close()
        self._fh = None
        if not self.incremental:
            self.last_full = self._path
            return SnapshotFile(FULL, checkpoint_id, self.page_count, self.page_size, path=self._path, item_size=self.item_size)
        merged = merge_files(self._path, self.last_full, self.full_path(checkpoint_id), self.item_size)
        if not self.keep_incremental:
            os.unlink(self._path)
        self.last_full = merged.path
        logger.debug("checkpoint %d merged into %s", checkpoint_id, merged.path)
        return merged

    def abort(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
        if self._path is not None and self._path.exists():
            self._path.unlink()
        super().abort()

    def adopt(self, checkpoint_id: int, image: Optional[PageImage] = None) -> SnapshotFile:
        """Take over the full file a fork child wrote for ``checkpoint_id``."""
        path = self.full_path(checkpoint_id)
        if not path.exists():
            raise SnapshotError(f"fork child did not produce {path}")
        self.last_full = path
        return SnapshotFile(FULL, checkpoint_id, self.page_count, self.page_size, path=path, item_size=self.item_size)
