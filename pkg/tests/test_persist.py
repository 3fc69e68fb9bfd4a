import os
import tempfile
import unittest

import numpy as np

from helpers import EXAMPLE_INITIAL, ONE_ITEM, example_store

from snapkit.errors import MergeError, SnapshotError, SnapshotFormatError, StoreShapeError
from snapkit.persist import (
    FULL,
    INCREMENTAL,
    FileSink,
    MemorySink,
    NullSink,
    SnapshotFile,
    merge,
    merge_files,
    read_snapshot_file,
    verify_file,
    write_snapshot_file,
)


def full(checkpoint_id, values):
    pages = np.asarray(values, dtype="<u4")[:, None]
    return SnapshotFile(FULL, checkpoint_id, len(values), 4, pages)


def incremental(checkpoint_id, page_count, updates):
    indices = np.array([i for i, _ in updates], dtype=np.int64)
    pages = np.array([[v] for _, v in updates], dtype="<u4").reshape(len(updates), 1)
    return SnapshotFile(INCREMENTAL, checkpoint_id, page_count, 4, pages, indices)


class TestMerge(unittest.TestCase):
    def test_overlay(self):
        merged = merge(incremental(1, 6, [(0, 13), (2, 16), (3, 17)]), full(0, EXAMPLE_INITIAL))
        self.assertTrue(merged.is_full)
        self.assertEqual(merged.checkpoint_id, 1)
        self.assertEqual(merged.to_image().values(), [13, 4, 16, 17, 8, 5])

    def test_empty_incremental_repeats_previous(self):
        merged = merge(incremental(1, 6, []), full(0, EXAMPLE_INITIAL))
        self.assertEqual(merged.to_image().values(), EXAMPLE_INITIAL)

    def test_full_as_incremental(self):
        merged = merge(full(1, [1, 2, 3, 4, 5, 6]), full(0, EXAMPLE_INITIAL))
        self.assertEqual(merged.to_image().values(), [1, 2, 3, 4, 5, 6])

    def test_rejects_mismatches(self):
        with self.assertRaises(StoreShapeError):
            merge(incremental(1, 5, [(0, 1)]), full(0, EXAMPLE_INITIAL))
        with self.assertRaises(MergeError):
            merge(incremental(3, 6, [(0, 1)]), full(0, EXAMPLE_INITIAL))
        with self.assertRaises(MergeError):
            merge(incremental(1, 6, [(0, 1)]), incremental(0, 6, [(1, 1)]))


class TestFiles(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def test_full_and_incremental_files(self):
        base = write_snapshot_file(full(0, EXAMPLE_INITIAL), os.path.join(self.dir, "f0"))
        incr = write_snapshot_file(incremental(1, 6, [(1, 14), (4, 18)]), os.path.join(self.dir, "i1"))
        self.assertEqual(os.path.getsize(incr), 32 + 2 * (8 + 4))
        loaded = read_snapshot_file(incr)
        self.assertFalse(loaded.is_full)
        self.assertEqual(loaded.indices.tolist(), [1, 4])
        merged = merge_files(incr, base, os.path.join(self.dir, "f1"))
        self.assertEqual(read_snapshot_file(merged.path).to_image().values(), [3, 14, 6, 7, 18, 5])

    def test_corrupt_header(self):
        path = os.path.join(self.dir, "bad")
        with open(path, "wb") as fh:
            fh.write(b"GARBAGE!" + bytes(24))
        with self.assertRaises(SnapshotFormatError):
            read_snapshot_file(path)
        with open(path, "wb") as fh:
            fh.write(b"short")
        with self.assertRaises(SnapshotFormatError):
            read_snapshot_file(path)

    def test_truncated_full_payload(self):
        path = write_snapshot_file(full(0, EXAMPLE_INITIAL), os.path.join(self.dir, "f0"))
        with open(path, "r+b") as fh:
            fh.truncate(os.path.getsize(path) - 2)
        with self.assertRaises(SnapshotFormatError):
            read_snapshot_file(path)

    def test_verify(self):
        path = write_snapshot_file(full(0, EXAMPLE_INITIAL), os.path.join(self.dir, "f0"))
        self.assertTrue(verify_file(path, example_store().to_image()))
        store = example_store()
        store.put(0, 1)
        self.assertFalse(verify_file(path, store.to_image()))


class TestSinks(unittest.TestCase):
    def test_memory_sink_orders_pages(self):
        sink = MemorySink(3, **ONE_ITEM)
        sink.open(0)
        with self.assertRaises(SnapshotError):
            sink.emit_page(1, np.array([1], dtype="<u4"))

    def test_memory_sink_needs_every_page(self):
        sink = MemorySink(3, **ONE_ITEM)
        sink.open(0)
        sink.emit_page(0, np.array([1], dtype="<u4"))
        with self.assertRaises(SnapshotError):
            sink.close()

    def test_memory_sink_from_last(self):
        sink = MemorySink(3, **ONE_ITEM)
        sink.open(0)
        for i in range(3):
            sink.emit_page(i, np.array([i + 1], dtype="<u4"))
        sink.close()
        sink.open(1, incremental=True)
        sink.emit_from_last(0)
        sink.emit_page(1, np.array([9], dtype="<u4"))
        sink.emit_from_last(2)
        sink.close()
        self.assertEqual(sink.image(1).values(), [1, 9, 3])
        self.assertEqual(sink.emitted[1], [1])

    def test_file_sink_merges_incremental(self):
        with tempfile.TemporaryDirectory() as tmp:
            sink = FileSink(tmp, 3, **ONE_ITEM)
            sink.open(0)
            for i in range(3):
                sink.emit_page(i, np.array([i + 1], dtype="<u4"))
            sink.close()
            sink.open(1, incremental=True)
            sink.emit_from_last(0)
            sink.emit_page(1, np.array([9], dtype="<u4"))
            sink.emit_from_last(2)
            result = sink.close()
            self.assertEqual(result.to_image().values(), [1, 9, 3])
            self.assertTrue(sink.full_path(1).exists())
            self.assertEqual(read_snapshot_file(sink.incremental_path(1)).indices.tolist(), [1])

    def test_file_sink_full_from_last(self):
        with tempfile.TemporaryDirectory() as tmp:
            sink = FileSink(tmp, 2, **ONE_ITEM)
            sink.open(0)
            sink.emit_page(0, np.array([5], dtype="<u4"))
            sink.emit_page(1, np.array([6], dtype="<u4"))
            sink.close()
            sink.open(1)
            sink.emit_from_last(0)
            sink.emit_page(1, np.array([7], dtype="<u4"))
            sink.close()
            self.assertEqual(read_snapshot_file(sink.full_path(1)).to_image().values(), [5, 7])

    def test_file_sink_abort_removes_partial(self):
        with tempfile.TemporaryDirectory() as tmp:
            sink = FileSink(tmp, 2, **ONE_ITEM)
            sink.open(0)
            sink.emit_page(0, np.array([5], dtype="<u4"))
            sink.abort()
            self.assertFalse(sink.full_path(0).exists())
            self.assertIsNone(sink.checkpoint_id)

    def test_incremental_needs_a_full_first(self):
        with tempfile.TemporaryDirectory() as tmp:
            sink = FileSink(tmp, 2, **ONE_ITEM)
            with self.assertRaises(SnapshotError):
                sink.open(1, incremental=True)

    def test_null_sink(self):
        sink = NullSink()
        sink.open(4, incremental=True)
        sink.emit_from_last(0)
        self.assertIsNone(sink.close())


if __name__ == "__main__":
    unittest.main()
