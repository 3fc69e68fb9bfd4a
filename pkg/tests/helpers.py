"""Shared fixtures for the snapkit tests."""

import os
import sys
import threading

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import numpy as np

from snapkit.core import PageImage, PageStore
from snapkit.persist import MemorySink

# Six one-item pages and the two update periods of the running example
EXAMPLE_INITIAL = [3, 4, 6, 7, 8, 5]
PERIOD_1 = [(0, 13), (2, 16), (3, 17)]
PERIOD_2 = [(0, 23), (1, 14), (4, 18)]
AFTER_PERIOD_1 = [13, 4, 16, 17, 8, 5]
AFTER_PERIOD_2 = [23, 14, 16, 17, 18, 5]

ONE_ITEM = dict(page_size=4, item_size=4)

HAS_FORK = hasattr(os, "fork")


def example_store():
    return PageStore(6, initial=EXAMPLE_INITIAL, **ONE_ITEM)


def example_sink():
    return MemorySink(6, **ONE_ITEM)


def zero_image(page_count, page_size=4096):
    return PageStore(page_count, page_size).to_image()


class GatedSink(MemorySink):
    """MemorySink whose traverses (after checkpoint 0) wait for ``release()``."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.opened = threading.Event()
        self._gate = threading.Event()

    def open(self, checkpoint_id, incremental=False):
        super().open(checkpoint_id, incremental)
        if checkpoint_id > 0:
            self.opened.set()
            self._gate.wait(10)

    def release(self):
        self._gate.set()


class PausingSink(MemorySink):
    """MemorySink that, once armed, stops the next traverse at its first page until ``resume()``."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.paused = threading.Event()
        self._resume = threading.Event()
        self._armed = False

    def arm(self):
        self.paused.clear()
        self._resume.clear()
        self._armed = True

    def resume(self):
        self._resume.set()

    def _pause(self):
        if self._armed:
            self._armed = False
            self.paused.set()
            self._resume.wait(10)

    def emit_page(self, index, page):
        self._pause()
        super().emit_page(index, page)

    def emit_from_last(self, index):
        self._pause()
        super().emit_from_last(index)


class FailingSink(MemorySink):
    """Raises on the first page of every checkpoint after checkpoint 0 while ``failing``."""

    failing = True

    def emit_page(self, index, page):
        if self.failing and self.checkpoint_id:
            raise OSError("disk full")
        super().emit_page(index, page)

    def emit_from_last(self, index):
        if self.failing and self.checkpoint_id:
            raise OSError("disk full")
        super().emit_from_last(index)


def apply(algo, updates):
    for index, value in updates:
        algo.write(index, value)


def values_of(image: PageImage):
    return [int(v) for v in np.asarray(image.pages)[:, 0]]
