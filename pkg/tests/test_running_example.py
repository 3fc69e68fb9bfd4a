"""The six-page running example, replayed through every algorithm."""

import unittest
from unittest import mock

from helpers import (
    AFTER_PERIOD_1,
    AFTER_PERIOD_2,
    EXAMPLE_INITIAL,
    HAS_FORK,
    ONE_ITEM,
    PERIOD_1,
    PERIOD_2,
    GatedSink,
    apply,
    example_sink,
    values_of,
)

from snapkit.algorithms import (
    CopyOnUpdateSnapshot,
    ForkSnapshot,
    HourglassSnapshot,
    NaiveSnapshot,
    PiggybackSnapshot,
    PingPongSnapshot,
    ZigzagSnapshot,
)
from snapkit.core import oracle_replay, PageStore


def build(cls, sink=None):
    return cls(6, initial=EXAMPLE_INITIAL, sink=sink or example_sink(), **ONE_ITEM)


class TestOracle(unittest.TestCase):
    def test_first_period(self):
        image = oracle_replay(PageStore(6, initial=EXAMPLE_INITIAL, **ONE_ITEM), PERIOD_1, 3)
        self.assertEqual(values_of(image), AFTER_PERIOD_1)

    def test_both_periods(self):
        image = oracle_replay(PageStore(6, initial=EXAMPLE_INITIAL, **ONE_ITEM), PERIOD_1 + PERIOD_2, 6)
        self.assertEqual(values_of(image), AFTER_PERIOD_2)

    def test_empty_prefix_is_initial(self):
        image = oracle_replay(PageStore(6, initial=EXAMPLE_INITIAL, **ONE_ITEM), PERIOD_1, 0)
        self.assertEqual(values_of(image), EXAMPLE_INITIAL)


class TestNaive(unittest.TestCase):
    def test_later_writes_do_not_reach_the_image(self):
        sink = GatedSink(6, **ONE_ITEM)
        algo = build(NaiveSnapshot, sink)
        apply(algo, PERIOD_1)
        handle = algo.trigger()
        self.assertTrue(sink.opened.wait(5))
        apply(algo, PERIOD_2)
        sink.release()
        handle.wait(5)
        self.assertEqual(values_of(sink.image(1)), AFTER_PERIOD_1)
        self.assertEqual(algo.read_value(0), 23)
        algo.close()


class TestCopyOnUpdate(unittest.TestCase):
    def test_first_write_copies_once(self):
        sink = GatedSink(6, **ONE_ITEM)
        algo = build(CopyOnUpdateSnapshot, sink)
        apply(algo, PERIOD_1)
        handle = algo.trigger()
        self.assertTrue(sink.opened.wait(5))

        algo.write(0, 23)
        self.assertEqual(algo.shadow.get(0)[0], 13)
        self.assertEqual(algo.dirty[0], 1)
        self.assertEqual(algo.live.get(0)[0], 23)
        self.assertEqual(algo.counters.sync_page_copies, 1)

        algo.write(0, 99)
        self.assertEqual(algo.counters.sync_page_copies, 1)
        self.assertEqual(algo.shadow.get(0)[0], 13)
        self.assertEqual(algo.read_value(0), 99)
        self.assertEqual(algo._snapshot_page(0)[0], 13)

        sink.release()
        handle.wait(5)
        self.assertEqual(values_of(sink.image(1)), AFTER_PERIOD_1)
        algo.close()

    def test_no_copies_outside_access_phase(self):
        algo = build(CopyOnUpdateSnapshot)
        apply(algo, PERIOD_1)
        algo.cycle(5)
        apply(algo, PERIOD_2)
        self.assertEqual(algo.counters.sync_page_copies, 0)
        algo.close()


@unittest.skipUnless(HAS_FORK, "needs os.fork")
class TestFork(unittest.TestCase):
    def test_child_sees_state_at_fork(self):
        sink = example_sink()
        algo = build(ForkSnapshot, sink)
        apply(algo, PERIOD_1)
        handle = algo.trigger()
        algo.write(0, 23)
        handle.wait(10)
        self.assertEqual(values_of(sink.image(1)), AFTER_PERIOD_1)
        self.assertEqual(algo.read_value(0), 23)
        algo.close()

    def test_trigger_skipped_while_child_alive(self):
        algo = build(ForkSnapshot)
        algo._current = mock.Mock(**{"done.return_value": False})
        self.assertIsNone(algo.trigger())
        self.assertEqual(algo.counters.skipped_triggers, 1)
        algo._current = None
        algo.close()


class TestZigzag(unittest.TestCase):
    def test_write_rules_and_take(self):
        algo = build(ZigzagSnapshot)
        self.assertEqual(algo.write_to.tolist(), [1] * 6)
        algo.write(0, 13)
        self.assertEqual(algo.b.get(0)[0], 13)
        self.assertEqual(algo.read_from[0], 1)
        self.assertEqual(algo.read_value(0), 13)
        apply(algo, PERIOD_1[1:])
        self.assertEqual(algo.read_from.tolist(), [1, 0, 1, 1, 0, 0])

        handle = algo.trigger()
        self.assertEqual(algo.write_to.tolist(), [0, 1, 0, 0, 1, 1])
        algo.write(0, 23)
        self.assertEqual(algo.a.get(0)[0], 23)
        handle.wait(5)
        self.assertEqual(values_of(algo.sink.image(1)), AFTER_PERIOD_1)
        algo.close()

    def test_take_from_all_zero_read_from(self):
        algo = build(ZigzagSnapshot)
        algo.take_snapshot()
        self.assertEqual(algo.write_to.tolist(), [1] * 6)
        algo.close()


class TestPingPong(unittest.TestCase):
    def test_double_write_and_incremental_pages(self):
        sink = example_sink()
        algo = build(PingPongSnapshot, sink)
        algo.write(0, 13)
        self.assertEqual(algo.live.get(0)[0], 13)
        self.assertEqual(algo.update_buf.get(0)[0], 13)
        self.assertEqual(algo.update_dirty[0], 1)
        apply(algo, PERIOD_1[1:])

        algo.take_snapshot()
        self.assertEqual(algo.durable_dirty.tolist(), [1, 0, 1, 1, 0, 0])
        sink.open(1, incremental=True)
        algo.traverse_snapshot(sink)
        sink.close()
        self.assertEqual(sink.emitted[1], [0, 2, 3])
        self.assertEqual(values_of(sink.image(1)), AFTER_PERIOD_1)
        self.assertFalse(algo.durable_dirty.any())
        self.assertEqual(algo.counters.physical_writes, 2 * algo.counters.logical_writes)
        algo.close()

    def test_quiet_period_emits_nothing(self):
        sink = example_sink()
        algo = build(PingPongSnapshot, sink)
        algo.cycle(5)
        self.assertEqual(sink.emitted[1], [])
        self.assertEqual(values_of(sink.image(1)), EXAMPLE_INITIAL)
        algo.close()


class TestHourglass(unittest.TestCase):
    def test_initial_state_and_bootstrap(self):
        sink = example_sink()
        algo = build(HourglassSnapshot, sink)
        self.assertEqual(sink.emitted[0], list(range(6)))
        self.assertFalse(algo.bits_b.any())
        self.assertFalse(algo.bits_a.any())
        self.assertTrue(algo.read_from.all())
        self.assertEqual(values_of(sink.image(0)), EXAMPLE_INITIAL)
        algo.close()

    def test_two_periods(self):
        sink = example_sink()
        algo = build(HourglassSnapshot, sink)
        algo.write(0, 13)
        self.assertEqual(algo.bits_a[0], 1)
        self.assertEqual(algo.a.get(0)[0], 13)
        self.assertEqual(algo.read_from[0], 0)
        self.assertEqual(algo.read_value(0), 13)
        apply(algo, PERIOD_1[1:])

        handle = algo.trigger()
        self.assertEqual(algo.pu, 1)
        algo.write(1, 14)
        self.assertEqual(algo.bits_b[1], 1)
        self.assertEqual(algo.b.get(1)[0], 14)
        self.assertEqual(algo.read_from[1], 1)
        handle.wait(5)
        self.assertEqual(sink.emitted[1], [0, 2, 3])
        self.assertEqual(values_of(sink.image(1)), AFTER_PERIOD_1)

        apply(algo, [(0, 23), (4, 18)])
        algo.cycle(5)
        self.assertEqual(sink.emitted[2], [0, 1, 4])
        self.assertEqual(values_of(sink.image(2)), AFTER_PERIOD_2)
        self.assertEqual([algo.read_value(i) for i in range(6)], AFTER_PERIOD_2)
        algo.close()

    def test_quiet_period_repeats_previous_image(self):
        sink = example_sink()
        algo = build(HourglassSnapshot, sink)
        apply(algo, PERIOD_1)
        algo.cycle(5)
        algo.cycle(5)
        self.assertEqual(sink.emitted[2], [])
        self.assertEqual(values_of(sink.image(2)), AFTER_PERIOD_1)
        self.assertEqual(algo.counters.taken_ops, 4)
        algo.close()


class TestPiggyback(unittest.TestCase):
    def test_flags_and_write_to_online(self):
        sink = example_sink()
        algo = build(PiggybackSnapshot, sink)
        algo.write(0, 13)
        self.assertEqual(algo.a.get(0)[0], 13)
        self.assertEqual(algo.flags[0], 1)
        apply(algo, PERIOD_1[1:])
        self.assertEqual(algo.flags.tolist(), [1, 0, 1, 1, 0, 0])

        algo.cycle(5)
        self.assertEqual(algo.last_piggyback, [0, 2, 3])
        self.assertEqual(values_of(sink.image(1)), AFTER_PERIOD_1)
        self.assertEqual([int(algo.b.get(i)[0]) for i in range(6)], AFTER_PERIOD_1)
        self.assertEqual(algo.flags.tolist(), [0] * 6)

        algo.write(1, 14)
        self.assertEqual(algo.b.get(1)[0], 14)
        self.assertEqual(algo.flags[1], 2)
        self.assertEqual(algo.read_value(1), 14)
        apply(algo, [(0, 23), (4, 18)])
        algo.cycle(5)
        self.assertEqual(values_of(sink.image(2)), AFTER_PERIOD_2)
        self.assertEqual(sorted(algo.last_piggyback), [0, 1, 4])
        algo.close()

    def test_clean_flags_copy_nothing(self):
        algo = build(PiggybackSnapshot)
        algo.cycle(5)
        self.assertEqual(algo.last_piggyback, [])
        self.assertTrue(algo.a.equals(algo.b))
        algo.close()

    def test_piggyback_skips_page_rewritten_during_access(self):
        sink = GatedSink(6, **ONE_ITEM)
        algo = build(PiggybackSnapshot, sink)
        apply(algo, PERIOD_1)
        handle = algo.trigger()
        self.assertTrue(sink.opened.wait(5))
        algo.write(0, 23)  # pU is b now
        sink.release()
        handle.wait(5)
        self.assertEqual(algo.last_piggyback, [2, 3])
        self.assertEqual(algo.read_value(0), 23)
        self.assertEqual(values_of(sink.image(1)), AFTER_PERIOD_1)
        algo.close()


if __name__ == "__main__":
    unittest.main()
