import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from budsim.core import VirtualClock
from budsim.imc import DEST_PEER, ImcBus
from budsim.loadbalance import (
    ACTIVITY_RATES,
    CAPACITY_MAH,
    DbEntry,
    EnergyLedger,
    NoCandidate,
    RoleManager,
    SharedPeripheralDb,
    UnknownActivity,
    assign_executor,
)

HOUR_US = 3_600_000_000


class TestEnergy:
    def test_8h_ppg_depletes_within_1pct(self):
        ledger = EnergyLedger()
        for _ in range(8 * 60):  # one call per simulated minute
            ledger.account("ppg", HOUR_US / 60)
        assert ledger.drained_mah == pytest.approx(CAPACITY_MAH, rel=0.01)

    def test_6h_playback_depletes_within_1pct(self):
        ledger = EnergyLedger()
        ledger.account("playback", 6 * HOUR_US)
        assert ledger.drained_mah == pytest.approx(CAPACITY_MAH, rel=0.01)

    def test_zero_ticks_unchanged(self):
        ledger = EnergyLedger()
        ledger.account("ppg", 0)
        assert ledger.drained_mah == 0.0

    def test_unknown_activity(self):
        with pytest.raises(UnknownActivity):
            EnergyLedger().account("warp_drive", 10)

    def test_depleted_signal_fires_once(self):
        hits = []
        ledger = EnergyLedger(capacity_mah=1.0, on_depleted=hits.append)
        ledger.account("playback", HOUR_US / 10)
        ledger.account("playback", HOUR_US)
        ledger.account("playback", HOUR_US)
        assert ledger.depleted and len(hits) == 1

    def test_drain_monotone(self):
        ledger = EnergyLedger()
        prev = 0.0
        for _ in range(10):
            cur = ledger.account("imu", 1000)
            assert cur >= prev
            prev = cur


class TestExecutorPolicy:
    def make_ledgers(self, left_frac, right_frac):
        out = {}
        for side, frac in (("left", left_frac), ("right", right_frac)):
            ledger = EnergyLedger()
            ledger.drained_mah = frac * CAPACITY_MAH
            out[side] = ledger
        return out

    def test_tie_goes_to_secondary(self):
        ledgers = self.make_ledgers(0.3, 0.3)
        assert assign_executor(0x10, "balance_energy", ledgers, "right") == "right"

    def test_less_drained_side_chosen(self):
        ledgers = self.make_ledgers(0.6, 0.4)
        assert assign_executor(0x10, "balance_energy", ledgers, "left") == "right"

    def test_pin_policies(self):
        ledgers = self.make_ledgers(0.9, 0.1)
        assert assign_executor(0x10, "pin_left", ledgers, "right") == "left"

    def test_no_candidate_when_required_bud_depleted(self):
        ledgers = self.make_ledgers(1.0, 1.0)
        with pytest.raises(NoCandidate):
            assign_executor(0x10, "balance_energy", ledgers, "left")


def entry_strategy():
    return st.builds(
        DbEntry,
        state=st.sampled_from(["disabled", "enabled", "error"]),
        executor=st.sampled_from(["", "left", "right"]),
        config=st.lists(
            st.tuples(st.integers(1, 6), st.integers(0, 65535)), max_size=3, unique_by=lambda t: t[0]
        ).map(lambda l: tuple(sorted(l))),
        version=st.tuples(st.integers(1, 50), st.integers(1, 2)),
    )


class TestSharedDb:
    def test_merge_empty_delta_identity(self):
        db = SharedPeripheralDb(1)
        db.local_update(0x01, state="enabled")
        before = dict(db.entries)
        assert db.merge({}) == 0
        assert db.entries == before

    def test_concurrent_updates_union(self):
        a, b = SharedPeripheralDb(1), SharedPeripheralDb(2)
        a.local_update(0x01, state="enabled")
        b.local_update(0x02, state="enabled")
        a.merge(b.entries)
        b.merge(a.entries)
        assert set(a.entries) == set(b.entries) == {0x01, 0x02}
        assert a.entries == b.entries

    @given(st.dictionaries(st.integers(1, 5), entry_strategy(), max_size=5),
           st.dictionaries(st.integers(1, 5), entry_strategy(), max_size=5),
           st.dictionaries(st.integers(1, 5), entry_strategy(), max_size=5))
    def test_merge_is_a_join(self, da, db_, dc):
        def merged(*deltas):
            db = SharedPeripheralDb(1)
            for d in deltas:
                db.merge(d)
            return db.entries

        assert merged(da, merged(db_, dc)) == merged(merged(da, db_), dc)
        assert merged(da, da) == merged(da)

    def test_order_permutation_convergence(self):
        rng = np.random.default_rng(8)
        updates = []
        for i in range(12):
            node = int(rng.integers(1, 3))
            db = SharedPeripheralDb(node)
            db._max_counter = i  # distinct lamport counters
            e = db.local_update(int(rng.integers(1, 4)), state=str(rng.choice(["enabled", "disabled"])))
            periph = list(db.entries)[0]
            updates.append({periph: e})
        finals = []
        for order in (updates, updates[::-1], sorted(updates, key=lambda d: list(d)[0])):
            db = SharedPeripheralDb(1)
            for delta in order:
                db.merge(delta)
            finals.append(dict(db.entries))
        assert finals[0] == finals[1] == finals[2]

    def test_entry_codec_roundtrip(self):
        db = SharedPeripheralDb(2)
        db.local_update(0x10, state="enabled", executor="right")
        db.set_config(0x10, 0x01, 50)
        blob = db.encode_entry(0x10)
        assert len(blob) <= 64
        periph, entry = SharedPeripheralDb.decode_entry(blob)
        assert periph == 0x10
        assert entry == db.entries[0x10]


class HandshakeHarness:
    """Two buses + role managers with an explicit-latency message pump."""

    def __init__(self, period_s=1.0, latency_us=5000):
        self.clock = VirtualClock()
        self.latency_us = latency_us
        self.in_flight = []  # (deliver_at, dest_side, msg)
        self.links_up = True
        self.events = []
        self.mgrs = {}
        self.buses = {}
        self.frozen = {"left": 0, "right": 0}
        for side in ("left", "right"):
            bus = ImcBus(node_id=1 if side == "left" else 2,
                         forward=self._forwarder(side))
            hooks = {
                "freeze": lambda s=side: self._bump(s, 1),
                "unfreeze": lambda s=side: self._bump(s, -1),
                "collect_state": lambda: 42,
                "apply_state": lambda seq: self.events.append(("applied", seq)),
                "set_role": lambda role, s=side: self.events.append((s, role, self.clock.now_us)),
            }
            self.buses[side] = bus
            self.mgrs[side] = RoleManager(side, bus, self.clock, period_s,
                                          latency_us, hooks, initial_primary="left")

    def _bump(self, side, d):
        self.frozen[side] += d

    def _forwarder(self, side):
        other = "right" if side == "left" else "left"

        def forward(msg, mask):
            if mask & DEST_PEER and self.links_up:
                self.in_flight.append((self.clock.now_us + self.latency_us, other, msg))

        return forward

    def run_until(self, t_end_us, step_us=10_000):
        while self.clock.now_us < t_end_us:
            t = min(self.clock.now_us + step_us, t_end_us)
            self.clock.advance_to(t)
            due = [x for x in self.in_flight if x[0] <= t]
            self.in_flight = [x for x in self.in_flight if x[0] > t]
            for _, dest, msg in due:
                self.buses[dest].deliver_remote(msg)
            for side in ("left", "right"):
                self.buses[side].drain()
            for side in ("left", "right"):
                self.mgrs[side].maybe_initiate(t, self.links_up)
            for _, dest, msg in [x for x in self.in_flight if x[0] <= t]:
                pass
            # second drain so replies sent this step are seen next step
            for side in ("left", "right"):
                self.mgrs[side].flip_check(t)

    def primaries(self):
        return [s for s, m in self.mgrs.items() if m.role == "primary"]


class TestRoleRotation:
    def test_two_periods_back_to_original(self):
        h = HandshakeHarness(period_s=1.0)
        h.run_until(2_500_000)
        assert h.mgrs["left"].swap_count == 2
        assert h.mgrs["left"].role == "primary"
        assert h.primaries() == ["left"]

    def test_exactly_one_primary_at_every_step(self):
        h = HandshakeHarness(period_s=0.5)
        checks = []
        t = 0
        while t < 3_000_000:
            t += 10_000
            h.run_until(t)
            checks.append(tuple(h.primaries()))
        assert all(len(p) == 1 for p in checks)
        assert {("left",), ("right",)} == set(checks)

    def test_peer_down_defers_swap(self):
        h = HandshakeHarness(period_s=1.0)
        h.links_up = False
        h.run_until(1_500_000)
        assert h.mgrs["left"].swap_count == 0
        assert h.mgrs["left"].deferrals >= 1
        assert h.primaries() == ["left"]
        h.links_up = True
        h.run_until(2_500_000)
        assert h.mgrs["left"].swap_count == 1

    def test_state_transferred_on_promotion(self):
        h = HandshakeHarness(period_s=1.0)
        h.run_until(1_200_000)
        assert ("applied", 42) in h.events

    def test_freeze_released_after_swap(self):
        h = HandshakeHarness(period_s=1.0)
        h.run_until(2_500_000)
        assert h.frozen == {"left": 0, "right": 0}
