"""Per-cell downlink scheduler and CBG-based HARQ.

Each D/S slot a cell serves, in order:

1. HARQ retransmissions whose feedback has arrived (oldest first).  A
   retransmission carries exactly the failed CBGs of its transport block at
   the original MCS, and needs enough free RBGs to fit them.
2. New data for XR and eMBB UEs, interleaved by weighted round robin.  Each
   visit hands the UE up to ``credit`` RBGs (one RBG per credit); credits are
   refilled to the UE weights when every backlogged UE has run out.

Every grant is one transport block with its own HARQ process, so a UE may
get a retransmission and new data in the same slot.  RBGs are handed out in
index order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from .config import ScenarioConfig
from .deployment import EMBB, XR
from .frame import feedback_delay_slots, slot_format  # noqa: F401  (re-exported)
from .phy import McsEntry, n_cbg_for, split_even, tb_size_for_prbs
from .traffic import DlQueue, Segment

PENDING, ACKED, FAILED, LOST = 0, 1, 2, 3

TIER_RETX, TIER_XR, TIER_EMBB = 1, 2, 3


def rbg_sizes(n_prb: int, rbg_size_prb: int) -> list[int]:
    """PRBs per RBG; a remainder smaller than half an RBG is folded into the last one."""
    n_full, rem = divmod(n_prb, rbg_size_prb)
    sizes = [rbg_size_prb] * n_full
    if rem and (not sizes or rem * 2 < rbg_size_prb):
        if sizes:
            sizes[-1] += rem
        else:
            sizes.append(rem)
    elif rem:
        sizes.append(rem)
    return sizes


def map_segments_to_cbgs(segments: Sequence[Segment], cbg_bits: Sequence[int]) -> list[list[Segment]]:
    """Lay payload segments back to back over the CBGs; trailing capacity is padding."""
    if len(segments) == 1 and segments[0].frame is None and segments[0].n_bits == sum(cbg_bits):
        # full-buffer fast path: one filler segment per CBG
        out, start = [], segments[0].start
        for b in cbg_bits:
            out.append([Segment(None, start, b)])
            start += b
        return out
    out: list[list[Segment]] = [[] for _ in cbg_bits]
    i, room = 0, cbg_bits[0] if cbg_bits else 0
    for seg in segments:
        start, left = seg.start, seg.n_bits
        while left > 0:
            while room == 0:
                i += 1
                if i >= len(cbg_bits):
                    raise ValueError("payload exceeds transport block size")
                room = cbg_bits[i]
            take = min(left, room)
            out[i].append(Segment(seg.frame, start, take))
            start += take
            left -= take
            room -= take
    return out


@dataclass(eq=False)
class HarqProcess:
    process_id: int
    ue: int
    cell: int
    mcs: McsEntry
    cbg_bits: list[int]
    cbg_payload: list[list[Segment]]
    created_slot: int
    max_tx: int
    cbg_state: list[int] = field(default_factory=list)
    cbg_sinr_lin: list[float] = field(default_factory=list)
    tx_count: int = 0
    next_eligible_slot: int = -1
    last_tx_cbgs: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.cbg_state:
            self.cbg_state = [PENDING] * len(self.cbg_bits)
        if not self.cbg_sinr_lin:
            self.cbg_sinr_lin = [0.0] * len(self.cbg_bits)

    @property
    def n_cbg(self) -> int:
        return len(self.cbg_bits)

    def failed_cbgs(self) -> list[int]:
        return [i for i, s in enumerate(self.cbg_state) if s == FAILED]

    def retx_bits(self) -> int:
        return sum(self.cbg_bits[i] for i in self.failed_cbgs())

    def awaiting_retx(self) -> bool:
        return FAILED in self.cbg_state


@dataclass
class FeedbackResult:
    status: str                 # "done", "retx" or "dropped"
    acked: list[Segment]
    lost: list[Segment]
    first_tx_outcomes: list[bool] | None


def process_feedback(harq: HarqProcess, per_cbg_outcome: Sequence[bool], slot: int,
                     config: ScenarioConfig) -> FeedbackResult:
    """Apply the decode outcome of the latest (re)transmission sent in ``slot``.

    ``per_cbg_outcome`` lines up with ``harq.last_tx_cbgs``.
    """
    sent = harq.last_tx_cbgs
    if len(per_cbg_outcome) != len(sent):
        raise ValueError(f"expected {len(sent)} CBG outcomes, got {len(per_cbg_outcome)}")
    first = harq.tx_count == 1
    acked: list[Segment] = []
    for i, ok in zip(sent, per_cbg_outcome):
        if ok:
            harq.cbg_state[i] = ACKED
            acked.extend(harq.cbg_payload[i])
        else:
            harq.cbg_state[i] = FAILED
    lost: list[Segment] = []
    if not harq.awaiting_retx():
        status = "done"
    elif harq.tx_count >= harq.max_tx:
        status = "dropped"
        for i in harq.failed_cbgs():
            harq.cbg_state[i] = LOST
            lost.extend(harq.cbg_payload[i])
    else:
        status = "retx"
        harq.next_eligible_slot = slot + feedback_delay_slots(slot, config)
    return FeedbackResult(status, acked, lost, list(per_cbg_outcome) if first else None)


@dataclass
class Grant:
    ue: int
    tier: int
    rbgs: list[int]
    n_prb: int
    mcs: McsEntry
    harq: HarqProcess
    cbgs: tuple[int, ...]       # CBG indices carried
    tb_bits: int                # coded capacity of the carried CBGs
    payload_bits: int

    @property
    def is_retx(self) -> bool:
        return self.tier == TIER_RETX


@dataclass
class SchedulingDecision:
    slot: int
    cell: int
    grants: list[Grant]
    skipped_retx: list[tuple[int, int, int]]  # (ue, need_rbg, free_rbg) for retx that did not fit

    @property
    def n_prb(self) -> int:
        return sum(g.n_prb for g in self.grants)


class CellScheduler:
    def __init__(self, cell: int, ues: Sequence[int], kinds: Sequence[int],
                 queues: dict[int, DlQueue], config: ScenarioConfig, rbg_prbs: Sequence[int] | None = None):
        self.cell = cell
        self.config = config
        self.ues = list(ues)
        self.kind = dict(zip(self.ues, kinds))
        self.queues = queues
        w = config.scheduler
        self.weight = {u: (w.w_xr if self.kind[u] == XR else w.w_embb) for u in self.ues}
        self.credit = {u: 0 for u in self.ues}
        self.cursor = 0
        self.rbg_prbs = list(rbg_prbs) if rbg_prbs is not None else rbg_sizes(
            config.n_prb, config.scheduler.rbg_size_prb)
        self.harq: list[HarqProcess] = []
        self._next_pid = 0
        self.max_tx = 1 + config.harq.max_retx

    @property
    def n_rbg(self) -> int:
        return len(self.rbg_prbs)

    # -------------------------------------------------------- priority list
    def eligible_retx(self, slot: int) -> list[HarqProcess]:
        procs = [h for h in self.harq if 0 <= h.next_eligible_slot <= slot and FAILED in h.cbg_state]
        procs.sort(key=lambda h: (h.next_eligible_slot, h.process_id))
        return procs

    def build_priority_list(self, slot: int) -> list[tuple[int, object]]:
        """Candidates in service order: (tier, HarqProcess) then (tier, ue) from the WRR cursor."""
        out: list[tuple[int, object]] = [(TIER_RETX, h) for h in self.eligible_retx(slot)]
        n = len(self.ues)
        for k in range(n):
            u = self.ues[(self.cursor + k) % n]
            if self.queues[u]:
                out.append((TIER_XR if self.kind[u] == XR else TIER_EMBB, u))
        return out

    # -------------------------------------------------------- allocation
    def allocate(self, slot: int, mcs_of: dict[int, McsEntry] | Sequence[McsEntry]) -> SchedulingDecision:
        n_sym = slot_format(slot, self.config).data_symbols
        decision = SchedulingDecision(slot, self.cell, [], [])
        if n_sym == 0:
            return decision
        prbs = self.rbg_prbs
        free = list(range(len(prbs)))

        re_per_prb = 12 * n_sym
        for h in self.eligible_retx(slot):
            need = h.retx_bits()
            per_prb = re_per_prb * h.mcs.se_bits_per_re
            take, n_prb = 0, 0
            while take < len(free) and math.floor(n_prb * per_prb) < need:
                n_prb += prbs[free[take]]
                take += 1
            if math.floor(n_prb * per_prb) < need:
                decision.skipped_retx.append((h.ue, self._rbgs_needed(need, n_sym, h.mcs), len(free)))
                continue
            rbgs, free = free[:take], free[take:]
            cbgs = tuple(h.failed_cbgs())
            decision.grants.append(Grant(h.ue, TIER_RETX, rbgs, n_prb, h.mcs, h, cbgs, need,
                                         sum(s.n_bits for i in cbgs for s in h.cbg_payload[i])))

        if not free:
            return decision

        # remaining need in bits for the WRR phase
        need: dict[int, float] = {}
        bits_per_prb: dict[int, float] = {}
        for u in self.ues:
            q = self.queues[u]
            if not q:
                self.credit[u] = 0
                continue
            need[u] = q.pending_bits()
            bits_per_prb[u] = 12 * n_sym * mcs_of[u].se_bits_per_re
        if not need:
            return decision

        got: dict[int, list[int]] = {}
        order, credit, weight = self.ues, self.credit, self.weight
        n = len(order)
        fi, n_free = 0, len(free)   # RBGs are handed out in list order
        active = [u for u in need if need[u] > 0]
        while fi < n_free and active:
            if len(active) == 1:
                # sole contender: serve it directly, cycling its credit as the rounds would
                u = active[0]
                mine = got.setdefault(u, [])
                c, per_prb, left = credit[u], bits_per_prb[u], need[u]
                while fi < n_free and left > 0:
                    if c == 0:
                        c = weight[u]
                    r = free[fi]
                    fi += 1
                    mine.append(r)
                    c -= 1
                    left -= prbs[r] * per_prb
                credit[u], need[u] = c, left
                self.cursor = (order.index(u) + 1) % n
                break
            if not any(credit[u] for u in active):
                for u in active:
                    credit[u] = weight[u]
            u = order[self.cursor]
            self.cursor = (self.cursor + 1) % n
            if need.get(u, 0) <= 0 or credit[u] == 0:
                continue
            mine = got.setdefault(u, [])
            per_prb, c, left = bits_per_prb[u], credit[u], need[u]
            while fi < n_free and c > 0 and left > 0:
                r = free[fi]
                fi += 1
                mine.append(r)
                c -= 1
                left -= prbs[r] * per_prb
            credit[u], need[u] = c, left
            if left <= 0:
                active.remove(u)

        for u in self.ues:  # new-data grants in UE order, one TB each
            rbgs = got.get(u)
            if not rbgs:
                continue
            rbgs.sort()
            mcs = mcs_of[u]
            n_prb = sum(prbs[r] for r in rbgs)
            tb = tb_size_for_prbs(n_prb, n_sym, mcs)
            if tb <= 0:
                continue
            q = self.queues[u]
            segments = q.dequeue_bits(tb if q.full_buffer else min(tb, q.bits))
            n_cbg = n_cbg_for(tb, self.config.harq.n_cbg_per_tb, self.config.harq.max_cb_bits)
            cbg_bits = split_even(tb, n_cbg)
            h = HarqProcess(self._next_pid, u, self.cell, mcs, cbg_bits,
                            map_segments_to_cbgs(segments, cbg_bits), slot, self.max_tx)
            self._next_pid += 1
            self.harq.append(h)
            tier = TIER_XR if self.kind[u] == XR else TIER_EMBB
            decision.grants.append(Grant(u, tier, rbgs, n_prb, mcs, h, tuple(range(n_cbg)), tb,
                                         sum(s.n_bits for s in segments)))
        return decision

    def _rbgs_needed(self, bits: int, n_sym: int, mcs: McsEntry) -> int:
        n, n_prb = 0, 0
        while tb_size_for_prbs(n_prb, n_sym, mcs) < bits and mcs.se_bits_per_re > 0:
            n_prb += self.rbg_prbs[min(n, len(self.rbg_prbs) - 1)]
            n += 1
        return n

    def release(self, harq: HarqProcess) -> None:
        self.harq.remove(harq)


def allocate(cell_state: CellScheduler, slot: int, mcs_of) -> SchedulingDecision:
    return cell_state.allocate(slot, mcs_of)


def build_priority_list(cell_state: CellScheduler, slot: int):
    return cell_state.build_priority_list(slot)


__all__ = [
    "ACKED", "EMBB", "FAILED", "LOST", "PENDING", "TIER_EMBB", "TIER_RETX", "TIER_XR", "XR",
    "CellScheduler", "FeedbackResult", "Grant", "HarqProcess", "SchedulingDecision",
    "allocate", "build_priority_list", "feedback_delay_slots", "map_segments_to_cbgs",
    "process_feedback", "rbg_sizes", "slot_format",
]
