"""TDD slot geometry and feedback timing on a slot-quantized clock.

Processing delays given in OFDM symbols are rounded up to whole slots.  UE
feedback (HARQ-ACK, CQI) can only ride on a U slot; the gNB can act on it
once its own processing delay has elapsed, at the next D or S slot.
"""
from __future__ import annotations

import math
from functools import lru_cache
from typing import NamedTuple

from .config import ScenarioConfig


class SlotFormat(NamedTuple):
    kind: str           # "D", "S" or "U"
    data_symbols: int   # usable PDSCH symbols


def slot_format(slot: int, config: ScenarioConfig) -> SlotFormat:
    kind = config.tdd_pattern[slot % len(config.tdd_pattern)]
    if kind == "D":
        return SlotFormat("D", config.symbols_per_slot - config.pdcch_symbols)
    if kind == "S":
        return SlotFormat("S", config.special_slot_dl_symbols - config.pdcch_symbols)
    return SlotFormat("U", 0)


def dl_symbols_per_period(config: ScenarioConfig) -> int:
    return sum(slot_format(s, config).data_symbols for s in range(len(config.tdd_pattern)))


def _next_slot_of(kinds: str, start: int, config: ScenarioConfig) -> int:
    s = start
    while config.tdd_pattern[s % len(config.tdd_pattern)] not in kinds:
        s += 1
    return s


def uplink_slot_for(slot: int, config: ScenarioConfig) -> int:
    """U slot carrying feedback for a reception (or measurement) in ``slot``."""
    ue_delay = math.ceil(config.ue_rx_proc_symbols / config.symbols_per_slot)
    return _next_slot_of("U", slot + max(1, ue_delay), config)


def gnb_ready_slot(ul_slot: int, config: ScenarioConfig) -> int:
    gnb_delay = math.ceil(config.gnb_tx_proc_symbols / config.symbols_per_slot)
    return _next_slot_of("DS", ul_slot + max(1, gnb_delay), config)


@lru_cache(maxsize=64)
def _delay_table(pattern: str, ue_syms: float, gnb_syms: float, sym_per_slot: int) -> tuple[int, ...]:
    ue_delay = max(1, math.ceil(ue_syms / sym_per_slot))
    gnb_delay = max(1, math.ceil(gnb_syms / sym_per_slot))
    n = len(pattern)

    def nxt(kinds, s):
        while pattern[s % n] not in kinds:
            s += 1
        return s

    return tuple(nxt("DS", nxt("U", p + ue_delay) + gnb_delay) - p for p in range(n))


def feedback_delays(config: ScenarioConfig) -> tuple[int, ...]:
    """Per pattern position, slots until feedback for that slot is usable."""
    return _delay_table(config.tdd_pattern, config.ue_rx_proc_symbols,
                        config.gnb_tx_proc_symbols, config.symbols_per_slot)


def feedback_delay_slots(tx_slot: int, config: ScenarioConfig) -> int:
    """Slots from a DL transmission until a retransmission may be scheduled."""
    return feedback_delays(config)[tx_slot % len(config.tdd_pattern)]


def report_ready_slot(slot: int, config: ScenarioConfig) -> int:
    """First slot at which the gNB can use feedback sent for ``slot``."""
    return slot + feedback_delay_slots(slot, config)
