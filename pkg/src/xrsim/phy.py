"""Link abstraction: effective SINR, CQI, MCS selection with OLLA, TBS and BLEP.

The decoder model is an anchored logistic in dB per MCS: each entry's
10 %-BLEP point sits a fixed Shannon gap above the SINR whose capacity equals
the MCS spectral efficiency.
"""
from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .config import ScenarioConfig
from .frame import report_ready_slot

LN9 = math.log(9.0)

# NR 256QAM MCS table (TS 38.214 table 5.1.3.1-2): (Qm, target rate x 1024, SE)
_MCS_256QAM = [
    (2, 120, 0.2344), (2, 193, 0.3770), (2, 308, 0.6016), (2, 449, 0.8770),
    (2, 602, 1.1758), (4, 378, 1.4766), (4, 434, 1.6953), (4, 490, 1.9141),
    (4, 553, 2.1602), (4, 616, 2.4063), (4, 658, 2.5703), (6, 466, 2.7305),
    (6, 517, 3.0293), (6, 567, 3.3223), (6, 616, 3.6094), (6, 666, 3.9023),
    (6, 719, 4.2129), (6, 772, 4.5234), (6, 822, 4.8164), (6, 873, 5.1152),
    (8, 682.5, 5.3320), (8, 711, 5.5547), (8, 754, 5.8906), (8, 797, 6.2266),
    (8, 841, 6.5703), (8, 885, 6.9141), (8, 916.5, 7.1602), (8, 948, 7.4063),
]


@dataclass(frozen=True)
class McsEntry:
    index: int
    modulation_order: int
    code_rate: float
    se_bits_per_re: float
    snr_10pct_db: float


def build_mcs_table(shannon_gap_db: float = 2.0) -> list[McsEntry]:
    table = []
    for i, (qm, r, se) in enumerate(_MCS_256QAM):
        snr10 = 10 * math.log10(2.0 ** se - 1.0) + shannon_gap_db
        table.append(McsEntry(i, qm, r / 1024, se, snr10))
    return table


MCS_TABLE = build_mcs_table()


def dump_mcs_table(table: Sequence[McsEntry], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "qm", "code_rate", "se_bits_per_re", "snr_10pct_db"])
        for m in table:
            w.writerow([m.index, m.modulation_order, f"{m.code_rate:.4f}",
                        f"{m.se_bits_per_re:.4f}", f"{m.snr_10pct_db:.3f}"])


# ------------------------------------------------------------ SINR mapping

def db2lin(x: float) -> float:
    return 10.0 ** (x / 10.0)


def lin2db(x: float) -> float:
    return 10.0 * math.log10(x)


def effective_sinr_db(per_rbg_sinrs_db: Iterable[float]) -> float:
    """Capacity-domain effective SINR: 2**mean(log2(1+g)) - 1."""
    vals = list(per_rbg_sinrs_db)
    if not vals:
        raise ValueError("effective_sinr_db needs at least one SINR")
    mean_cap = sum(math.log2(1.0 + db2lin(v)) for v in vals) / len(vals)
    return lin2db(2.0 ** mean_cap - 1.0)


def effective_sinr_lin(sinrs_lin: Sequence[float]) -> float:
    """Same mapping as :func:`effective_sinr_db`, linear in and out."""
    mean_cap = sum(math.log2(1.0 + g) for g in sinrs_lin) / len(sinrs_lin)
    return 2.0 ** mean_cap - 1.0


def combine_chase(sinr_list_db: Iterable[float]) -> float:
    vals = list(sinr_list_db)
    if not vals:
        raise ValueError("combine_chase needs at least one SINR")
    return lin2db(sum(db2lin(v) for v in vals))


def blep(effective_sinr_db: float, mcs: McsEntry, n_prior_tx: int = 0, slope: float = 2.0) -> float:
    """Block error probability of one code block group.

    The SINR passed in already contains any Chase-combining gain, so
    ``n_prior_tx`` does not shift the curve.
    """
    if n_prior_tx < 0:
        raise ValueError("n_prior_tx must be >= 0")
    mid = mcs.snr_10pct_db - LN9 / slope
    x = slope * (effective_sinr_db - mid)
    if x > 700:
        return 0.0
    if x < -700:
        return 1.0
    return 1.0 / (1.0 + math.exp(x))


# ------------------------------------------------------------ CQI / OLLA

@dataclass(frozen=True)
class CqiReport:
    ue_id: int
    slot_measured: int
    slot_available: int
    wideband_sinr_db: float


def quantize_cqi(sinr_db: float, step_db: float = 1.0) -> float:
    return math.floor(sinr_db / step_db) * step_db


def is_cqi_slot(ue_phase: int, slot: int, period_slots: int) -> bool:
    return (slot - ue_phase) % period_slots == 0


def make_cqi(ue: int, slot: int, measured_sinr_db: float, config: ScenarioConfig) -> CqiReport:
    available = report_ready_slot(slot, config)
    return CqiReport(ue, slot, available, quantize_cqi(measured_sinr_db, config.la.cqi_quant_db))


@dataclass
class OllaState:
    offset_db: float = 0.0
    step_down_db: float = 0.1   # applied (+) per passed CBG
    step_up_db: float = 0.3     # applied (-) per failed CBG
    limit_db: float = 10.0

    @classmethod
    def from_config(cls, config: ScenarioConfig) -> "OllaState":
        la = config.la
        return cls(la.olla_initial_db, la.olla_step_down_db,
                   la.olla_step_up_db(config.olla_target), la.olla_offset_limit_db)


def olla_step(offset_db: float, cbg_results: Iterable[bool], step_down_db: float,
              step_up_db: float, limit_db: float) -> float:
    for ok in cbg_results:
        offset_db += step_down_db if ok else -step_up_db
        offset_db = min(limit_db, max(-limit_db, offset_db))
    return offset_db


def olla_update(olla: OllaState, cbg_results: Iterable[bool]) -> OllaState:
    """Apply first-transmission CBG outcomes (True = decoded) to the offset."""
    offset = olla_step(olla.offset_db, cbg_results, olla.step_down_db, olla.step_up_db, olla.limit_db)
    return replace(olla, offset_db=offset)


def select_mcs(cqi_sinr_db: float | CqiReport, olla: OllaState | float,
               table: Sequence[McsEntry] = MCS_TABLE) -> McsEntry:
    """Highest MCS whose 10 %-BLEP SINR does not exceed CQI + OLLA offset."""
    sinr = cqi_sinr_db.wideband_sinr_db if isinstance(cqi_sinr_db, CqiReport) else cqi_sinr_db
    offset = olla.offset_db if isinstance(olla, OllaState) else olla
    thresholds = [m.snr_10pct_db for m in table]
    idx = bisect.bisect_right(thresholds, sinr + offset) - 1
    return table[max(0, idx)]


# ------------------------------------------------------------ sizes

def tb_size_bits(n_rbg: int, n_data_symbols: int, mcs: McsEntry, rbg_size_prb: int = 16) -> int:
    return tb_size_for_prbs(n_rbg * rbg_size_prb, n_data_symbols, mcs)


def tb_size_for_prbs(n_prb: int, n_data_symbols: int, mcs: McsEntry) -> int:
    return math.floor(n_prb * 12 * n_data_symbols * mcs.se_bits_per_re)


def n_cbg_for(tb_bits: int, max_cbg: int = 8, max_cb_bits: int = 8448) -> int:
    return max(1, min(max_cbg, math.ceil(tb_bits / max_cb_bits)))


def split_even(total: int, parts: int) -> list[int]:
    """``total`` split into ``parts`` near-equal integers (larger ones first)."""
    q, r = divmod(total, parts)
    return [q + 1 if i < r else q for i in range(parts)]
