"""Run records to KPIs: frame latency, satisfaction, capacity, throughput, PRB use."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Iterable, Mapping, Sequence

import numpy as np

from .deployment import EMBB, XR
from .engine import FrameRecord, RunResult

SATISFIED_FRACTION = 0.99
CAPACITY_FRACTION = 0.90


def frame_latency_ms(record: FrameRecord, origin: str = "arrival") -> float:
    """Completion minus gNB arrival (or generation); undelivered frames are infinitely late."""
    if record.completion_time is None:
        return math.inf
    start = record.gen_time if origin == "generation" else record.arrival_time
    return record.completion_time - start


@dataclass
class UeStats:
    ue_id: int
    flow: str                   # "xr" or "embb"
    n_frames: int = 0
    n_on_time: int = 0
    latencies_ms: np.ndarray = field(default_factory=lambda: np.zeros(0))
    throughput_mbps: float = 0.0
    sinr_db: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def on_time(self, pdb_ms: float) -> int:
        return int(np.count_nonzero(self.latencies_ms <= pdb_ms))


def is_satisfied(ue: UeStats, pdb_ms: float | None = None) -> bool:
    """At least 99 % of frames delivered within the budget (closed deadline).

    Without ``pdb_ms`` the precomputed ``n_on_time`` is used.
    """
    if ue.n_frames < 1:
        raise ValueError("is_satisfied needs at least one frame")
    on_time = ue.n_on_time if pdb_ms is None else ue.on_time(pdb_ms)
    # integer form of on_time / n >= 0.99, free of float rounding
    return on_time * 100 >= 99 * ue.n_frames


def counted_frames(result: RunResult, ue: int, pdb_ms: float) -> list[FrameRecord]:
    """Frames that arrive after warm-up and whose deadline falls inside the run."""
    return [f for f in result.frames[ue]
            if f.arrival_time >= result.warmup_ms and f.arrival_time + pdb_ms <= result.end_ms]


def ue_stats(result: RunResult, pdb_ms: float) -> list[UeStats]:
    out = []
    window_s = result.window_ms / 1000.0
    for u in range(len(result.ue_kind)):
        kind = int(result.ue_kind[u])
        st = UeStats(u, "xr" if kind == XR else "embb",
                     throughput_mbps=result.delivered_bits[u] / window_s / 1e6 if window_s > 0 else 0.0,
                     sinr_db=result.sinr_db.get(u, np.zeros(0)))
        if kind == XR:
            lat = np.array([frame_latency_ms(f, result.latency_origin)
                            for f in counted_frames(result, u, pdb_ms)])
            st.latencies_ms = lat
            st.n_frames = len(lat)
            st.n_on_time = int(np.count_nonzero(lat <= pdb_ms))
        out.append(st)
    return out


def satisfied_fraction(results: Iterable[RunResult], pdb_ms: float) -> float:
    """Share of XR UEs satisfied, pooled over runs."""
    n = sat = 0
    for r in results:
        for st in ue_stats(r, pdb_ms):
            if st.flow == "xr" and st.n_frames:
                n += 1
                sat += is_satisfied(st)
    return sat / n if n else math.nan


@dataclass
class CapacityResult:
    fractions: dict[int, float]
    capacity: int


def xr_capacity(fractions: Mapping[int, float], threshold: float = CAPACITY_FRACTION) -> CapacityResult:
    """Largest N whose satisfied fraction reaches the threshold (0 if none)."""
    ok = [n for n, f in fractions.items() if f >= threshold - 1e-12]
    return CapacityResult(dict(sorted(fractions.items())), max(ok) if ok else 0)


def capacity_loss(cap_without: int, cap_with: int) -> float:
    """Relative capacity loss; 0 when the reference capacity is 0."""
    return 0.0 if cap_without <= 0 else 1.0 - cap_with / cap_without


def percentile(samples: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the ceil(p*n)-th smallest sample."""
    xs = sorted(samples)
    if not xs:
        raise ValueError("percentile of an empty sample")
    if not 0 < p < 1:
        raise ValueError("p must be in (0, 1)")
    k = max(1, math.ceil(p * len(xs) - 1e-12))
    return xs[k - 1]


def prb_utilization(prb_used, prb_available) -> float:
    """Granted over available PRB*slots, D/S slots only."""
    used, avail = float(np.sum(prb_used)), float(np.sum(prb_available))
    if avail <= 0:
        raise ValueError("no downlink slots observed")
    return used / avail


def embb_throughput_mbps(delivered_bits, window_ms: float) -> float:
    if window_ms <= 0:
        raise ValueError("window must be positive")
    return float(np.sum(delivered_bits)) / (window_ms * 1e3)


def embb_cell_throughput_mbps(result: RunResult) -> np.ndarray:
    """Per-cell eMBB throughput over the measurement window."""
    out = np.zeros(result.n_cells)
    for u in result.ues(EMBB):
        out[result.ue_cell[u]] += result.delivered_bits[u]
    return out / (result.window_ms * 1e3)


def binomial_ci(n: int, p_hat: float, confidence: float = 0.99) -> float:
    """Normal-approximation half-width of a binomial proportion."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= p_hat <= 1:
        raise ValueError("p_hat must be in [0, 1]")
    z = NormalDist().inv_cdf(0.5 + confidence / 2)
    return z * math.sqrt(p_hat * (1 - p_hat) / n)


def xr_latencies(results: Iterable[RunResult], pdb_ms: float = 0.0) -> np.ndarray:
    """Pooled latencies of counted XR frames (inf for undelivered)."""
    lat = [frame_latency_ms(f, r.latency_origin)
           for r in results for u in r.ues(XR) for f in counted_frames(r, u, pdb_ms)]
    return np.asarray(lat, dtype=float)


def pooled_sinr_db(results: Iterable[RunResult], kind: int | None = XR) -> np.ndarray:
    parts = [r.sinr_db[u] for r in results for u in range(len(r.ue_kind))
             if kind is None or r.ue_kind[u] == kind]
    return np.concatenate(parts) if parts else np.zeros(0)


# ------------------------------------------------------------ files

def write_frames_csv(result: RunResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ue", "seq", "arrival_ms", "completion_ms", "latency_ms", "size_bits"])
        for u in sorted(result.frames):
            for f in result.frames[u]:
                lat = frame_latency_ms(f, result.latency_origin)
                w.writerow([u, f.seq, f"{f.arrival_time:.6f}",
                            "" if f.completion_time is None else f"{f.completion_time:.6f}",
                            "inf" if math.isinf(lat) else f"{lat:.6f}", f.size_bits])


def write_ue_csv(result: RunResult, pdb_ms: float, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ue", "cell", "flow", "n_frames", "n_on_time", "satisfied",
                    "throughput_mbps", "median_sinr_db"])
        for st in ue_stats(result, pdb_ms):
            med = float(np.median(st.sinr_db)) if len(st.sinr_db) else math.nan
            sat = is_satisfied(st) if st.n_frames else ""
            w.writerow([st.ue_id, int(result.ue_cell[st.ue_id]), st.flow, st.n_frames, st.n_on_time,
                        sat, f"{st.throughput_mbps:.6f}", f"{med:.4f}"])
