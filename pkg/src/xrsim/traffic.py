"""XR frame arrivals and downlink queues (FIFO XR, full-buffer eMBB)."""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .config import TruncGaussParams, XrFlowConfig


def sample_trunc_gauss(params: TruncGaussParams, rng: np.random.Generator, size: int | None = None):
    """Gaussian(mean, std) conditioned on [min, max], by rejection."""
    n = 1 if size is None else int(size)
    out = np.empty(n)
    filled = 0
    while filled < n:
        need = n - filled
        draw = rng.normal(params.mean, params.std, size=max(need + need // 4, 8))
        ok = draw[(draw >= params.min) & (draw <= params.max)][:need]
        out[filled:filled + len(ok)] = ok
        filled += len(ok)
    return float(out[0]) if size is None else out


def offered_load_mbps(flow: XrFlowConfig) -> float:
    return flow.frame_size.mean * 1000 * 8 * flow.fps / 1e6


@dataclass(eq=False)
class XrFrame:
    flow_id: int
    seq: int
    gen_time: float        # ms
    arrival_time: float    # ms, at the gNB
    size_bits: int
    deadline: float        # ms, arrival + PDB
    remaining_bits: int = -1     # not yet handed to a transport block
    delivered_bits: int = 0      # acked at the UE
    lost_bits: int = 0           # dropped after HARQ exhaustion
    completion_time: float | None = None

    def __post_init__(self):
        if self.remaining_bits < 0:
            self.remaining_bits = self.size_bits

    @property
    def complete(self) -> bool:
        return self.delivered_bits == self.size_bits


def generate_frames(flow: XrFlowConfig, horizon_ms: float, rng: np.random.Generator,
                    flow_id: int = 0, start_ms: float = 0.0) -> list[XrFrame]:
    """Frames generated in ``[0, horizon_ms)``, sorted by gNB arrival.

    Frame ``k`` is generated at ``start_ms + k*1000/fps``; its arrival adds a
    truncated-Gaussian jitter and its size is a truncated-Gaussian number of
    kB rounded to whole bytes.
    """
    period = 1000.0 / flow.fps
    n = max(0, math.ceil((horizon_ms - start_ms) / period - 1e-9))
    if n == 0:
        return []
    gen = start_ms + np.arange(n) * period
    jitter = sample_trunc_gauss(flow.jitter, rng, n)
    size_bytes = np.rint(sample_trunc_gauss(flow.frame_size, rng, n) * 1000).astype(int)
    frames = [
        XrFrame(flow_id, k, float(gen[k]), float(gen[k] + jitter[k]), int(size_bytes[k]) * 8,
                float(gen[k] + jitter[k] + flow.pdb_ms))
        for k in range(n)
    ]
    frames.sort(key=lambda f: f.arrival_time)
    return frames


def export_arrivals(frames: Iterable[XrFrame], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["flow", "seq", "gen_time_ms", "arrival_time_ms", "size_bits"])
        for f in frames:
            w.writerow([f.flow_id, f.seq, f"{f.gen_time:.6f}", f"{f.arrival_time:.6f}", f.size_bits])


class Segment(NamedTuple):
    """Bits ``[start, start+n_bits)`` of ``frame``; ``frame`` is None for full-buffer payload."""

    frame: XrFrame | None
    start: int
    n_bits: int


class DlQueue:
    """Per-UE downlink buffer.

    XR queues hold frames in arrival order and are drained from the head of
    line across frame boundaries.  A full-buffer queue is never empty.
    """

    def __init__(self, full_buffer: bool = False):
        self.full_buffer = full_buffer
        self.frames: deque[XrFrame] = deque()
        self.bits = 0

    def push(self, frame: XrFrame) -> None:
        if self.frames and frame.arrival_time < self.frames[-1].arrival_time:
            raise ValueError("frames must be pushed in arrival order")
        self.frames.append(frame)
        self.bits += frame.remaining_bits

    def pending_bits(self) -> float:
        return math.inf if self.full_buffer else self.bits

    def __bool__(self) -> bool:
        return self.full_buffer or self.bits > 0

    def dequeue_bits(self, n_bits: int) -> list[Segment]:
        if n_bits <= 0:
            raise ValueError("n_bits must be positive")
        if self.full_buffer:
            return [Segment(None, 0, int(n_bits))]
        segments = []
        left = n_bits
        while left > 0 and self.frames:
            head = self.frames[0]
            start = head.size_bits - head.remaining_bits
            take = min(left, head.remaining_bits)
            segments.append(Segment(head, start, take))
            head.remaining_bits -= take
            self.bits -= take
            left -= take
            if head.remaining_bits == 0:
                self.frames.popleft()
        return segments


def dequeue_bits(queue: DlQueue, n_bits: int) -> list[Segment]:
    return queue.dequeue_bits(n_bits)
