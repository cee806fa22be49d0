"""Slot-by-slot multi-cell simulation.

Each D/S slot runs in two phases: every cell schedules from its own state,
then all receptions are evaluated against the resulting ActivityMap.  Timing
is quantized to slots:

* an XR frame can be scheduled from the first slot starting at least one gNB
  processing delay after its arrival;
* HARQ feedback and CQI ride the next U slot after the UE processing delay
  and are usable at the next D/S slot after the gNB processing delay;
* a frame is complete at the UE when its last CBG is decoded, i.e. at the
  end of the carrying slot plus the UE processing time.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import phy
from .config import ScenarioConfig, check
from .deployment import (
    EMBB, XR, Deployment, FadingField, fading_correlation, generate_layout,
    noise_per_prb_mw, tx_power_per_prb_mw,
)
from .frame import feedback_delays, slot_format
from .mac import TIER_RETX, CellScheduler, process_feedback, rbg_sizes
from .traffic import DlQueue, XrFrame, generate_frames

# independent RNG substreams, keyed by subsystem
STREAMS = {"drops": 0, "shadowing": 1, "fading": 2, "traffic": 3, "errors": 4, "phase": 5, "cqi": 6}


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS[name],)))


@dataclass
class FrameRecord:
    ue_id: int
    seq: int
    gen_time: float
    arrival_time: float
    completion_time: float | None
    size_bits: int


@dataclass
class RunResult:
    seed: int
    n_cells: int
    ue_kind: np.ndarray
    ue_cell: np.ndarray
    slot_ms: float
    warmup_ms: float
    end_ms: float
    frames: dict[int, list[FrameRecord]]       # XR UE -> records (all frames)
    delivered_bits: np.ndarray                  # per UE, acked payload after warm-up
    prb_used: np.ndarray                        # per cell, PRB*slots after warm-up
    prb_available: np.ndarray                   # per cell
    sinr_db: dict[int, np.ndarray]              # per UE, effective SINR per transmission
    first_tx_cbgs: int = 0
    first_tx_cbg_failures: int = 0
    max_tx_count: int = 0
    n_retx_grants: int = 0
    trace: list[dict] | None = None
    latency_origin: str = "arrival"             # clock start of frame latency

    @property
    def window_ms(self) -> float:
        return self.end_ms - self.warmup_ms

    def ues(self, kind: int) -> np.ndarray:
        return np.flatnonzero(self.ue_kind == kind)


def peak_throughput_mbps(config: ScenarioConfig) -> float:
    """Single-cell PHY ceiling at the top MCS over one TDD period."""
    top = phy.build_mcs_table(config.calibration.shannon_gap_db)[-1]
    period = len(config.tdd_pattern)
    bits = sum(phy.tb_size_for_prbs(config.n_prb, slot_format(s, config).data_symbols, top)
               for s in range(period))
    return bits / (period * config.slot_ms) / 1000.0


class Simulation:
    def __init__(self, config: ScenarioConfig, seed: int, trace: bool = False):
        self.config = config = check(config)
        self.seed = seed
        self.table = phy.build_mcs_table(config.calibration.shannon_gap_db)
        self.slot_ms = config.slot_ms
        self.n_slots = config.n_slots
        self.warmup = config.warmup_slots
        self.trace: list[dict] | None = [] if trace else None

        self.dep: Deployment = generate_layout(config, substream(seed, "drops"), substream(seed, "shadowing"))
        dep = self.dep
        n_ue, n_cell = dep.n_ues, dep.n_cells
        self.rbg_prbs = rbg_sizes(config.n_prb, config.scheduler.rbg_size_prb)
        n_rbg = len(self.rbg_prbs)
        self.n_rbg = n_rbg
        self.base_rx_mw = tx_power_per_prb_mw(config) * 10 ** (dep.link_gain_db(config) / 10)
        self.noise_mw = noise_per_prb_mw(config)
        self.fading = FadingField((n_ue, n_cell, n_rbg), fading_correlation(config),
                                  config.calibration.fading_std_db, substream(seed, "fading"))
        self.err_rng = substream(seed, "errors")
        cal = config.calibration
        self.irc_nulled = min(cal.irc_nulled, max(n_cell - 1, 0))
        self.irc_keep = 1.0 - 10 ** (-cal.irc_suppression_db / 10)  # removed share of a nulled interferer

        # traffic
        horizon = self.n_slots * self.slot_ms
        traffic_rng = substream(seed, "traffic")
        phase_rng = substream(seed, "phase")
        flow = config.xr_flow
        period = 1000.0 / flow.fps
        gnb_proc_ms = config.gnb_tx_proc_symbols / config.symbols_per_slot * self.slot_ms
        self.queues: dict[int, DlQueue] = {}
        self.frames: dict[int, list[XrFrame]] = {}
        self.frame_slots: dict[int, list[int]] = {}
        self.frame_ptr: dict[int, int] = {}
        for u in range(n_ue):
            if dep.ue_kind[u] == XR:
                start = float(phase_rng.uniform(0, period)) if flow.random_phase else 0.0
                fr = generate_frames(flow, horizon, traffic_rng, flow_id=u, start_ms=start)
                self.frames[u] = fr
                self.frame_slots[u] = [max(0, math.ceil((f.arrival_time + gnb_proc_ms) / self.slot_ms - 1e-9))
                                       for f in fr]
                self.frame_ptr[u] = 0
                self.queues[u] = DlQueue()
            else:
                self.queues[u] = DlQueue(full_buffer=True)

        self.cells = [
            CellScheduler(c, dep.ues_of_cell(c).tolist(), dep.ue_kind[dep.ues_of_cell(c)].tolist(),
                          self.queues, config, self.rbg_prbs)
            for c in range(n_cell)
        ]

        # link adaptation
        olla = phy.OllaState.from_config(config)
        self.olla_params = (olla.step_down_db, olla.step_up_db, olla.limit_db)
        self.olla_offset = np.full(n_ue, olla.offset_db)
        self.mcs_thresholds = np.array([m.snr_10pct_db for m in self.table])
        self.fb_delay = feedback_delays(config)
        self.olla_freeze = config.la.olla_freeze_at_ceiling
        self.top_mcs = self.table[-1].index
        self.n_sym = [slot_format(s, config).data_symbols for s in range(len(config.tdd_pattern))]
        cqi_rng = substream(seed, "cqi")
        self.cqi_period = config.cqi_period_slots
        self.cqi_phase = cqi_rng.integers(0, self.cqi_period, size=n_ue) if n_ue else np.zeros(0, int)
        self.cqi_db = np.zeros(n_ue)
        self.cqi_pending: dict[int, list[phy.CqiReport]] = {}
        self.olla_events: dict[int, list[tuple[int, list[bool]]]] = {}
        self.last_dl_sinr: np.ndarray | None = None

        # accumulators
        self.delivered = np.zeros(n_ue)
        self.prb_used = np.zeros(n_cell)
        self.prb_avail = np.zeros(n_cell)
        self.sinr_samples: dict[int, list[float]] = {u: [] for u in range(n_ue)}
        self.first_cbgs = 0
        self.first_fail = 0
        self.max_tx = 0
        self.n_retx = 0
        self.ue_done_ms = config.ue_rx_proc_symbols / config.symbols_per_slot * self.slot_ms

        if n_ue:
            self._initial_cqi()

    # ------------------------------------------------------------ helpers
    def _rx_mw(self, rows: np.ndarray | slice) -> np.ndarray:
        fad = self.fading.state[rows]
        base = self.base_rx_mw[rows][:, :, None].astype(np.float32)
        if self.fading.std_db > 0:
            return base * np.exp(fad * np.float32(math.log(10) / 10))
        return np.broadcast_to(base, fad.shape)

    def _sinr_rows(self, rows: np.ndarray, activity: np.ndarray) -> np.ndarray:
        rx = self._rx_mw(rows)
        serving = self.dep.serving[rows]
        idx = np.arange(len(rows))
        signal = rx[idx, serving, :]
        seen = rx * activity[None, :, :]
        seen[idx, serving, :] = 0.0
        interf = seen.sum(axis=1)
        k = self.irc_nulled
        if k:
            top = -np.partition(-seen, k - 1, axis=1)[:, :k, :] if k < seen.shape[1] else seen
            interf = interf - self.irc_keep * top.sum(axis=1)
        return signal / (np.maximum(interf, 0.0) + self.noise_mw)

    def _wideband_db(self, sinr_lin: np.ndarray) -> np.ndarray:
        cap = np.log2(1.0 + sinr_lin).mean(axis=1)
        return 10 * np.log10(np.maximum(2.0 ** cap - 1.0, 1e-30))

    def _initial_cqi(self) -> None:
        # before the first report: a full-load measurement
        rows = np.arange(self.dep.n_ues)
        full = np.ones((self.dep.n_cells, self.n_rbg))
        wb = self._wideband_db(self._sinr_rows(rows, full))
        q = self.config.la.cqi_quant_db
        self.cqi_db = np.floor(wb / q) * q

    # ------------------------------------------------------------ main loop
    def run(self) -> RunResult:
        for t in range(self.n_slots):
            self.step(t)
        return self.result()

    def step(self, t: int) -> None:
        cfg = self.config
        for ue, outcomes in self.olla_events.pop(t, ()):
            self.olla_offset[ue] = phy.olla_step(float(self.olla_offset[ue]), outcomes, *self.olla_params)
        for rep in self.cqi_pending.pop(t, ()):
            self.cqi_db[rep.ue_id] = rep.wideband_sinr_db
        measure = t >= self.warmup
        n_sym = self.n_sym[t % len(self.n_sym)]
        cqi_ues = np.flatnonzero((t - self.cqi_phase) % self.cqi_period == 0)

        if n_sym == 0:
            if len(cqi_ues) and self.last_dl_sinr is not None:
                self._report_cqi(t, cqi_ues, self.last_dl_sinr[cqi_ues])
            return

        self.fading.at(t)  # only DL slots need a fresh channel
        for u, slots in self.frame_slots.items():
            p = self.frame_ptr[u]
            fr = self.frames[u]
            while p < len(fr) and slots[p] <= t:
                self.queues[u].push(fr[p])
                p += 1
            self.frame_ptr[u] = p

        table = self.table
        idx = np.searchsorted(self.mcs_thresholds, self.cqi_db + self.olla_offset, side="right") - 1
        mcs_of = [table[i] for i in np.maximum(idx, 0).tolist()]

        decisions = [cell.allocate(t, mcs_of) for cell in self.cells]
        activity = np.zeros((self.dep.n_cells, self.n_rbg))
        for d in decisions:
            for g in d.grants:
                activity[d.cell, g.rbgs] = 1.0

        # CQI is measured by every UE every DL slot (cheap) and kept for U slots
        all_rows = np.arange(self.dep.n_ues)
        sinr = self._sinr_rows(all_rows, activity)
        self.last_dl_sinr = sinr

        grants = [(d.cell, g) for d in decisions for g in d.grants]
        if grants:
            self._receive(t, grants, sinr, measure)
        for d in decisions:
            if measure:
                self.prb_used[d.cell] += d.n_prb
                self.prb_avail[d.cell] += cfg.n_prb
            if self.trace is not None:
                self.trace.append(dict(
                    slot=t, cell=d.cell, event="decision", tiers=tuple(g.tier for g in d.grants),
                    free_rbg=self.n_rbg - sum(len(g.rbgs) for g in d.grants)))
                for ue, need, free in d.skipped_retx:
                    self.trace.append(dict(slot=t, cell=d.cell, ue=ue, tier=TIER_RETX, event="skipped",
                                           need_rbg=need, free_rbg=free))

        if len(cqi_ues):
            self._report_cqi(t, cqi_ues, sinr[cqi_ues])

    def _report_cqi(self, t: int, ues: np.ndarray, sinr_rows: np.ndarray) -> None:
        wb = self._wideband_db(sinr_rows)
        for u, s in zip(ues.tolist(), wb.tolist()):
            rep = phy.make_cqi(u, t, s, self.config)
            self.cqi_pending.setdefault(rep.slot_available, []).append(rep)

    def _receive(self, t: int, grants: list, sinr: np.ndarray, measure: bool) -> None:
        """Decode every grant of slot ``t`` against the per-RBG SINR matrix."""
        n = len(grants)
        mask = np.zeros((n, self.n_rbg))
        ues = np.empty(n, dtype=int)
        for k, (_, g) in enumerate(grants):
            mask[k, g.rbgs] = 1.0
            ues[k] = g.ue
        cap = (np.log2(1.0 + sinr[ues]) * mask).sum(axis=1) / mask.sum(axis=1)
        effs = (2.0 ** cap - 1.0).tolist()

        # Chase combining per CBG, then one logistic draw per CBG
        slope = self.config.calibration.blep_slope
        combined, mids = [], []
        for (_, g), eff in zip(grants, effs):
            h = g.harq
            mid = h.mcs.snr_10pct_db - phy.LN9 / slope
            acc = h.cbg_sinr_lin
            for i in g.cbgs:
                acc[i] += eff
                combined.append(acc[i])
                mids.append(mid)
        comb_db = 10 * np.log10(np.asarray(combined))
        arg = np.clip(slope * (comb_db - np.asarray(mids)), -700, 700)
        p_err = 1.0 / (1.0 + np.exp(arg))
        ok_all = (self.err_rng.random(len(combined)) >= p_err).tolist()
        comb_db = comb_db.tolist()

        pos = 0
        for (cell, g), eff in zip(grants, effs):
            k = len(g.cbgs)
            self._finish(t, cell, g, eff, ok_all[pos:pos + k], comb_db[pos:pos + k], measure)
            pos += k

    def _finish(self, t: int, cell: int, g, eff: float, outcomes: list[bool],
                combined: list[float], measure: bool) -> None:
        h = g.harq
        eff_db = 10 * math.log10(eff)
        h.tx_count += 1
        h.last_tx_cbgs = g.cbgs
        if h.tx_count > self.max_tx:
            self.max_tx = h.tx_count
        if g.is_retx:
            self.n_retx += 1
        fb = process_feedback(h, outcomes, t, self.config)

        if self.trace is not None:
            self.trace.append(dict(
                slot=t, cell=cell, ue=g.ue, tier=g.tier, event="grant", process=(cell, h.process_id),
                rbg_start=g.rbgs[0], rbg_count=len(g.rbgs), mcs=h.mcs.index,
                retx=g.is_retx, tx_count=h.tx_count, cbgs=g.cbgs, cbg_bits=tuple(h.cbg_bits[i] for i in g.cbgs),
                eff_sinr_lin=eff,
                combined_db=tuple(combined), outcomes=tuple(outcomes), status=fb.status,
            ))

        if fb.first_tx_outcomes is not None:
            ready = t + self.fb_delay[t % len(self.fb_delay)]
            outcomes_fb = fb.first_tx_outcomes
            if self.olla_freeze and h.mcs.index == self.top_mcs:
                # at the ceiling a pass says nothing about spare margin; only failures count
                outcomes_fb = [ok for ok in outcomes_fb if not ok]
            if outcomes_fb:
                self.olla_events.setdefault(ready, []).append((g.ue, outcomes_fb))
            if measure:
                self.first_cbgs += len(outcomes)
                self.first_fail += outcomes.count(False)
        if measure:
            self.sinr_samples[g.ue].append(eff_db)

        done_ms = (t + 1) * self.slot_ms + self.ue_done_ms
        for seg in fb.acked:
            f = seg.frame
            if f is None:
                if measure:
                    self.delivered[g.ue] += seg.n_bits
                continue
            f.delivered_bits += seg.n_bits
            if measure and f.arrival_time >= self.warmup * self.slot_ms:
                self.delivered[g.ue] += seg.n_bits
            if f.delivered_bits == f.size_bits:
                f.completion_time = done_ms
        for seg in fb.lost:
            if seg.frame is not None:
                seg.frame.lost_bits += seg.n_bits
        if fb.status != "retx":
            self.cells[cell].release(h)

    # ------------------------------------------------------------ output
    def result(self) -> RunResult:
        dep = self.dep
        return RunResult(
            seed=self.seed,
            n_cells=dep.n_cells,
            ue_kind=dep.ue_kind.copy(),
            ue_cell=dep.serving.copy(),
            slot_ms=self.slot_ms,
            warmup_ms=self.warmup * self.slot_ms,
            end_ms=self.n_slots * self.slot_ms,
            frames={u: [FrameRecord(u, f.seq, f.gen_time, f.arrival_time, f.completion_time, f.size_bits)
                        for f in sorted(fr, key=lambda f: f.seq)]
                    for u, fr in self.frames.items()},
            delivered_bits=self.delivered.copy(),
            prb_used=self.prb_used.copy(),
            prb_available=self.prb_avail.copy(),
            sinr_db={u: np.asarray(s) for u, s in self.sinr_samples.items()},
            first_tx_cbgs=self.first_cbgs,
            first_tx_cbg_failures=self.first_fail,
            max_tx_count=self.max_tx,
            n_retx_grants=self.n_retx,
            trace=self.trace,
            latency_origin=self.config.xr_flow.latency_origin,
        )


def run(config: ScenarioConfig, seed: int | None = None, trace: bool = False) -> RunResult:
    return Simulation(config, config.rng_seed if seed is None else seed, trace=trace).run()


def _run_star(args):
    return run(*args)


def run_campaign(config: ScenarioConfig, n_runs: int | None = None, base_seed: int | None = None,
                 parallel: int = 1) -> list[RunResult]:
    """Independent runs with seeds ``base_seed+1 .. base_seed+n_runs``, in seed order."""
    n_runs = config.n_runs if n_runs is None else n_runs
    base_seed = config.rng_seed if base_seed is None else base_seed
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    jobs = [(config, base_seed + k) for k in range(1, n_runs + 1)]
    if parallel > 1 and n_runs > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_run_star, jobs))
    return [_run_star(j) for j in jobs]
