"""Indoor-hotspot layout, UE drops and per-RBG SINR under cross-cell activity.

Propagation is a single-slope InH-style LOS law with log-normal shadowing and
an AR(1) block-fading process per link and RBG.  The serving link carries a
fixed beamforming gain; interfering links carry ``interference_gain_db``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ScenarioConfig

SPEED_OF_LIGHT = 299_792_458.0
THERMAL_NOISE_DBM_HZ = -174.0

XR, EMBB = 0, 1
KIND_NAMES = {XR: "xr", EMBB: "embb"}


class DropError(RuntimeError):
    """The equal-UEs-per-cell redrop did not converge."""


def path_gain_db(d3d_m, carrier_ghz: float, shadowing_db=0.0, beamforming_gain_db: float = 0.0):
    """Large-scale gain (negative loss) in dB; distances below 1 m are clamped."""
    d = np.maximum(np.asarray(d3d_m, dtype=float), 1.0)
    pl = 32.4 + 17.3 * np.log10(d) + 20.0 * math.log10(carrier_ghz)
    g = -pl - shadowing_db + beamforming_gain_db
    return float(g) if np.ndim(g) == 0 else g


def cell_positions(config: ScenarioConfig) -> np.ndarray:
    lay = config.layout
    xs = lay.hall_length_m / 2 + (np.arange(lay.n_cols) - (lay.n_cols - 1) / 2) * lay.isd_m
    ys = lay.hall_width_m / 2 + (np.arange(lay.n_rows) - (lay.n_rows - 1) / 2) * lay.isd_m
    return np.array([(x, y, lay.gnb_height_m) for y in ys for x in xs])


@dataclass
class Deployment:
    cell_pos: np.ndarray        # (n_cell, 3)
    ue_pos: np.ndarray          # (n_ue, 3)
    ue_kind: np.ndarray         # (n_ue,) XR or EMBB
    serving: np.ndarray         # (n_ue,) serving cell index
    shadowing_db: np.ndarray    # (n_ue, n_cell)
    pathgain_db: np.ndarray     # (n_ue, n_cell) geometry + shadowing, no antenna gain

    @property
    def n_cells(self) -> int:
        return len(self.cell_pos)

    @property
    def n_ues(self) -> int:
        return len(self.ue_pos)

    def ues_of_cell(self, cell: int) -> np.ndarray:
        return np.flatnonzero(self.serving == cell)

    def link_gain_db(self, config: ScenarioConfig) -> np.ndarray:
        """(n_ue, n_cell) gain including the serving/interfering antenna gains."""
        cal = config.calibration
        g = self.pathgain_db + cal.interference_gain_db
        rows = np.arange(self.n_ues)
        g[rows, self.serving] = self.pathgain_db[rows, self.serving] + cal.beamforming_gain_db
        return g

    def dump_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "id", "x_m", "y_m", "z_m", "serving_cell", "ue_type"])
            for c, (x, y, z) in enumerate(self.cell_pos):
                w.writerow(["cell", c, f"{x:.3f}", f"{y:.3f}", f"{z:.3f}", c, ""])
            for u, (x, y, z) in enumerate(self.ue_pos):
                w.writerow(["ue", u, f"{x:.3f}", f"{y:.3f}", f"{z:.3f}",
                            int(self.serving[u]), KIND_NAMES[int(self.ue_kind[u])]])


def generate_layout(config: ScenarioConfig, drop_rng: np.random.Generator,
                    shadow_rng: np.random.Generator) -> Deployment:
    """Place the cell grid and drop UEs until each cell holds its quota.

    A UE whose strongest cell is already full is redropped (new position and
    shadowing) up to ``layout.max_drop_attempts`` times.  XR and eMBB UEs
    draw from separate child streams, so the eMBB geometry of a seed does
    not move when the XR load changes (and vice versa).
    """
    lay = config.layout
    cells = cell_positions(config)
    n_cells = len(cells)
    quota = {XR: config.n_xr_ue_per_cell, EMBB: config.n_embb_ue_per_cell}
    remaining = {k: np.full(n_cells, q) for k, q in quota.items()}
    sigma = config.calibration.shadowing_std_db

    drop_rngs = dict(zip((XR, EMBB), drop_rng.spawn(2)))
    shadow_rngs = dict(zip((XR, EMBB), shadow_rng.spawn(2)))

    dropped = []  # (cell, kind, pos, shadowing)
    for kind in (XR, EMBB):
        drop_k, shadow_k = drop_rngs[kind], shadow_rngs[kind]
        for _ in range(quota[kind] * n_cells):
            for _attempt in range(lay.max_drop_attempts):
                pos = np.array([drop_k.uniform(0, lay.hall_length_m),
                                drop_k.uniform(0, lay.hall_width_m),
                                lay.ue_height_m])
                shadow = sigma * shadow_k.standard_normal(n_cells)
                d = np.linalg.norm(cells - pos, axis=1)
                best = int(np.argmax(path_gain_db(d, config.carrier_ghz, shadow)))
                if remaining[kind][best] > 0:
                    remaining[kind][best] -= 1
                    dropped.append((best, kind, pos, shadow))
                    break
            else:
                raise DropError(f"could not fill cell quotas after {lay.max_drop_attempts} redrops")

    dropped.sort(key=lambda t: (t[0], t[1]))
    if dropped:
        ue_pos = np.array([t[2] for t in dropped])
        shadowing = np.array([t[3] for t in dropped])
    else:
        ue_pos = np.zeros((0, 3))
        shadowing = np.zeros((0, n_cells))
    d = np.linalg.norm(ue_pos[:, None, :] - cells[None, :, :], axis=2)
    return Deployment(
        cell_pos=cells,
        ue_pos=ue_pos,
        ue_kind=np.array([t[1] for t in dropped], dtype=int),
        serving=np.array([t[0] for t in dropped], dtype=int),
        shadowing_db=shadowing,
        pathgain_db=path_gain_db(d, config.carrier_ghz, shadowing).reshape(d.shape),
    )


# ---------------------------------------------------------------- fading

def coherence_time_ms(speed_kmh: float, carrier_ghz: float) -> float:
    f_doppler = speed_kmh / 3.6 * carrier_ghz * 1e9 / SPEED_OF_LIGHT
    return math.inf if f_doppler == 0 else 0.423 / f_doppler * 1000.0


def fading_correlation(config: ScenarioConfig) -> float:
    """Lag-one (per slot) correlation of the block-fading process."""
    tc = coherence_time_ms(config.ue_speed_kmh, config.carrier_ghz)
    return math.exp(-config.slot_ms / tc)


class FadingField:
    """AR(1) log-normal block fading, one state per (ue, cell, rbg).

    :meth:`at` moves forward to a slot and returns the dB field; skipped
    slots are bridged in a single step with the matching lag correlation.
    """

    def __init__(self, shape: tuple[int, ...], rho: float, std_db: float,
                 rng: np.random.Generator):
        self.rho = rho
        self.std_db = std_db
        self._rng = rng
        self.slot = 0
        if std_db > 0:
            self.state = std_db * rng.standard_normal(shape, dtype=np.float32)
        else:
            self.state = np.zeros(shape, dtype=np.float32)
        self._noise = np.empty(shape, dtype=np.float32)

    def advance(self, steps: int = 1) -> np.ndarray:
        """Move ``steps`` slots ahead in one draw (exact for an AR(1) process)."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        self.slot += steps
        if self.std_db > 0:
            rho = self.rho ** steps
            self._rng.standard_normal(dtype=np.float32, out=self._noise)
            self._noise *= self.std_db * math.sqrt(max(0.0, 1.0 - rho * rho))
            self.state *= rho
            self.state += self._noise
        return self.state

    def at(self, slot: int) -> np.ndarray:
        if slot < self.slot:
            raise ValueError(f"fading field is at slot {self.slot}, cannot rewind to {slot}")
        if slot > self.slot:
            self.advance(slot - self.slot)
        return self.state


def fading_gain_db(field: FadingField, link: tuple[int, int], rbg: int, slot: int) -> float:
    ue, cell = link
    return float(field.at(slot)[ue, cell, rbg])


# ---------------------------------------------------------------- SINR

def noise_per_prb_mw(config: ScenarioConfig) -> float:
    bw_hz = 12 * config.scs_khz * 1e3
    dbm = THERMAL_NOISE_DBM_HZ + 10 * math.log10(bw_hz) + config.calibration.noise_figure_db
    return 10 ** (dbm / 10)


def tx_power_per_prb_mw(config: ScenarioConfig) -> float:
    return 10 ** (config.tx_power_dbm / 10) / config.n_prb


def sinr_matrix(rx_mw: np.ndarray, serving: np.ndarray, activity: np.ndarray,
                noise_mw: float) -> np.ndarray:
    """Linear SINR for every UE on every RBG.

    ``rx_mw`` is (n_ue, n_cell, n_rbg) received power per PRB, ``activity``
    is the (n_cell, n_rbg) ActivityMap.  The serving cell never counts as an
    interferer; its signal is assumed present (data or reference signal).
    """
    rows = np.arange(rx_mw.shape[0])
    signal = rx_mw[rows, serving, :]
    act = np.broadcast_to(activity.astype(rx_mw.dtype), rx_mw.shape).copy()
    act[rows, serving, :] = 0.0  # masked, not subtracted: avoids cancellation when S >> I
    interference = np.einsum("ucr,ucr->ur", rx_mw, act)
    return signal / (interference + noise_mw)


def sinr_db(ue: int, rbg: int, activity: np.ndarray, rx_mw: np.ndarray,
            serving: np.ndarray, noise_mw: float) -> float:
    s = rx_mw[ue, serving[ue], rbg]
    i = sum(rx_mw[ue, c, rbg] for c in range(activity.shape[0])
            if c != serving[ue] and activity[c, rbg])
    return 10 * math.log10(s / (i + noise_mw))
