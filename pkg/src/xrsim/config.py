"""Scenario parameters, defaults and the flat ``key = value`` config format.

Config files are UTF-8 text, one assignment per line::

    # 45 Mbps dual-eye VR, tight budget
    n_xr_ue_per_cell = 4
    xr_flow.sdr_mbps = 45
    xr_flow.frame_size.mean = 93.75
    xr_flow.pdb_ms = 10

Keys are dotted paths into :class:`ScenarioConfig`.  Values are ints,
floats, ``true``/``false`` or bare/quoted strings.  Blank lines and ``#``
comments are ignored.  Anything not set keeps its default.
"""
from __future__ import annotations

import ast
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Malformed config text, unknown key or failed validation."""


@dataclass(frozen=True)
class TruncGaussParams:
    mean: float
    std: float
    min: float
    max: float


@dataclass(frozen=True)
class XrFlowConfig:
    fps: float = 60.0
    sdr_mbps: float = 30.0
    frame_size: TruncGaussParams = TruncGaussParams(62.5, 6.25, 31.25, 93.75)  # kB
    jitter: TruncGaussParams = TruncGaussParams(0.0, 2.0, -4.0, 4.0)  # ms
    pdb_ms: float = 10.0
    # uniform per-UE frame phase within one period; False aligns all flows at t=0
    random_phase: bool = True
    # latency clock origin: "arrival" (gNB arrival) or "generation"
    latency_origin: str = "arrival"


@dataclass(frozen=True)
class SchedulerConfig:
    w_xr: int = 20
    w_embb: int = 1
    rbg_size_prb: int = 16


@dataclass(frozen=True)
class HarqConfig:
    max_retx: int = 3
    n_cbg_per_tb: int = 8
    target_failed_cbg: int = 2
    max_cb_bits: int = 8448


@dataclass(frozen=True)
class LinkAdaptationConfig:
    cqi_quant_db: float = 1.0
    olla_step_down_db: float = 0.1
    olla_offset_limit_db: float = 10.0
    olla_initial_db: float = 0.0
    olla_freeze_at_ceiling: bool = True  # passes at the top MCS do not raise the offset

    def olla_step_up_db(self, target: float) -> float:
        return self.olla_step_down_db * (1.0 - target) / target


@dataclass(frozen=True)
class LayoutConfig:
    hall_length_m: float = 120.0
    hall_width_m: float = 50.0
    n_rows: int = 2
    n_cols: int = 6
    isd_m: float = 20.0
    gnb_height_m: float = 3.0
    ue_height_m: float = 1.5
    max_drop_attempts: int = 10000

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols


@dataclass(frozen=True)
class CalibrationConfig:
    """Knobs standing in for the unavailable calibrated channel and link tables."""

    beamforming_gain_db: float = 15.0  # serving link only
    interference_gain_db: float = -6.0  # towards non-served UEs: beam mismatch
    shadowing_std_db: float = 3.0
    fading_std_db: float = 3.0
    blep_slope: float = 2.0  # per dB
    shannon_gap_db: float = 2.0
    noise_figure_db: float = 9.0
    irc_nulled: int = 1  # strongest active interferers per RBG the receiver suppresses
    irc_suppression_db: float = 10.0


@dataclass(frozen=True)
class ScenarioConfig:
    layout: LayoutConfig = LayoutConfig()
    carrier_ghz: float = 4.0
    bandwidth_mhz: float = 100.0
    scs_khz: float = 30.0
    n_prb: int = 273
    tdd_pattern: str = "DDDSU"
    symbols_per_slot: int = 14
    pdcch_symbols: int = 1
    special_slot_dl_symbols: int = 10
    tx_power_dbm: float = 31.0
    ue_speed_kmh: float = 3.0
    gnb_tx_proc_symbols: float = 2.75
    ue_rx_proc_symbols: float = 6.0
    n_xr_ue_per_cell: int = 5
    n_embb_ue_per_cell: int = 1
    xr_flow: XrFlowConfig = XrFlowConfig()
    scheduler: SchedulerConfig = SchedulerConfig()
    harq: HarqConfig = HarqConfig()
    la: LinkAdaptationConfig = LinkAdaptationConfig()
    cqi_period_ms: float = 2.0
    sim_duration_s: float = 6.0
    warmup_slots: int = 1000
    n_runs: int = 5
    rng_seed: int = 0
    calibration: CalibrationConfig = CalibrationConfig()

    @property
    def slot_ms(self) -> float:
        return 1.0 / (self.scs_khz / 15.0)

    @property
    def n_slots(self) -> int:
        return math.ceil(round(self.sim_duration_s * 1000.0 / self.slot_ms, 9))

    @property
    def cqi_period_slots(self) -> int:
        return max(1, round(self.cqi_period_ms / self.slot_ms))

    @property
    def olla_target(self) -> float:
        return self.harq.target_failed_cbg / self.harq.n_cbg_per_tb


XR_30MBPS = XrFlowConfig()
XR_45MBPS = XrFlowConfig(
    sdr_mbps=45.0,
    frame_size=TruncGaussParams(93.75, 9.8, 46.875, 140.625),
)


def default_scenario() -> ScenarioConfig:
    return ScenarioConfig()


def xr_flow_for_sdr(sdr_mbps: float, **overrides) -> XrFlowConfig:
    """The 30 or 45 Mbps flow with its matching frame-size distribution."""
    base = {30.0: XR_30MBPS, 45.0: XR_45MBPS}.get(float(sdr_mbps))
    if base is None:
        raise ConfigError(f"no frame-size preset for {sdr_mbps} Mbps")
    return dataclasses.replace(base, **overrides)


# ---------------------------------------------------------------- validation

def _check_tn(name: str, tn: TruncGaussParams, out: list[str]) -> None:
    if not tn.std > 0:
        out.append(f"{name}.std: must be > 0 (got {tn.std})")
    if not tn.min < tn.max:
        out.append(f"{name}.min/max: min must be < max")
    elif not tn.min <= tn.mean <= tn.max:
        out.append(f"{name}.mean: must lie in [min, max]")


def validate(config: ScenarioConfig) -> list[str]:
    """All invariant violations, each as ``"field: rule"``.  Empty means valid."""
    v: list[str] = []
    f = config.xr_flow
    _check_tn("xr_flow.frame_size", f.frame_size, v)
    _check_tn("xr_flow.jitter", f.jitter, v)
    if not f.fps > 0:
        v.append("xr_flow.fps: must be > 0")
    if not f.pdb_ms > 0:
        v.append("xr_flow.pdb_ms: must be > 0")
    if f.fps > 0 and f.sdr_mbps > 0:
        offered = f.frame_size.mean * 8.0 * f.fps / 1000.0
        if abs(offered - f.sdr_mbps) > 1e-3 * f.sdr_mbps:
            v.append(
                f"xr_flow.sdr_mbps: frame_size.mean*8*fps = {offered:.4g} Mbps "
                f"does not match sdr_mbps = {f.sdr_mbps:g} within 0.1%"
            )
    if f.latency_origin not in ("arrival", "generation"):
        v.append("xr_flow.latency_origin: must be 'arrival' or 'generation'")
    if f.fps > 0 and f.jitter.max - f.jitter.min >= 1000.0 / f.fps:
        v.append("xr_flow.jitter: range must be shorter than the frame period")

    s = config.scheduler
    if s.w_xr < 1 or s.w_embb < 1:
        v.append("scheduler.w_xr/w_embb: weights must be >= 1")
    if s.rbg_size_prb < 1:
        v.append("scheduler.rbg_size_prb: must be >= 1")

    h = config.harq
    if h.max_retx < 0:
        v.append("harq.max_retx: must be >= 0")
    if h.n_cbg_per_tb < 1:
        v.append("harq.n_cbg_per_tb: must be >= 1")
    if not 0 < h.target_failed_cbg < h.n_cbg_per_tb:
        v.append("harq.target_failed_cbg: must lie in (0, n_cbg_per_tb)")
    if h.max_cb_bits < 1:
        v.append("harq.max_cb_bits: must be >= 1")

    la = config.la
    if not la.olla_step_down_db > 0:
        v.append("la.olla_step_down_db: must be > 0")
    if not la.cqi_quant_db > 0:
        v.append("la.cqi_quant_db: must be > 0")
    if not la.olla_offset_limit_db >= 0:
        v.append("la.olla_offset_limit_db: must be >= 0")

    lay = config.layout
    if lay.n_rows < 1 or lay.n_cols < 1:
        v.append("layout.n_rows/n_cols: must be >= 1")
    if lay.hall_length_m <= 0 or lay.hall_width_m <= 0 or lay.isd_m <= 0:
        v.append("layout: hall dimensions and isd_m must be > 0")
    elif (lay.n_cols - 1) * lay.isd_m > lay.hall_length_m or (lay.n_rows - 1) * lay.isd_m > lay.hall_width_m:
        v.append("layout.isd_m: cell grid does not fit inside the hall")
    if lay.max_drop_attempts < 1:
        v.append("layout.max_drop_attempts: must be >= 1")

    expected_prb = _max_prb(config.bandwidth_mhz, config.scs_khz)
    if expected_prb is not None and config.n_prb != expected_prb:
        v.append(f"n_prb: {config.bandwidth_mhz:g} MHz at {config.scs_khz:g} kHz SCS gives {expected_prb} PRB")
    if config.n_prb < 1:
        v.append("n_prb: must be >= 1")
    if len(config.tdd_pattern) != 5 or set(config.tdd_pattern) - set("DSU"):
        v.append("tdd_pattern: must be 5 characters from D/S/U")
    elif "U" not in config.tdd_pattern:
        v.append("tdd_pattern: needs at least one U slot for feedback")
    if not 0 <= config.pdcch_symbols < config.special_slot_dl_symbols <= config.symbols_per_slot:
        v.append("pdcch_symbols/special_slot_dl_symbols: need 0 <= pdcch < special_dl <= symbols_per_slot")
    if config.n_xr_ue_per_cell < 0:
        v.append("n_xr_ue_per_cell: must be >= 0")
    if config.n_embb_ue_per_cell < 0:
        v.append("n_embb_ue_per_cell: must be >= 0")
    if not config.cqi_period_ms > 0:
        v.append("cqi_period_ms: must be > 0")
    if not config.sim_duration_s > 0:
        v.append("sim_duration_s: must be > 0")
    if config.warmup_slots < 0:
        v.append("warmup_slots: must be >= 0")
    elif config.sim_duration_s > 0 and config.warmup_slots >= config.n_slots:
        v.append("warmup_slots: must be shorter than the simulated slots")
    if config.n_runs < 1:
        v.append("n_runs: must be >= 1")
    if config.carrier_ghz <= 0:
        v.append("carrier_ghz: must be > 0")
    if config.ue_speed_kmh < 0:
        v.append("ue_speed_kmh: must be >= 0")
    c = config.calibration
    if c.shadowing_std_db < 0 or c.fading_std_db < 0:
        v.append("calibration: shadowing/fading std must be >= 0")
    if not c.blep_slope > 0:
        v.append("calibration.blep_slope: must be > 0")
    if config.calibration.irc_nulled < 0:
        v.append("calibration.irc_nulled: must be >= 0")
    if config.calibration.irc_suppression_db < 0:
        v.append("calibration.irc_suppression_db: must be >= 0")
    return v


# NR maximum transmission bandwidth configuration, FR1 (TS 38.101-1 table 5.3.2-1)
_NRB_FR1 = {
    15.0: {5: 25, 10: 52, 15: 79, 20: 106, 25: 133, 30: 160, 40: 216, 50: 270},
    30.0: {5: 11, 10: 24, 15: 38, 20: 51, 25: 65, 30: 78, 40: 106, 50: 133,
           60: 162, 70: 189, 80: 217, 90: 245, 100: 273},
    60.0: {10: 11, 15: 18, 20: 24, 25: 31, 30: 38, 40: 51, 50: 65, 60: 79,
           70: 93, 80: 107, 90: 121, 100: 135},
}


def _max_prb(bandwidth_mhz: float, scs_khz: float) -> int | None:
    table = _NRB_FR1.get(float(scs_khz))
    if table is None or float(bandwidth_mhz) != int(bandwidth_mhz):
        return None
    return table.get(int(bandwidth_mhz))


def check(config: ScenarioConfig) -> ScenarioConfig:
    violations = validate(config)
    if violations:
        raise ConfigError("invalid config: " + "; ".join(violations))
    return config


# ------------------------------------------------------------ flat key paths

def flatten(config: Any, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, key + "."))
        else:
            out[key] = value
    return out


def _parse_value(text: str) -> Any:
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(key: str, current: Any, value: Any) -> Any:
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        return str(value)
    raise ConfigError(f"{key}: unsupported field type")


def apply_overrides(config: ScenarioConfig, overrides: dict[str, Any]) -> ScenarioConfig:
    """Return ``config`` with dotted-path ``overrides`` applied (no validation)."""
    known = flatten(config)
    nested: dict[str, Any] = {}
    for key, raw in overrides.items():
        if key not in known:
            raise ConfigError(f"unknown config key: {key}")
        value = _parse_value(raw) if isinstance(raw, str) else raw
        value = _coerce(key, known[key], value)
        node = nested
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return _replace_nested(config, nested)


def _replace_nested(obj: Any, changes: dict[str, Any]) -> Any:
    kwargs = {}
    for name, change in changes.items():
        if isinstance(change, dict):
            kwargs[name] = _replace_nested(getattr(obj, name), change)
        else:
            kwargs[name] = change
    return dataclasses.replace(obj, **kwargs)


def parse_config_text(text: str, source: str = "<string>") -> dict[str, str]:
    assignments: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in stripped.split("=", 1))
        if not key or not value:
            raise ConfigError(f"{source}:{lineno}: empty key or value")
        if key in assignments:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key}")
        assignments[key] = value
    return assignments


def loads(text: str, base: ScenarioConfig | None = None, source: str = "<string>") -> ScenarioConfig:
    config = apply_overrides(base or default_scenario(), parse_config_text(text, source))
    return check(config)


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> ScenarioConfig:
    """Read a config file over the defaults, apply ``--set`` overrides, validate."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8 text") from exc
    config = apply_overrides(default_scenario(), parse_config_text(text, str(path)))
    if overrides:
        config = apply_overrides(config, overrides)
    return check(config)


def dumps(config: ScenarioConfig) -> str:
    lines = []
    for key, value in flatten(config).items():
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, str):
            text = repr(value)
        else:
            text = repr(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def parse_set_args(items: list[str] | None) -> dict[str, str]:
    """``["a.b=1", "c=x"]`` -> ``{"a.b": "1", "c": "x"}``."""
    out: dict[str, str] = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out
