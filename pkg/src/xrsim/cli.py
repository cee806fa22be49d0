"""Command-line front end: single runs, load sweeps, capacity search, figure data.

Subcommands: ``run``, ``sweep``, ``capacity``, ``report`` and ``dump-mcs``.
Exit codes: 0 ok, 2 config/validation error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kpi, phy
from .config import ConfigError, ScenarioConfig, check, default_scenario, load_config, parse_set_args, xr_flow_for_sdr
from .deployment import EMBB
from .engine import RunResult, run_campaign

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3
DEFAULT_PDBS = (5.0, 10.0, 15.0, 20.0, 30.0)
ECDF_LEVELS = tuple(range(1, 100))


class CliIOError(RuntimeError):
    pass


# ------------------------------------------------------------ experiment plan

@dataclasses.dataclass
class ExperimentPlan:
    base: ScenarioConfig
    n_xr: list[int]
    pdbs: list[float]
    sdrs: list[float]
    embb: list[bool]
    runs: int
    out_dir: Path | None = None

    def __post_init__(self):
        for name in ("n_xr", "pdbs", "sdrs", "embb"):
            if not getattr(self, name):
                raise ConfigError(f"sweep axis {name} is empty")

    def points(self) -> list[tuple[float, bool, int]]:
        return [(s, e, n) for s in self.sdrs for e in self.embb for n in self.n_xr]


def point_config(base: ScenarioConfig, sdr: float, embb: bool, n_xr: int) -> ScenarioConfig:
    """``base`` with the XR flow switched to ``sdr`` and the per-cell UE mix set."""
    flow = base.xr_flow
    if not math.isclose(flow.sdr_mbps, sdr):
        flow = xr_flow_for_sdr(sdr, fps=flow.fps, jitter=flow.jitter, pdb_ms=flow.pdb_ms,
                               random_phase=flow.random_phase, latency_origin=flow.latency_origin)
    n_embb = max(base.n_embb_ue_per_cell, 1) if embb else 0
    return check(dataclasses.replace(base, xr_flow=flow, n_xr_ue_per_cell=n_xr, n_embb_ue_per_cell=n_embb))


def point_key(sdr: float, embb: bool, n_xr: int) -> str:
    return f"sdr{sdr:g}_embb{int(embb)}_n{n_xr}"


def summarize(results: Sequence[RunResult], config: ScenarioConfig,
              pdbs: Iterable[float] = DEFAULT_PDBS) -> dict:
    """Plot-ready KPIs of one sweep point, pooled over its runs."""
    pdbs = sorted(set(float(p) for p in pdbs))
    has_xr = any(len(r.ues(kpi.XR)) for r in results)
    out: dict = {
        "sdr_mbps": config.xr_flow.sdr_mbps,
        "n_xr_ue_per_cell": config.n_xr_ue_per_cell,
        "n_embb_ue_per_cell": config.n_embb_ue_per_cell,
        "runs": [r.seed for r in results],
        "prb_utilization": kpi.prb_utilization(sum(r.prb_used for r in results),
                                               sum(r.prb_available for r in results)),
        "prb_utilization_per_run": [kpi.prb_utilization(r.prb_used, r.prb_available) for r in results],
        "embb_cell_throughput_mbps_per_run": [float(kpi.embb_cell_throughput_mbps(r).mean()) for r in results],
        "embb_cell_throughput_mbps_cells": [round(float(x), 6) for r in results
                                            for x in kpi.embb_cell_throughput_mbps(r)],
        "satisfied_fraction": {},
        "n_xr_calls": 0,
    }
    out["embb_cell_throughput_mbps"] = float(np.mean(out["embb_cell_throughput_mbps_per_run"]))
    if has_xr:
        for p in pdbs:
            out["satisfied_fraction"][f"{p:g}"] = kpi.satisfied_fraction(results, p)
        out["n_xr_calls"] = sum(len(r.ues(kpi.XR)) for r in results)
        lat = kpi.xr_latencies(results, max(pdbs))
        out["latency_p99_ms"] = kpi.percentile(lat, 0.99) if len(lat) else math.nan
        sinr = kpi.pooled_sinr_db(results, kpi.XR)
    else:
        out["latency_p99_ms"] = math.nan
        sinr = kpi.pooled_sinr_db(results, EMBB)
    out["sinr_median_db"] = float(np.median(sinr)) if len(sinr) else math.nan
    out["sinr_ecdf_db"] = [kpi.percentile(sinr, q / 100) for q in ECDF_LEVELS] if len(sinr) else []
    return _jsonable(out)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return None if math.isnan(x) else ("inf" if math.isinf(x) else round(x, 9))
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def run_point(plan: ExperimentPlan, sdr: float, embb: bool, n_xr: int, parallel: int = 1) -> dict:
    cfg = point_config(plan.base, sdr, embb, n_xr)
    results = run_campaign(cfg, plan.runs, parallel=parallel)
    summary = summarize(results, cfg, plan.pdbs)
    summary["embb"] = embb
    if plan.out_dir is not None:
        write_json(plan.out_dir / "points" / f"{point_key(sdr, embb, n_xr)}.json", summary)
    return summary


def capacity_search(plan: ExperimentPlan, parallel: int = 1, stop_early: bool = True,
                    progress=None) -> dict[tuple[float, bool], dict]:
    """Satisfied fraction per N for every (sdr, embb), and capacity per PDB.

    With ``stop_early`` the N sweep of a series ends at the first N where no
    PDB reaches the capacity threshold.
    """
    out = {}
    for sdr in plan.sdrs:
        for embb in plan.embb:
            fractions: dict[str, dict[int, float]] = {f"{p:g}": {} for p in plan.pdbs}
            points = {}
            for n in sorted(plan.n_xr):
                s = run_point(plan, sdr, embb, n, parallel)
                points[n] = s
                if progress:
                    progress(sdr, embb, n, s)
                for p, f in s["satisfied_fraction"].items():
                    fractions[p][n] = f
                if stop_early and all(f < kpi.CAPACITY_FRACTION for f in s["satisfied_fraction"].values()):
                    break
            caps = {p: kpi.xr_capacity(fr).capacity for p, fr in fractions.items()}
            out[(sdr, embb)] = {"fractions": fractions, "capacity": caps, "points": points}
    return out


# ------------------------------------------------------------ files

def write_json(path: Path, obj) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise CliIOError(f"cannot write {path}: {exc}") from exc


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise CliIOError(f"cannot write {path}: {exc}") from exc


def capacity_rows(cap: dict[tuple[float, bool], dict]) -> list[list]:
    rows = []
    for (sdr, embb), res in sorted(cap.items()):
        for p, c in res["capacity"].items():
            ref = cap.get((sdr, False))
            loss = ""
            if embb and ref is not None:
                loss = f"{100 * kpi.capacity_loss(ref['capacity'][p], c):.1f}"
            rows.append([f"{sdr:g}", int(embb), p, c, loss])
    return rows


# ------------------------------------------------------------ commands

def _load(args) -> ScenarioConfig:
    overrides = parse_set_args(args.set)
    if args.config:
        return load_config(resolve_config_path(args.config), overrides)
    from .config import apply_overrides
    return check(apply_overrides(default_scenario(), overrides))


def resolve_config_path(name: str) -> Path:
    """A file path, or the name of a shipped preset (with or without ``.cfg``)."""
    p = Path(name)
    if p.exists():
        return p
    stem = p.name if p.suffix else p.name + ".cfg"
    preset = resources.files("xrsim") / "presets" / stem
    if preset.is_file():
        return Path(str(preset))
    raise CliIOError(f"config file not found: {name}")


def _out_dir(args) -> Path:
    return Path(args.out or "results")


def cmd_run(args) -> int:
    cfg = _load(args)
    runs = args.runs or cfg.n_runs
    base_seed = cfg.rng_seed if args.seed is None else args.seed
    results = run_campaign(cfg, runs, base_seed=base_seed, parallel=args.parallel)
    out = _out_dir(args)
    pdb = cfg.xr_flow.pdb_ms
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.cfg").write_text(_dump(cfg), encoding="utf-8")
        for r in results:
            kpi.write_frames_csv(r, out / f"frames_seed{r.seed}.csv")
            kpi.write_ue_csv(r, pdb, out / f"ues_seed{r.seed}.csv")
    except OSError as exc:
        raise CliIOError(f"cannot write results to {out}: {exc}") from exc
    summary = summarize(results, cfg, sorted(set(DEFAULT_PDBS) | {pdb}))
    summary["embb"] = cfg.n_embb_ue_per_cell > 0
    write_json(out / "summary.json", summary)
    if summary["n_xr_calls"]:
        frac = summary["satisfied_fraction"][f"{pdb:g}"]
        print(f"satisfied XR UEs at {pdb:g} ms: {frac:.3f} of {summary['n_xr_calls']}")
    print(f"PRB utilization: {summary['prb_utilization']:.3f}")
    if cfg.n_embb_ue_per_cell:
        print(f"eMBB cell throughput: {summary['embb_cell_throughput_mbps']:.1f} Mbps")
    return EXIT_OK


def _dump(cfg: ScenarioConfig) -> str:
    from .config import dumps
    return dumps(cfg)


def _plan(args, cfg: ScenarioConfig) -> ExperimentPlan:
    return ExperimentPlan(
        base=cfg,
        n_xr=parse_int_range(args.n_xr),
        pdbs=parse_float_list(args.pdb),
        sdrs=parse_float_list(args.sdr) if args.sdr else [cfg.xr_flow.sdr_mbps],
        embb=[bool(int(x)) for x in args.embb.split(",")],
        runs=args.runs or cfg.n_runs,
        out_dir=_out_dir(args),
    )


def _progress(sdr, embb, n, s):
    fr = " ".join(f"{p}ms:{f:.2f}" for p, f in s["satisfied_fraction"].items())
    print(f"sdr={sdr:g} embb={int(embb)} N={n} util={s['prb_utilization']:.3f} {fr}", flush=True)


def cmd_sweep(args) -> int:
    plan = _plan(args, _load(args))
    for sdr, embb, n in plan.points():
        _progress(sdr, embb, n, run_point(plan, sdr, embb, n, args.parallel))
    return EXIT_OK


def cmd_capacity(args) -> int:
    plan = _plan(args, _load(args))
    cap = capacity_search(plan, args.parallel, stop_early=not args.full, progress=_progress)
    rows = capacity_rows(cap)
    write_csv(plan.out_dir / "capacity.csv",
              ["sdr_mbps", "embb", "pdb_ms", "capacity_ue_per_cell", "capacity_loss_pct"], rows)
    for r in rows:
        print(f"sdr={r[0]} embb={r[1]} pdb={r[2]}ms capacity={r[3]}" + (f" loss={r[4]}%" if r[4] else ""))
    return EXIT_OK


def load_points(result_dir: Path) -> list[dict]:
    files = sorted((result_dir / "points").glob("*.json")) if (result_dir / "points").is_dir() else []
    if not files:
        raise CliIOError(f"no sweep points found under {result_dir}/points")
    try:
        return [json.loads(f.read_text(encoding="utf-8")) for f in files]
    except (OSError, ValueError) as exc:
        raise CliIOError(f"cannot read sweep points: {exc}") from exc


def cmd_report(args) -> int:
    src = Path(args.results)
    out = Path(args.out) if args.out else src / "figures"
    points = sorted(load_points(src), key=lambda s: (s["sdr_mbps"], s["embb"], s["n_xr_ue_per_cell"]))
    write_report(points, out)
    print(f"figure data written to {out}")
    return EXIT_OK


def write_report(points: list[dict], out: Path) -> None:
    series: dict[tuple[float, bool], list[dict]] = {}
    for s in points:
        series.setdefault((s["sdr_mbps"], bool(s["embb"])), []).append(s)

    # capacity vs PDB and capacity loss
    cap: dict[tuple[float, bool], dict] = {}
    for key, pts in series.items():
        fr: dict[str, dict[int, float]] = {}
        for s in pts:
            for p, f in s["satisfied_fraction"].items():
                fr.setdefault(p, {})[s["n_xr_ue_per_cell"]] = f
        cap[key] = {"capacity": {p: kpi.xr_capacity(v).capacity for p, v in fr.items()}}
    write_csv(out / "capacity_vs_pdb.csv",
              ["sdr_mbps", "embb", "pdb_ms", "capacity_ue_per_cell", "capacity_loss_pct"], capacity_rows(cap))

    write_csv(out / "latency_p99_vs_n.csv", ["sdr_mbps", "embb", "n_xr_ue_per_cell", "latency_p99_ms"],
              [[f"{s['sdr_mbps']:g}", int(s["embb"]), s["n_xr_ue_per_cell"], s["latency_p99_ms"]]
               for s in points if s["n_xr_calls"]])
    write_csv(out / "prb_utilization.csv",
              ["sdr_mbps", "embb", "n_xr_ue_per_cell", "prb_utilization_fraction"],
              [[f"{s['sdr_mbps']:g}", int(s["embb"]), s["n_xr_ue_per_cell"], s["prb_utilization"]]
               for s in points])
    sinr_cols = [s for s in points if s["sinr_ecdf_db"]]
    write_csv(out / "sinr_ecdf.csv",
              ["cdf"] + [f"sinr_db_{point_key(s['sdr_mbps'], s['embb'], s['n_xr_ue_per_cell'])}"
                         for s in sinr_cols],
              [[q / 100] + [s["sinr_ecdf_db"][i] for s in sinr_cols] for i, q in enumerate(ECDF_LEVELS)])
    shift_rows = []
    for (sdr, embb), pts in series.items():
        if embb:
            continue
        ref = {s["n_xr_ue_per_cell"]: s for s in pts}
        for s in series.get((sdr, True), []):
            r = ref.get(s["n_xr_ue_per_cell"])
            if r is not None and r["sinr_median_db"] is not None and s["sinr_median_db"] is not None:
                shift_rows.append([f"{sdr:g}", s["n_xr_ue_per_cell"], r["sinr_median_db"], s["sinr_median_db"],
                                   r["sinr_median_db"] - s["sinr_median_db"]])
    write_csv(out / "sinr_median_shift.csv",
              ["sdr_mbps", "n_xr_ue_per_cell", "median_db_xr_only", "median_db_with_embb", "shift_db"],
              shift_rows)
    embb_pts = [s for s in points if s["embb"]]
    write_csv(out / "embb_throughput_vs_n.csv",
              ["sdr_mbps", "n_xr_ue_per_cell", "mean_mbps", "min_run_mbps", "max_run_mbps"],
              [[f"{s['sdr_mbps']:g}", s["n_xr_ue_per_cell"], s["embb_cell_throughput_mbps"],
                min(s["embb_cell_throughput_mbps_per_run"]), max(s["embb_cell_throughput_mbps_per_run"])]
               for s in embb_pts])
    rows = []
    for s in embb_pts:
        cells = sorted(s["embb_cell_throughput_mbps_cells"])
        for i, x in enumerate(cells, 1):
            rows.append([f"{s['sdr_mbps']:g}", s["n_xr_ue_per_cell"], x, i / len(cells)])
    write_csv(out / "embb_throughput_ecdf.csv", ["sdr_mbps", "n_xr_ue_per_cell", "cell_mbps", "cdf"], rows)


def cmd_dump_mcs(args) -> int:
    cfg = _load(args)
    table = phy.build_mcs_table(cfg.calibration.shannon_gap_db)
    if args.out:
        try:
            phy.dump_mcs_table(table, args.out)
        except OSError as exc:
            raise CliIOError(f"cannot write {args.out}: {exc}") from exc
    else:
        w = csv.writer(sys.stdout)
        w.writerow(["index", "qm", "code_rate", "se_bits_per_re", "snr_10pct_db"])
        for m in table:
            w.writerow([m.index, m.modulation_order, f"{m.code_rate:.4f}",
                        f"{m.se_bits_per_re:.4f}", f"{m.snr_10pct_db:.3f}"])
    return EXIT_OK


# ------------------------------------------------------------ parsing

def parse_int_range(text: str) -> list[int]:
    """``"1-4,6"`` -> ``[1, 2, 3, 4, 6]``."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = (int(x) for x in part.split("-", 1))
            out.extend(range(lo, hi + 1))
        elif part:
            out.append(int(part))
    return sorted(set(out))


def parse_float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xrsim", description="Multi-cell XR/eMBB downlink simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output directory"):
        p.add_argument("--config", help="config file or shipped preset name")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, help="base seed (runs use seed+1 .. seed+runs)")
        p.add_argument("--runs", type=int, help="independent runs per point")
        p.add_argument("--out", help=out_help)
        p.add_argument("--parallel", type=int, default=1, help="worker processes")

    p = sub.add_parser("run", help="run one scenario")
    common(p)
    p.set_defaults(func=cmd_run)

    for name, func, help_ in (("sweep", cmd_sweep, "run every point of a sweep"),
                              ("capacity", cmd_capacity, "XR capacity per PDB/SDR/eMBB setting")):
        p = sub.add_parser(name, help=help_)
        common(p)
        p.add_argument("--n-xr", default="1-10", help="XR UEs per cell, e.g. 1-8 or 2,4,6")
        p.add_argument("--pdb", default=",".join(f"{x:g}" for x in DEFAULT_PDBS), help="PDBs in ms")
        p.add_argument("--sdr", help="XR source rates in Mbps (default: from config)")
        p.add_argument("--embb", default="0,1", help="eMBB presence values, e.g. 0,1")
        if name == "capacity":
            p.add_argument("--full", action="store_true", help="do not stop a series early")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="figure data from a sweep directory")
    p.add_argument("results", help="directory written by sweep or capacity")
    p.add_argument("--out", help="figure data directory (default: RESULTS/figures)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("dump-mcs", help="print the MCS table with its BLEP anchors")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", help="CSV file (default: stdout)")
    p.set_defaults(func=cmd_dump_mcs)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliIOError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # malformed sweep axes and similar argument problems
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
