"""Command-line driver: ``qfilter simulate|filter|check|symbolic``.

Exit codes: 0 success, 1 a check failed, 2 usage, configuration, record or
I/O error, 3 numerical divergence.  Every command validates its inputs and
computes its results before creating any output file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checks as _checks
from .config import ScenarioConfig, load_config
from .errors import ConfigError, DivergenceError, ImpossibleJumpError, RecordError
from .filters import FilterKind, filter_distance, run_filter
from .io import (
    check_record_matches,
    fmt,
    format_expectations,
    format_record,
    format_summary,
    format_table,
    read_record,
    svg_plot,
)
from .ito import check_unitarity, flow_differential, format_expression, hp_differential
from .master import integrate_master
from .operators import SIGMA_X, SIGMA_Y, SIGMA_Z, Detection
from .simulator import SimulationSpec, simulate_ensemble

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("qfilter")


class _Output:
    """Collects files in memory and writes them only once everything succeeded."""

    def __init__(self, root):
        self.root = Path(root) if root is not None else None
        self.files: dict[str, str] = {}

    def add(self, name: str, text: str):
        self.files[name] = text

    def commit(self) -> list[Path]:
        if self.root is None:
            return []
        written = []
        for name, text in self.files.items():
            path = self.root / name
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
            written.append(path)
        return written


def _say(args, msg=""):
    if not args.quiet:
        print(msg)


def _timing(command: str, seconds: float) -> str:
    # kept out of summary.json so that summaries are reproducible byte for byte
    return json.dumps({"command": command, "wall_time_s": round(seconds, 3)}) + "\n"


# --- simulate ---------------------------------------------------------------

def cmd_simulate(cfg: ScenarioConfig, out: _Output) -> dict:
    spec = SimulationSpec(cfg.model, cfg.grid, cfg.n_traj, cfg.master_seed, cfg.observables)
    ens = simulate_ensemble(spec, workers=cfg.workers, keep_records=cfg.records,
                            scheme=cfg.scheme)
    master = integrate_master(cfg.model, cfg.grid)
    times = cfg.grid.times
    names = list(cfg.observables)
    ref = {n: master.expectation(x) for n, x in cfg.observables.items()}
    out.add("expectations.csv", format_expectations(
        times, names, ens.observable_means, ens.observable_stderr, ref))

    if ens.records:
        cols: dict[str, list] = {"traj_index": [], "k": [], "t": []}
        for n in names:
            cols[n] = []
        for rec, traj in ens.records:
            out.add(f"records/record_{rec.traj_index:05d}.csv", format_record(rec))
            cols["traj_index"] += [rec.traj_index] * len(times)
            cols["k"] += list(range(len(times)))
            cols["t"] += list(times)
            for n, x in cfg.observables.items():
                cols[n] += list(traj.expectation(x))
        out.add("trajectories.csv", format_table(
            {k: np.asarray(v) for k, v in cols.items()}, int_columns=("traj_index", "k")))

    probe = _checks._probe_indices(cfg.grid.n_steps)
    check_list = []
    for n in names:
        zs = []
        for k in probe:
            diff = abs(ens.observable_means[n][k] - ref[n][k])
            se = ens.observable_stderr[n][k]
            zs.append(0.0 if diff <= 1e-12 else (diff / se if se > 0 else float("inf")))
        over3 = sum(z > 3 for z in zs)
        check_list.append({
            "name": f"unbiased_{n}", "status": "pass" if over3 <= 1 and max(zs) <= 5 else "fail",
            "measured": {"max_z": max(zs), "probes_over_3sigma": over3},
            "tolerance": "<= 1 of 10 probes beyond 3 stderr, none beyond 5"})
    if cfg.plots:
        for n in names:
            out.add(f"plot_{n}.svg", svg_plot(
                f"<{n}>  ({cfg.preset or 'explicit model'}, {cfg.detection.value}, "
                f"n_traj = {cfg.n_traj})",
                times, ens.observable_means[n], ens.observable_stderr[n], ref[n]))
    summary = {
        "command": "simulate",
        "config": cfg.echo(),
        "n_used": ens.n_used,
        "diverged": [{"trajectory": i, "step": s} for i, s in ens.diverged],
        "diverged_count": len(ens.diverged),
        "checks": check_list,
    }
    out.add("summary.json", format_summary(summary))
    return summary


# --- filter -----------------------------------------------------------------

def cmd_filter(cfg: ScenarioConfig, record_path, out: _Output) -> dict:
    record = read_record(record_path)
    check_record_matches(record, cfg.grid, cfg.detection)
    model = cfg.model
    norm = run_filter(model, record, FilterKind.NORMALIZED, scheme=cfg.scheme)
    cols = {"k": np.arange(cfg.grid.n_steps + 1), "t": cfg.grid.times}
    for n, x in cfg.observables.items():
        cols[f"{n}_normalized"] = norm.expectation(x)
    summary = {"command": "filter", "config": cfg.echo(),
               "record": {"master_seed": record.master_seed, "traj_index": record.traj_index}}
    if cfg.detection is Detection.HOMODYNE:
        lin = run_filter(model, record, FilterKind.LINEAR, scheme=cfg.scheme)
        for n, x in cfg.observables.items():
            cols[f"{n}_linear"] = lin.expectation(x)
        dist = filter_distance(norm, lin)
        cols["trace_distance"] = dist
        tol = 50 * cfg.grid.dt
        summary["checks"] = [{
            "name": "zakai_equivalence",
            "status": "pass" if dist.max() <= tol else "fail",
            "measured": {"max_trace_distance": float(dist.max())},
            "tolerance": f"<= 50 dt = {fmt(tol)}"}]
    else:
        # the linear filter is only defined for homodyne records
        summary["checks"] = []
    out.add("filter.csv", format_table(cols, int_columns=("k",)))
    out.add("summary.json", format_summary(summary))
    return summary


# --- check ------------------------------------------------------------------

def _table(results) -> str:
    rows = [("check", "status", "measured", "tolerance")]
    for r in results:
        measured = ", ".join(f"{k}={_short(v)}" for k, v in r.measured.items())
        rows.append((r.name, "PASS" if r.passed else "FAIL", measured, r.tolerance))
    widths = [max(len(row[i]) for row in rows) for i in range(3)]
    lines = []
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row[:3], widths)) + "  " + row[3])
    for r in results:
        if r.detail and not r.passed:
            lines.append(f"  {r.name}: {r.detail}")
    return "\n".join(lines)


def _short(v):
    if isinstance(v, (float, np.floating)):
        return f"{v:.4g}"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{k}={_short(x)}" for k, x in v.items()) + "}"
    if isinstance(v, list):
        return "[" + ", ".join(_short(x) for x in v) + "]"
    return str(v)


def cmd_check(cfg: ScenarioConfig | None, seed: int | None, out: _Output, progress=None):
    if cfg is None:
        seed = _checks.DEFAULT_SEED if seed is None else seed
        results = _checks.run_suite(seed, progress=progress)
    else:
        results = _checks.run_config_checks(cfg, seed, progress=progress)
    summary = {
        "command": "check",
        "config": None if cfg is None else cfg.echo(),
        "seed": seed if cfg is None else (cfg.master_seed if seed is None else seed),
        "checks": [r.to_dict() for r in results],
        "passed": sum(r.passed for r in results),
        "failed": sum(not r.passed for r in results),
    }
    out.add("summary.json", format_summary(summary))
    return results, summary


# --- symbolic ---------------------------------------------------------------

def symbolic_text(cfg: ScenarioConfig) -> str:
    m = cfg.model
    d = m.dim
    model_labels = {"H": m.hamiltonian, "L": m.coupling, "L†": m.coupling_dag,
                    "L†L": m.coupling_sq}
    ident = np.eye(d, dtype=complex)
    if d == 2:
        flow_labels = {"I": ident, "σ_x": SIGMA_X, "σ_y": SIGMA_Y, "σ_z": SIGMA_Z}
    else:
        flow_labels = {"I": ident, **model_labels}
    lines = [f"dU = ({format_expression(hp_differential(m), model_labels)}) U"
             if hp_differential(m).max_abs() > 0 else "dU = 0",
             f"d(U†U) = {format_expression(check_unitarity(m), model_labels)}"]
    for name, x in cfg.observables.items():
        labels = {**flow_labels, name: x} if name not in flow_labels else flow_labels
        lines.append(f"d j_t({name}) = j_t[{format_expression(flow_differential(m, x), labels)}]")
    return "\n".join(lines) + "\n"


def cmd_symbolic(cfg: ScenarioConfig, out: _Output) -> str:
    text = symbolic_text(cfg)
    out.add("symbolic.txt", text)
    return text


# --- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qfilter", description="Quantum filtering toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, metavar="PATH",
                        help="scenario file")
        sp.add_argument("--out", metavar="DIR", help="output directory")
        sp.add_argument("--seed", type=int, metavar="N", help="override the master seed")
        sp.add_argument("--quiet", action="store_true", help="only report errors")

    common(sub.add_parser("simulate", help="simulate trajectories and ensemble statistics"))
    f = sub.add_parser("filter", help="replay the filters on a stored record")
    common(f)
    f.add_argument("--record", required=True, metavar="FILE", help="record CSV")
    common(sub.add_parser("check", help="run the verification suite"), config_required=False)
    common(sub.add_parser("symbolic", help="print the Ito-calculus derivations"))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if args.command in ("simulate", "filter") and args.out is None:
        print(f"qfilter {args.command}: --out is required", file=sys.stderr)
        return EXIT_USAGE
    start = time.perf_counter()
    try:
        cfg = load_config(args.config) if args.config else None
        if cfg is not None and args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = _Output(args.out)
        if args.command == "simulate":
            summary = cmd_simulate(cfg, out)
            code = EXIT_OK
            _say(args, f"{summary['n_used']} trajectories, {summary['diverged_count']} diverged")
            for c in summary["checks"]:
                _say(args, f"{c['name']}: {c['status']} {_short(c['measured'])}")
        elif args.command == "filter":
            summary = cmd_filter(cfg, args.record, out)
            code = EXIT_OK
            for c in summary["checks"]:
                _say(args, f"{c['name']}: {c['status']} {_short(c['measured'])}")
        elif args.command == "check":
            progress = None if args.quiet else (
                lambda r: print(f"  {r.name:28s} {'PASS' if r.passed else 'FAIL'}", flush=True))
            results, _ = cmd_check(cfg, args.seed, out, progress)
            _say(args, _table(results))
            code = EXIT_OK if all(r.passed for r in results) else EXIT_CHECK
        else:
            text = cmd_symbolic(cfg, out)
            if not args.quiet:
                sys.stdout.write(text)
            code = EXIT_OK
        if out.root is not None:
            out.add("timing.json", _timing(args.command, time.perf_counter() - start))
        written = out.commit()
        if written:
            _say(args, f"wrote {len(written)} file(s) to {out.root}")
        return code
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (RecordError, ImpossibleJumpError) as exc:
        print(f"record error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
