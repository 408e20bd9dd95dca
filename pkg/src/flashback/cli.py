"""Command line entry point: ``flashback {run,theory,sweep,metrics}``.

Experiment configs are flat ``key=value`` files (``#`` starts a comment)::

    benchmark.T=5
    benchmark.K=2
    hosts=distill,replay,reg,dyn
    host.lr=0.005              # every host
    host.reg.alpha_s=100       # one host
    fl.E1=5
    fl.E2=25
    modes=CL,FL
    seeds=0-9
    regimes=CI,TI
    output=out
    workers=1

``benchmark.csv=<path>`` with ``benchmark.partition=0,1;2,3`` (and optionally
``benchmark.test_csv``) replaces the synthetic benchmark.  The output
directory can be overridden with the ``FLASHBACK_OUT`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import metrics as mt
from . import theory
from .hosts import CATEGORIES, HostConfig, default_config
from .protocol import MODES, FLConfig, budget_audit, run_stream
from .seeding import TASKGEN, stream_seed
from .tasks import SyntheticSpec, TaskStream, generate_synthetic, load_csv

OUT_ENV = "FLASHBACK_OUT"
RESULT_COLUMNS = ("seed", "host", "mode", "regime", *mt.METRIC_NAMES)
FAILED = "failed"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    benchmark: dict = field(default_factory=dict)
    hosts: list[HostConfig] = field(default_factory=list)
    fl: FLConfig = field(default_factory=FLConfig)
    modes: list[str] = field(default_factory=lambda: ["CL", "FL"])
    seeds: list[int] = field(default_factory=lambda: [0])
    regimes: list[str] = field(default_factory=lambda: ["CI", "TI"])
    output: str = "out"
    workers: int = 1


# -- config parsing --------------------------------------------------------------------


def _parse_lines(text: str, origin: str) -> dict[str, tuple[str, str]]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        out[key] = (value, f"{origin}:{lineno}")
    return out


def _seeds(value: str, where: str) -> list[int]:
    seeds = []
    try:
        for part in value.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            elif part:
                seeds.append(int(part))
    except ValueError:
        raise ConfigError(f"{where}: seeds: cannot parse {value!r}") from None
    if not seeds:
        raise ConfigError(f"{where}: seeds: empty list")
    return seeds


def _coerce(value: str, target, key: str, where: str):
    try:
        if isinstance(target, bool):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return value.lower() in ("true", "1", "yes")
        if isinstance(target, int):
            return int(value)
        if isinstance(target, float):
            return float(value)
        if isinstance(target, tuple):
            return tuple(float(v) for v in value.split(",") if v.strip())
        return value
    except ValueError:
        raise ConfigError(f"{where}: {key}: cannot parse {value!r}") from None


_BENCH_FIELDS = {f.name: f.default for f in dataclasses.fields(SyntheticSpec)}
_HOST_FIELDS = {f.name: f.default for f in dataclasses.fields(HostConfig) if f.name != "category"}
_HOST_FIELDS.update(alpha_s=0.0, alpha_p=0.0)
_FL_FIELDS = {"E1": 0, "E2": 0, "alpha_p": 0.0, "allow_over_budget": False}


def parse_config(text: str, origin: str = "<config>", overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Parse a flat key=value config; ``overrides`` are extra ``key=value`` strings."""
    entries = _parse_lines(text, origin)
    entries.update(_parse_lines("\n".join(overrides), "--set"))
    cfg = ExperimentConfig()
    host_names = list(CATEGORIES)
    shared: dict = {}
    per_host: dict = {c: {} for c in CATEGORIES}
    fl: dict = {}
    for key, (value, where) in entries.items():
        parts = key.split(".")
        if key == "hosts":
            host_names = [h.strip() for h in value.split(",") if h.strip()]
            bad = [h for h in host_names if h not in CATEGORIES]
            if bad or not host_names:
                raise ConfigError(f"{where}: hosts: unknown or empty host list {value!r}")
        elif key == "modes":
            cfg.modes = [m.strip() for m in value.split(",") if m.strip()]
            if not cfg.modes or any(m not in MODES for m in cfg.modes):
                raise ConfigError(f"{where}: modes: expected a subset of {MODES}, got {value!r}")
        elif key == "regimes":
            cfg.regimes = [r.strip() for r in value.split(",") if r.strip()]
            if not cfg.regimes or any(r not in mt.REGIMES for r in cfg.regimes):
                raise ConfigError(f"{where}: regimes: expected a subset of {mt.REGIMES}, got {value!r}")
        elif key == "seeds":
            cfg.seeds = _seeds(value, where)
        elif key == "output":
            cfg.output = value
        elif key == "workers":
            cfg.workers = _coerce(value, 1, key, where)
            if cfg.workers < 1:
                raise ConfigError(f"{where}: workers must be >= 1")
        elif parts[0] == "benchmark" and len(parts) == 2:
            name = parts[1]
            if name in ("csv", "test_csv", "partition"):
                cfg.benchmark[name] = value
            elif name in _BENCH_FIELDS:
                cfg.benchmark[name] = _coerce(value, _BENCH_FIELDS[name], key, where)
            else:
                raise ConfigError(f"{where}: unknown key {key!r}")
        elif parts[0] == "host" and len(parts) == 2 and parts[1] in _HOST_FIELDS:
            shared[parts[1]] = _coerce(value, _HOST_FIELDS[parts[1]], key, where)
        elif parts[0] == "host" and len(parts) == 3 and parts[1] in CATEGORIES and parts[2] in _HOST_FIELDS:
            per_host[parts[1]][parts[2]] = _coerce(value, _HOST_FIELDS[parts[2]], key, where)
        elif parts[0] == "fl" and len(parts) == 2 and parts[1] in _FL_FIELDS:
            fl[parts[1]] = _coerce(value, _FL_FIELDS[parts[1]], key, where)
        else:
            raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        cfg.hosts = [default_config(h, **{**shared, **per_host[h]}) for h in host_names]
        cfg.fl = FLConfig(**fl)
        if "csv" not in cfg.benchmark:
            SyntheticSpec(**{k: v for k, v in cfg.benchmark.items()})
        elif "partition" not in cfg.benchmark:
            raise ConfigError("benchmark.partition is required with benchmark.csv")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path), overrides)


def build_stream(bench: dict, seed: int) -> TaskStream:
    """The benchmark for one run; synthetic streams follow the run seed unless ``benchmark.seed`` is set."""
    if "csv" in bench:
        partition = [[int(c) for c in group.split(",") if c.strip()] for group in bench["partition"].split(";")]
        return load_csv(bench["csv"], partition, bench.get("test_csv"))
    spec = dict(bench)
    spec.setdefault("seed", stream_seed(seed, TASKGEN))
    return generate_synthetic(SyntheticSpec(**spec))


# -- running ------------------------------------------------------------------------------


def _run_one(job):
    bench, host_cfg, fl_cfg, mode, seed = job
    stream_ = build_stream(bench, seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rec = run_stream(mode, host_cfg, fl_cfg if mode == "FL" else None, stream_, seed)
    audit = budget_audit(rec, host_cfg, fl_cfg if mode == "FL" else None)
    return rec.matrices, audit


def _safe_run(job):
    try:
        return _run_one(job), None
    except (ArithmeticError, ValueError, FloatingPointError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def run_experiment(cfg: ExperimentConfig, out_dir: Path, emit_plot_data: bool = False,
                   log=None) -> tuple[list[dict], bool]:
    """Run every (seed, host, mode) and write matrices, results.csv, ttest.csv and budget.csv."""
    log = sys.stderr if log is None else log
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg.benchmark, h, cfg.fl, mode, seed) for seed in cfg.seeds for h in cfg.hosts for mode in cfg.modes]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            outcomes = list(ex.map(_safe_run, jobs))
    else:
        outcomes = [_safe_run(j) for j in jobs]
    rows, budget_rows, plot_rows = [], [], []
    ok = True
    for (_, h, _, mode, seed), (result, err) in zip(jobs, outcomes):
        if err is not None:
            ok = False
            print(f"run failed: host={h.category} mode={mode} seed={seed}: {err}", file=log)
            for regime in cfg.regimes:
                rows.append({"seed": seed, "host": h.category, "mode": mode, "regime": regime,
                             **{m: FAILED for m in mt.METRIC_NAMES}})
            continue
        matrices, audit = result
        mt.write_matrix_csv(out_dir / f"{h.category}_{mode}_seed{seed}_matrix.csv", matrices)
        budget_rows.append([seed, h.category, mode, " ".join(map(str, audit.epochs_per_task)),
                            " ".join(map(str, audit.units_per_task)), "pass" if audit.passed else "fail"])
        if not audit.passed:
            print(f"budget audit failed: host={h.category} mode={mode} seed={seed}\n{audit}", file=log)
        for regime in cfg.regimes:
            rep = mt.report(matrices[regime], regime)
            rows.append({"seed": seed, "host": h.category, "mode": mode, "regime": regime, **rep.values()})
            if emit_plot_data:
                A = matrices[regime]
                for (t, j), acc in sorted(A.entries.items()):
                    plot_rows.append([seed, h.category, mode, regime, t, j, repr(acc)])
    rows.sort(key=lambda r: (r["host"], r["mode"], r["regime"], r["seed"]))
    (out_dir / "results.csv").write_text(results_csv_text(rows))
    (out_dir / "ttest.csv").write_text(ttest_csv_text(rows))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "host", "mode", "epochs", "memory_units", "budget"])
    for r in sorted(budget_rows, key=lambda r: (r[1], r[2], r[0])):
        w.writerow(r)
    (out_dir / "budget.csv").write_text(buf.getvalue())
    if emit_plot_data:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "host", "mode", "regime", "t", "j", "acc"])
        for r in sorted(plot_rows, key=lambda r: (r[1], r[2], r[3], r[0], r[4], r[5])):
            w.writerow(r)
        (out_dir / "plot_data.csv").write_text(buf.getvalue())
    return rows, ok


def _cell(v) -> str:
    return v if isinstance(v, str) else mt.format_value(v)


def results_csv_text(rows: Sequence[dict], extra: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*extra, *RESULT_COLUMNS])
    for r in rows:
        w.writerow([*(r[k] for k in extra), r["seed"], r["host"], r["mode"], r["regime"],
                    *(_cell(r[m]) for m in mt.METRIC_NAMES)])
    return buf.getvalue()


def ttest_csv_text(rows: Sequence[dict]) -> str:
    """Paired FL-vs-CL t-test of AA per host and regime over the seeds both modes completed."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["host", "regime", "metric", "n", "mean_CL", "mean_FL", "t", "p"])
    table = {}
    for r in rows:
        if isinstance(r["AA"], str):
            continue
        table.setdefault((r["host"], r["regime"]), {}).setdefault(r["mode"], {})[r["seed"]] = r["AA"]
    for (host, regime), modes in sorted(table.items()):
        if "CL" not in modes or "FL" not in modes:
            continue
        seeds = sorted(set(modes["CL"]) & set(modes["FL"]))
        if len(seeds) < 2:
            continue
        cl = [modes["CL"][s] for s in seeds]
        fl = [modes["FL"][s] for s in seeds]
        res = mt.paired_t_test(fl, cl)
        w.writerow([host, regime, "AA", len(seeds), repr(sum(cl) / len(cl)), repr(sum(fl) / len(fl)),
                    mt.format_value(res.t), mt.format_value(res.p)])
    return buf.getvalue()


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        out = []
        for row in csv.DictReader(fh):
            for m in mt.METRIC_NAMES:
                row[m] = row[m] if row[m] == FAILED else mt.parse_value(row[m])
            row["seed"] = int(row["seed"])
            out.append(row)
    return out


def _out_dir(cfg: ExperimentConfig, flag: str | None) -> Path:
    return Path(os.environ.get(OUT_ENV) or flag or cfg.output)


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, args.set)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = _out_dir(cfg, args.output)
    _, ok = run_experiment(cfg, out, args.emit_plot_data)
    print(f"wrote {out / 'results.csv'}")
    return 0 if ok else 1


SWEEP_PARAMS = ("alpha_p", "E1")


def cmd_sweep(args) -> int:
    try:
        cfg = load_config(args.config, args.set)
        values = [float(v) if args.param == "alpha_p" else int(v) for v in args.values.split(",")]
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError:
        print(f"config error: --values: cannot parse {args.values!r}", file=sys.stderr)
        return 2
    out = _out_dir(cfg, args.output)
    merged, ok = [], True
    for v in values:
        fl = cfg.fl
        modes = ["FL"]
        if args.param == "alpha_p":
            # alpha_p = 0 switches the plastic term off: that point is the plain baseline
            fl = dataclasses.replace(fl, alpha_p=v)
            if v == 0:
                modes = ["CL"]
        else:
            E_CL = cfg.hosts[0].epochs
            if not 0 <= v < E_CL:
                print(f"config error: E1={v} leaves no Phase-2 epochs within E_CL={E_CL}", file=sys.stderr)
                return 2
            fl = dataclasses.replace(fl, E1=v, E2=E_CL - v)
        sub = dataclasses.replace(cfg, fl=fl, modes=modes)
        rows, sub_ok = run_experiment(sub, out / f"{args.param}={v!r}", args.emit_plot_data)
        ok &= sub_ok
        merged.extend({**r, "sweep_value": repr(v)} for r in rows)
    (out / "sweep.csv").write_text(results_csv_text(merged, extra=("sweep_value",)))
    print(f"wrote {out / 'sweep.csv'}")
    return 0 if ok else 1


def cmd_theory(args) -> int:
    tolerances = {}
    if args.tolerance is not None:
        tolerances["all"] = args.tolerance
    for item in args.tol or ():
        key, _, value = item.partition("=")
        if key not in theory.DEFAULT_TOLERANCES:
            print(f"config error: unknown tolerance key {key!r}", file=sys.stderr)
            return 2
        tolerances[key] = float(value)
    cats = [args.category] if args.category else None
    results = theory.run_suite(cats, n_cases=args.cases, seed=args.seed, tolerances=tolerances)
    text = theory.format_report(results)
    print(text)
    if args.output:
        Path(args.output).write_text(text + "\n")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 1


def format_metric_table(matrices: dict[str, mt.AccuracyMatrix]) -> str:
    lines = [f"{'regime':<8}" + "".join(f"{m:>12}" for m in mt.METRIC_NAMES)]
    machine = []
    for regime in sorted(matrices):
        rep = mt.report(matrices[regime], regime)
        vals = rep.values()
        lines.append(f"{regime:<8}" + "".join(f"{'n/a' if v is None else f'{v:.4f}':>12}" for v in vals.values()))
        machine.append(f"regime={regime} " + " ".join(f"{k}={mt.format_value(v)}" for k, v in vals.items()))
    return "\n".join(lines + machine)


def cmd_metrics(args) -> int:
    try:
        matrices = mt.read_matrix_csv(args.matrix)
    except (OSError, mt.MatrixFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(format_metric_table(matrices))
    return 0


def parse_machine_line(line: str) -> tuple[str, dict[str, float | None]]:
    fields = dict(tok.split("=", 1) for tok in line.split())
    regime = fields.pop("regime")
    return regime, {k: mt.parse_value(v) for k, v in fields.items()}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flashback", description="Flashback continual-learning experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def add_run_args(sp):
        sp.add_argument("config", help="key=value experiment config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--output", help=f"output directory (env {OUT_ENV} takes precedence)")
        sp.add_argument("--emit-plot-data", action="store_true", help="also write long-format plot_data.csv")

    r = sub.add_parser("run", help="run CL/FL experiments")
    add_run_args(r)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="sweep alpha_p or E1")
    add_run_args(s)
    s.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.set_defaults(func=cmd_sweep)

    t = sub.add_parser("theory", help="run the gradient-decomposition and recursion checks")
    t.add_argument("--category", choices=CATEGORIES)
    t.add_argument("--tolerance", type=float, help="override every tolerance")
    t.add_argument("--tol", action="append", metavar="KEY=VALUE", help="override one tolerance")
    t.add_argument("--cases", type=int, default=100)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--output", help="also write the report to this file")
    t.set_defaults(func=cmd_theory)

    m = sub.add_parser("metrics", help="recompute metrics from a matrix CSV")
    m.add_argument("matrix")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
