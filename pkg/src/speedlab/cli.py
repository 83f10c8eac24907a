"""speedlab command line: serve, test, matrix, paired, analyze, figures."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from importlib import resources

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL = 0, 1, 2

log = logging.getLogger("speedlab")


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; 2 means partial failure here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed_override(args):
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("SPEEDLAB_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise SystemExit(f"SPEEDLAB_SEED must be an integer, got {env!r}") from None
    return None


def canned_configs():
    files = resources.files("speedlab") / "configs"
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json"))


def _resolve_config(name):
    if os.path.exists(name):
        with open(name) as fh:
            return fh.read(), name
    stem = os.path.basename(name)
    stem = stem[:-5] if stem.endswith(".json") else stem
    if stem in canned_configs():
        p = resources.files("speedlab") / "configs" / f"{stem}.json"
        return p.read_text(), f"{stem}.json"
    raise FileNotFoundError(f"no such config file or canned config: {name} "
                            f"(canned: {', '.join(canned_configs())})")


def _write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float)
                                                          else r[k])) for k in columns})


# --- subcommands -----------------------------------------------------------------------

def cmd_serve(args):
    from .wire import serve
    try:
        serve(args.listen, {"rate_bps": args.rate})
    except KeyboardInterrupt:
        pass
    except (OSError, ValueError) as e:
        print(f"speedlab serve: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def _report_dict(rep):
    return {
        "engine": rep.engine.value, "direction": rep.direction.value,
        "accounting": rep.accounting.value,
        "reported_bps": rep.reported_bits_per_s, "average_bps": rep.average_bits_per_s,
        "duration_s": rep.duration_s, "srtt_s": rep.srtt_s,
        "conn_count_trace": [list(x) for x in rep.conn_count_trace],
        "samples": [[s.t_offset_s, s.bytes_cum, s.inst_speed_bits_per_s] for s in rep.samples],
        "meta": rep.meta,
    }


def cmd_test(args):
    from .engines import AccountingMode, AdaptivePolicy, EngineError, run_engine
    acct = AccountingMode.SENDER_APP if args.accounting == "app" else AccountingMode.RECEIVER_ACKED
    policy = AdaptivePolicy(max_conns=args.max_conns)
    try:
        if args.sim:
            from .harness import Cell, run_once
            cap, rtt, loss = _parse_sim(args.sim)
            seed = _seed_override(args)
            cell = Cell(args.engine, args.direction, cap, rtt, loss, args.cca, args.cross,
                        args.accounting)
            rep = run_once(cell, 1 if seed is None else seed, policy)
        else:
            from .wire import client_run
            rep = client_run(args.server, {"engine": args.engine, "direction": args.direction,
                                           "accounting": acct, "policy": policy})
    except EngineError as e:
        print(f"test failed: {e}", file=sys.stderr)
        return EXIT_PARTIAL
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    d = _report_dict(rep)
    print(f"{d['engine']} {d['direction']}: {d['reported_bps'] / 1e6:.2f} Mbps reported, "
          f"{d['average_bps'] / 1e6:.2f} Mbps average, {d['duration_s']:.2f} s, "
          f"{max(n for _, n in rep.conn_count_trace)} connection(s)")
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w") as fh:
            json.dump(d, fh, indent=2, default=str)
            fh.write("\n")
    return EXIT_OK


def _parse_sim(text):
    parts = text.split(",")
    if not 1 <= len(parts) <= 3:
        raise ValueError(f"--sim expects CAPACITY_BPS[,RTT_MS[,LOSS]], got {text!r}")
    vals = [float(p) for p in parts] + [10.0, 0.0][len(parts) - 1:]
    return vals[0], vals[1], vals[2]


def cmd_matrix(args):
    from . import figures, harness
    try:
        text, source = _resolve_config(args.config)
        spec = harness.ExperimentSpec.from_json(text, source)
    except (FileNotFoundError, harness.ConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    seed = _seed_override(args)
    if seed is not None:
        spec.base_seed = seed
    os.makedirs(args.out, exist_ok=True)
    total = len(spec.cells) * spec.repetitions
    log.info("%s: %d cells x %d runs", spec.name, len(spec.cells), spec.repetitions)
    rows = harness.run_matrix(spec, workers=args.jobs,
                              progress=lambda i, n: log.debug("run %d/%d", i, n))
    runs = os.path.join(args.out, f"{spec.name}-runs.csv")
    summ = os.path.join(args.out, f"{spec.name}-summary.csv")
    with open(runs, "w") as fh:
        fh.write(harness.rows_to_csv(rows))
    summary = harness.summarize_rows(rows)
    with open(summ, "w") as fh:
        fh.write(harness.rows_to_csv(summary, harness.SUMMARY_COLUMNS))
    if not args.no_figures:
        figures.accuracy_figure(summary, args.out, spec.name, png=not args.no_png)
    n_err = sum(1 for r in rows if r["error"])
    for s in summary:
        acc = s["median_accuracy"]
        print(f"{s['cell_id']}: median accuracy {float(acc):.3f}" if acc else
              f"{s['cell_id']}: all runs failed")
    print(f"{total - n_err}/{total} runs ok; wrote {runs} and {summ}")
    return EXIT_PARTIAL if n_err else EXIT_OK


PAIR_COLUMNS = ("household_id", "server_id", "timestamp_iso8601", "direction", "order", "gap_s",
                "adaptive_bps", "single_bps", "adaptive_duration_s", "adaptive_conn_max",
                "background_pre_a_bps", "background_pre_b_bps", "error", "warnings")


def cmd_paired(args):
    from . import harness, stats
    import numpy as np

    seed = _seed_override(args)
    seed = 0 if seed is None else seed
    os.makedirs(args.out, exist_ok=True)
    obs_path = os.path.join(args.out, "observations.csv")
    if args.model:
        obs, truth = harness.generate_observations(
            n_households=args.households, n_degraded=args.degraded, tests_peak=args.tests // 2,
            tests_offpeak=args.tests - args.tests // 2, weak_server_factor=args.weak_server,
            seed=seed, direction=args.direction)
        stats.write_observations(obs_path, obs)
        with open(os.path.join(args.out, "truth.json"), "w") as fh:
            json.dump({"degraded": sorted(truth.degraded), "weak_server": truth.weak_server}, fh,
                      indent=2)
            fh.write("\n")
        print(f"wrote {len(obs)} observations for {args.households} households to {obs_path}")
        return EXIT_OK
    rng = np.random.default_rng(seed)
    records = []
    for i in range(args.households):
        down = float(rng.choice([50e6, 100e6, 200e6, 500e6]))
        h = harness.Household(
            f"hh{i:03d}", down, down / 10, float(rng.choice([5.0, 10.0, 20.0, 40.0])),
            {f"srv{j}": float(rng.uniform(0, 30)) for j in range(args.servers)},
            peak_cross=args.peak_cross, offpeak_cross=0, tz=args.tz)
        records += harness.simulate_household(h, args.tests, args.direction, seed * 1000 + i,
                                              args.idle_gap)
        log.info("household %s done", h.household_id)
    rows = []
    for r in records:
        ok = r.ok
        rows.append({
            "household_id": r.household_id, "server_id": r.server_id,
            "timestamp_iso8601": r.timestamp.isoformat(), "direction": r.direction.value,
            "order": r.order, "gap_s": r.gap_s,
            "adaptive_bps": r.report_a.reported_bits_per_s if ok else "",
            "single_bps": r.report_b.reported_bits_per_s if ok else "",
            "adaptive_duration_s": r.report_a.duration_s if ok else "",
            "adaptive_conn_max": max(n for _, n in r.report_a.conn_count_trace) if ok else "",
            "background_pre_a_bps": r.background_pre_a_bps,
            "background_pre_b_bps": r.background_pre_b_bps,
            "error": r.error, "warnings": "; ".join(r.warnings)})
    _write_csv(os.path.join(args.out, "pairs.csv"), rows, PAIR_COLUMNS)
    stats.write_observations(obs_path, harness.paired_observations(records))
    bad = sum(1 for r in records if not r.ok)
    print(f"{len(records) - bad}/{len(records)} pairs ok; wrote {obs_path}")
    return EXIT_PARTIAL if bad else EXIT_OK


def cmd_analyze(args):
    from . import figures, stats
    if args.analysis not in stats.ANALYSES:
        print(f"unknown analysis {args.analysis!r}; valid: {', '.join(stats.ANALYSES)}",
              file=sys.stderr)
        return EXIT_USAGE
    try:
        obs = stats.load_observations(args.input)
        fn = stats.ANALYSES[args.analysis]
        kw = {}
        if args.analysis in ("paired-ttest", "time-of-day"):
            kw["alpha"] = args.alpha
        if args.analysis == "time-of-day" and args.tz:
            kw["local_tz"] = args.tz
        rows = fn(obs, **kw)
    except (OSError, stats.StatsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, f"{args.analysis}.csv")
    cols = list(rows[0]) if rows else []
    _write_csv(out, rows, cols)
    lines = stats.summarize(args.analysis, rows)
    with open(os.path.join(args.out, f"{args.analysis}-summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    if rows:
        figures.table_dat(os.path.join(args.out, f"{args.analysis}.dat"), rows, cols,
                          args.analysis)
    print("\n".join(lines))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_figures(args):
    from . import figures, harness
    try:
        rows = harness.read_rows(args.input)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if not rows or "median_accuracy" not in rows[0]:
        print(f"error: {args.input} is not a matrix summary CSV (no median_accuracy column)",
              file=sys.stderr)
        return EXIT_USAGE
    name = args.name or os.path.basename(args.input).removesuffix(".csv").removesuffix("-summary")
    paths = figures.accuracy_figure(rows, args.out, name, args.x, png=not args.no_png)
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="speedlab", description="Speed-test methodology lab.")
    p.add_argument("-v", "--verbose", action="count", default=0,
                   help="more logging (repeat for debug)")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS,
                        help="more logging (repeat for debug)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("serve", parents=[common], help="run a measurement server",
                       description="Serve download/upload sessions over TCP until interrupted.")
    s.add_argument("--listen", default="127.0.0.1:8650", metavar="HOST:PORT",
                   help="address to listen on (default: %(default)s)")
    s.add_argument("--rate", type=float, default=0.0, metavar="BPS",
                   help="pace each download session to BPS bits/s (0 = unpaced)")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("test", parents=[common], help="run one speed test",
                       description="Run one speed test against a server, or on an emulated "
                                   "link with --sim.")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--server", metavar="HOST:PORT", help="measurement server endpoint")
    g.add_argument("--sim", metavar="CAP_BPS[,RTT_MS[,LOSS]]",
                   help="run on an emulated link instead (RTT default 10 ms, loss 0)")
    s.add_argument("--engine", choices=("single", "adaptive"), default="single",
                   help="test engine (default: %(default)s)")
    s.add_argument("--direction", choices=("down", "up"), default="down",
                   help="transfer direction (default: %(default)s)")
    s.add_argument("--accounting", choices=("app", "acked"), default="acked",
                   help="upload byte counting: bytes written by the app or bytes acknowledged "
                        "(default: %(default)s)")
    s.add_argument("--max-conns", type=int, default=8, metavar="N",
                   help="adaptive engine connection cap (default: %(default)s)")
    s.add_argument("--cca", choices=("bbr", "cubic"), default="bbr",
                   help="congestion control with --sim (default: %(default)s)")
    s.add_argument("--cross", type=int, default=0, metavar="N",
                   help="background flows with --sim (default: %(default)s)")
    s.add_argument("--seed", type=int, help="seed with --sim (overrides SPEEDLAB_SEED)")
    s.add_argument("--out", metavar="FILE", help="write the full report as JSON")
    s.set_defaults(func=cmd_test)

    s = sub.add_parser("matrix", parents=[common], help="run an experiment grid",
                       description="Run an experiment grid on the emulated link and write "
                                   "per-run and summary CSVs plus figure files.")
    s.add_argument("--config", required=True, metavar="PATH|NAME",
                   help="experiment JSON file or canned config name "
                        "(e.g. fig-latency-download)")
    s.add_argument("--out", default="out", metavar="DIR",
                   help="output directory, created if absent (default: %(default)s)")
    s.add_argument("--seed", type=int, help="base seed override (also SPEEDLAB_SEED)")
    s.add_argument("--jobs", type=int, default=None, metavar="N",
                   help="worker processes (default: config value or 1)")
    s.add_argument("--no-figures", action="store_true", help="skip .dat/.gp/.png output")
    s.add_argument("--no-png", action="store_true", help="skip the rendered PNG")
    s.set_defaults(func=cmd_matrix)

    s = sub.add_parser("paired", parents=[common], help="generate paired household observations",
                       description="Run back-to-back adaptive and single-stream tests for "
                                   "simulated households, or draw them from the statistical "
                                   "household model with --model.")
    s.add_argument("--households", type=int, default=3, metavar="N",
                   help="number of households (default: %(default)s)")
    s.add_argument("--tests", type=int, default=4, metavar="N",
                   help="paired tests per household (default: %(default)s)")
    s.add_argument("--servers", type=int, default=3, metavar="N",
                   help="servers per household (default: %(default)s)")
    s.add_argument("--direction", choices=("down", "up"), default="down",
                   help="transfer direction (default: %(default)s)")
    s.add_argument("--idle-gap", type=float, default=5.0, metavar="S",
                   help="idle seconds between the two tests (default: %(default)s)")
    s.add_argument("--peak-cross", type=int, default=1, metavar="N",
                   help="background flows during 19:00-23:00 (default: %(default)s)")
    s.add_argument("--tz", default="America/Chicago",
                   help="household time zone (default: %(default)s)")
    s.add_argument("--model", action="store_true",
                   help="use the statistical household model instead of the emulator")
    s.add_argument("--degraded", type=int, default=0, metavar="N",
                   help="--model: households with a peak-hour single-stream drop "
                        "(default: %(default)s)")
    s.add_argument("--weak-server", type=float, default=1.0, metavar="F",
                   help="--model: speed factor of server srv0 (default: %(default)s)")
    s.add_argument("--seed", type=int, help="seed (overrides SPEEDLAB_SEED)")
    s.add_argument("--out", default="out", metavar="DIR",
                   help="output directory, created if absent (default: %(default)s)")
    s.set_defaults(func=cmd_paired)

    s = sub.add_parser("analyze", parents=[common], help="run a statistics analysis",
                       description="Analyze paired observations: paired-ttest, reldiff-classes, "
                                   "server-rank, time-of-day or consistency.")
    s.add_argument("--input", required=True, metavar="CSV",
                   help="observations CSV (household_id,server_id,timestamp_iso8601,"
                        "direction,tool,speed_bps[,tier])")
    s.add_argument("--analysis", required=True, metavar="NAME",
                   help="analysis name: paired-ttest, reldiff-classes, server-rank, "
                        "time-of-day, consistency")
    s.add_argument("--alpha", type=float, default=0.01,
                   help="significance level (default: %(default)s)")
    s.add_argument("--tz", help="convert timestamps to this zone before the peak split")
    s.add_argument("--out", default="out", metavar="DIR",
                   help="output directory, created if absent (default: %(default)s)")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("figures", parents=[common], help="draw a matrix summary",
                       description="Write gnuplot data and script files and a PNG for a "
                                   "matrix summary CSV.")
    s.add_argument("--input", required=True, metavar="CSV", help="matrix summary CSV")
    s.add_argument("--out", default="out", metavar="DIR",
                   help="output directory, created if absent (default: %(default)s)")
    s.add_argument("--x", choices=("rtt_ms", "capacity_bps", "loss", "cross"),
                   help="x axis (default: the swept parameter)")
    s.add_argument("--name", help="output file stem (default: from the input name)")
    s.add_argument("--no-png", action="store_true", help="skip the rendered PNG")
    s.set_defaults(func=cmd_figures)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
