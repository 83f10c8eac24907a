"""Figure output: gnuplot data + script, and a matplotlib PNG of the same data."""
from __future__ import annotations

import os
from collections import defaultdict

SWEEP_AXES = ("rtt_ms", "capacity_bps", "loss", "cross")
SERIES_AXES = ("engine", "direction", "cca", "accounting")
AXIS_LABEL = {"rtt_ms": "RTT (ms)", "capacity_bps": "capacity (Mbps)", "loss": "loss rate (%)",
              "cross": "background flows"}
_XSCALE = {"capacity_bps": 1e-6, "loss": 100.0}


def pick_axis(rows):
    """The swept axis: the one with the most distinct values."""
    best, n = None, 1
    for a in SWEEP_AXES:
        k = len({r[a] for r in rows})
        if k > n:
            best, n = a, k
    return best or "rtt_ms"


def series_of(rows, x_axis):
    """{series label: [(x, median, lo, hi), ...]} from summary rows."""
    out = defaultdict(list)
    others = [a for a in SWEEP_AXES if a != x_axis]
    for r in rows:
        if r.get("median_accuracy", "") == "":
            continue
        label = "/".join(r[a] for a in SERIES_AXES if len({q[a] for q in rows}) > 1 or a == "engine")
        fixed = [f"{a}={r[a]}" for a in others if len({q[a] for q in rows}) > 1]
        if fixed:
            label += " " + ",".join(fixed)
        lo = r["ci95_low"] or r["median_accuracy"]
        hi = r["ci95_high"] or r["median_accuracy"]
        out[label].append((float(r[x_axis]) * _XSCALE.get(x_axis, 1.0), float(r["median_accuracy"]),
                           float(lo), float(hi)))
    return {k: sorted(v) for k, v in sorted(out.items())}


def write_dat(path, series, x_name):
    """One gnuplot data block per series, separated by two blank lines."""
    with open(path, "w") as fh:
        for i, (label, pts) in enumerate(series.items()):
            if i:
                fh.write("\n\n")
            fh.write(f"# {label}\n# {x_name} median_accuracy ci95_low ci95_high\n")
            for p in pts:
                fh.write(" ".join(repr(v) for v in p) + "\n")


def gnuplot_script(dat_name, png_name, series, xlabel, title=""):
    lines = [
        "set terminal pngcairo size 800,500",
        f"set output '{png_name}'",
        f"set title '{title}'",
        f"set xlabel '{xlabel}'",
        "set ylabel 'accuracy (reported / capacity)'",
        "set yrange [0:*]",
        "set key bottom left",
        "set grid",
    ]
    plots = []
    for i, label in enumerate(series):
        plots.append(f"'{dat_name}' index {i} using 1:3:4 with filledcurves notitle fs transparent "
                     f"solid 0.2 lc {i + 1}")
        plots.append(f"'{dat_name}' index {i} using 1:2 with linespoints lc {i + 1} "
                     f"title '{label}'")
    lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines) + "\n"


def render_png(path, series, xlabel, title=""):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 5))
    for label, pts in series.items():
        x = [p[0] for p in pts]
        line, = ax.plot(x, [p[1] for p in pts], marker="o", label=label)
        ax.fill_between(x, [p[2] for p in pts], [p[3] for p in pts], alpha=0.2,
                        color=line.get_color())
    ax.set_xlabel(xlabel)
    ax.set_ylabel("accuracy (reported / capacity)")
    ax.set_ylim(bottom=0)
    ax.grid(True, alpha=0.3)
    if title:
        ax.set_title(title)
    ax.legend(loc="lower left", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def accuracy_figure(summary_rows, out_dir, name, x_axis=None, png=True):
    """Write <name>.dat, <name>.gp and optionally <name>.png; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    x_axis = x_axis or pick_axis(summary_rows)
    series = series_of(summary_rows, x_axis)
    dat = os.path.join(out_dir, f"{name}.dat")
    gp = os.path.join(out_dir, f"{name}.gp")
    write_dat(dat, series, x_axis)
    with open(gp, "w") as fh:
        fh.write(gnuplot_script(f"{name}.dat", f"{name}.png", series, AXIS_LABEL[x_axis], name))
    paths = [dat, gp]
    if png:
        p = os.path.join(out_dir, f"{name}.png")
        render_png(p, series, AXIS_LABEL[x_axis], name)
        paths.append(p)
    return paths


def table_dat(path, rows, columns, comment=""):
    """Whitespace-separated table for gnuplot; blanks become NaN."""
    with open(path, "w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write("# " + " ".join(columns) + "\n")
        for r in rows:
            vals = []
            for c in columns:
                v = r[c]
                if v == "" or v is None:
                    vals.append("NaN")
                elif isinstance(v, float):
                    vals.append(repr(v))
                else:
                    vals.append(str(v).replace(" ", "_"))
            fh.write(" ".join(vals) + "\n")
    return path
