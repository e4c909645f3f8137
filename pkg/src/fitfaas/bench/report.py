"""Renderers for saved benchmark reports."""

from __future__ import annotations

import csv
import io
import math
import sys

from .. import errors
from .runner import BenchmarkReport

FORMATS = ("table", "csv", "chart")
CSV_FIELDS = ["kind", "analysis", "trial", "wall_seconds", "mean_wall", "std_wall", "serial_wall", "n_patches", "failures"]


def _fmt(value, digits=1):
    return "n/a" if value is None or (isinstance(value, float) and math.isnan(value)) else f"{value:.{digits}f}"


def format_table(reports) -> str:
    header = ("Analysis", "Patches", "Wall time (s)", "Serial (s)", "Failures")
    rows = [header]
    for r in reports:
        rows.append(
            (r.label, str(r.n_patches), f"{_fmt(r.mean_wall)} ± {_fmt(r.std_wall)}", _fmt(r.serial_wall), str(len(r.failures)))
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def format_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        for i, wall in enumerate(r.wall_times_seconds):
            writer.writerow({"kind": "trial", "analysis": r.label, "trial": i, "wall_seconds": repr(wall), "n_patches": r.n_patches})
        writer.writerow(
            {
                "kind": "summary",
                "analysis": r.label,
                "mean_wall": repr(r.mean_wall),
                "std_wall": repr(r.std_wall),
                "serial_wall": "" if r.serial_wall is None else repr(r.serial_wall),
                "n_patches": r.n_patches,
                "failures": len(r.failures),
            }
        )
    return buf.getvalue()


def read_csv_summary(text: str) -> dict:
    """``{analysis: (mean_wall, std_wall, [trial walls])}`` parsed back from :func:`format_csv` output."""
    out: dict = {}
    for row in csv.DictReader(io.StringIO(text)):
        entry = out.setdefault(row["analysis"], [None, None, []])
        if row["kind"] == "trial":
            entry[2].append(float(row["wall_seconds"]))
        else:
            entry[0], entry[1] = float(row["mean_wall"]), float(row["std_wall"])
    return {k: tuple(v) for k, v in out.items()}


def render_chart(reports) -> str:
    """Grouped bars per analysis: distributed mean (with std error bar) and serial wall time, as SVG text."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "fitfaas", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(reports), 3.6))
        width = 0.38
        for i, r in enumerate(reports):
            dist = ax.bar(i - width / 2, r.mean_wall, width, yerr=r.std_wall, capsize=4, color="tab:blue",
                          label="distributed" if i == 0 else None)
            serial = ax.bar(i + width / 2, r.serial_wall or 0.0, width, color="tab:orange", hatch=None if r.serial_wall else "//",
                            label="serial" if i == 0 else None)
            dist.patches[0].set_gid(f"bar-distributed-{i}")
            serial.patches[0].set_gid(f"bar-serial-{i}")
        ax.set_xticks(range(len(reports)))
        ax.set_xticklabels([f"{r.label}\n({r.n_patches} patches)" for r in reports])
        ax.set_ylabel("wall time (s)")
        ax.legend(frameon=False)
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()


def emit_report(reports, fmt="table", output=None) -> str:
    """Render one report (or a list) as ``table``, ``csv`` or ``chart`` (SVG).

    Writes to ``output`` when given, else to stdout. Returns the rendered text.

    Raises:
        UnwritablePath: ``output`` cannot be written.
    """
    if isinstance(reports, BenchmarkReport):
        reports = [reports]
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    text = {"table": format_table, "csv": format_csv, "chart": render_chart}[fmt](list(reports))
    if output is None:
        sys.stdout.write(text)
    else:
        try:
            with open(output, "w", encoding="utf-8") as fh:
                fh.write(text)
        except OSError as exc:
            raise errors.UnwritablePath(f"{output}: {exc}") from exc
    return text
