"""Render benchmark result rows into figures next to the CSV.

Three views: throughput by mode (grouped over client counts), p50/p99
latency by mode, and the mean stage breakdown as stacked bars. Rows are the
dicts produced by bench.parse_csv, so figures can be regenerated from a
results file alone.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_MODE_ORDER = ("sync", "async", "pipeline")
_STAGES = ("copy_in_us", "wait_us", "exec_us", "copy_out_us")
_STAGE_LABELS = ("copy in", "wait", "execute", "copy out")

plt.rcParams["figure.figsize"] = (6.4, 3.6)
plt.rcParams["font.size"] = 9
plt.rcParams["axes.grid"] = True
plt.rcParams["grid.alpha"] = 0.3


def _label(row: dict) -> str:
    return f"{row['mode']}/{row['device']}/n{row['n']}/b{row['batch']}"


def _sorted_rows(rows: list[dict]) -> list[dict]:
    def key(row):
        mode = _MODE_ORDER.index(row["mode"]) if row["mode"] in _MODE_ORDER else 99
        return (row["n"], mode, row["device"], row["payload_bytes"], row["batch"])
    return sorted(rows, key=key)


def _bar_figure(rows, values, ylabel, title, path: Path):
    fig, ax = plt.subplots()
    labels = [_label(r) for r in rows]
    ax.bar(range(len(rows)), values, color="#4878a8")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)


def render_report_figures(rows: list[dict], out_dir: str | Path,
                          prefix: str = "results") -> list[Path]:
    """Write throughput, latency, and breakdown figures; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = _sorted_rows(rows)
    if not rows:
        return []
    written: list[Path] = []

    path = out / f"{prefix}_throughput.png"
    _bar_figure(rows, [r["throughput_rps"] for r in rows],
                "requests / s", "Throughput by configuration", path)
    written.append(path)

    fig, ax = plt.subplots()
    x = range(len(rows))
    ax.bar(x, [r["latency_p50_us"] for r in rows], color="#4878a8", label="p50")
    ax.plot(x, [r["latency_p99_us"] for r in rows], "v--", color="#b24745",
            markersize=4, label="p99")
    ax.set_xticks(list(x))
    ax.set_xticklabels([_label(r) for r in rows], rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("latency (us)")
    ax.set_title("End-to-end latency")
    ax.legend()
    fig.tight_layout()
    path = out / f"{prefix}_latency.png"
    fig.savefig(path, dpi=140)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots()
    bottoms = [0.0] * len(rows)
    for stage, label in zip(_STAGES, _STAGE_LABELS):
        heights = [r[stage] for r in rows]
        ax.bar(x, heights, bottom=bottoms, label=label)
        bottoms = [b + h for b, h in zip(bottoms, heights)]
    ax.set_xticks(list(x))
    ax.set_xticklabels([_label(r) for r in rows], rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("mean time per request (us)")
    ax.set_title("Server-side stage breakdown")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = out / f"{prefix}_breakdown.png"
    fig.savefig(path, dpi=140)
    plt.close(fig)
    written.append(path)
    return written
