"""Figure rendering for bench reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_MODE_STYLE = {"full": dict(color="tab:blue", marker="o"),
               "reuse": dict(color="tab:orange", marker="s")}


def plot_latency_vs_doclen(rows, path: str | Path, batch: int | None = None) -> bool:
    """Mean per-query latency against document length, one line per mode.

    Uses the smallest benched batch size unless one is given. Returns False
    when the rows cannot support the plot (single sweep point per mode).
    """
    if batch is None:
        batches = sorted({r.batch for r in rows})
        if not batches:
            return False
        batch = batches[0]
    fig, ax = plt.subplots(figsize=(5, 3.4))
    drew = False
    for mode in ("full", "reuse"):
        pts = sorted((r.document_len, r.mean_latency_ms)
                     for r in rows if r.mode == mode and r.batch == batch)
        if len(pts) < 1:
            continue
        xs, ys = zip(*pts)
        ax.plot(xs, ys, label=mode, **_MODE_STYLE[mode])
        drew = True
    if not drew:
        plt.close(fig)
        return False
    ax.set_xlabel("document length (tokens)")
    ax.set_ylabel("mean latency (ms)")
    ax.set_title(f"Per-query latency, batch={batch}")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def plot_throughput_vs_batch(rows, path: str | Path,
                             document_len: int | None = None) -> bool:
    """Throughput against batch size, one line per mode.

    Uses the largest benched document length unless one is given.
    """
    if document_len is None:
        lens = sorted({r.document_len for r in rows})
        if not lens:
            return False
        document_len = lens[-1]
    fig, ax = plt.subplots(figsize=(5, 3.4))
    drew = False
    for mode in ("full", "reuse"):
        pts = sorted((r.batch, r.report.throughput_qps)
                     for r in rows if r.mode == mode and r.document_len == document_len)
        if len(pts) < 1:
            continue
        xs, ys = zip(*pts)
        ax.plot(xs, ys, label=mode, **_MODE_STYLE[mode])
        drew = True
    if not drew:
        plt.close(fig)
        return False
    ax.set_xlabel("max batch size")
    ax.set_ylabel("throughput (queries/s)")
    ax.set_title(f"Throughput, document_len={document_len}")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True
