"""Render round metrics to PNG files next to the CSV output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .metrics import CSV_HEADER, RoundRecord


def _save(fig, path: Path):
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def render_figures(records: list[RoundRecord], out_dir, title: str = ""):
    """Write accuracy/communication, sparsity and alignment plots."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not records:
        return []
    rounds = [r.round_idx for r in records]
    mb_total = [(r.bytes_up_cum + r.bytes_down_cum) / 1e6 for r in records]
    written = []

    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.plot(mb_total, [r.global_acc for r in records], marker="o", ms=3,
            label="global accuracy")
    ax.plot(mb_total, [r.local_acc_mean for r in records], marker="s", ms=3,
            label="mean local accuracy")
    ax.set_xlabel("communication (MB, up + down)")
    ax.set_ylabel("accuracy")
    ax.set_title(title or "accuracy vs. communication")
    ax.grid(alpha=0.3)
    ax.legend()
    path = out_dir / "accuracy_vs_bytes.png"
    _save(fig, path)
    written.append(path)

    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.plot(rounds, [r.sparsity_pct for r in records], color="tab:red")
    ax.set_xlabel("round")
    ax.set_ylabel("sparsity (%)")
    ax.set_ylim(-2, 102)
    ax.set_title(title or "sparsity")
    ax.grid(alpha=0.3)
    path = out_dir / "sparsity_rounds.png"
    _save(fig, path)
    written.append(path)

    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.plot(rounds, [r.tv_avg for r in records], label="TV avg")
    ax.plot(rounds, [r.tv_max for r in records], label="TV max", ls="--")
    ax.set_xlabel("round")
    ax.set_ylabel("|pi - theta|")
    ax.set_title(title or "client/server gate alignment")
    ax.grid(alpha=0.3)
    ax.legend()
    path = out_dir / "tv_rounds.png"
    _save(fig, path)
    written.append(path)
    return written


def read_metrics_csv(path) -> list[RoundRecord]:
    records = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected CSV header")
        for line in fh:
            line = line.strip()
            if line:
                records.append(RoundRecord.from_csv_row(line))
    return records


def render_from_csv(csv_path, out_dir, title: str = ""):
    return render_figures(read_metrics_csv(csv_path), out_dir, title=title)
