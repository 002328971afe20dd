"""Run-curve exports: merge training logs into tidy CSV and render figures.

The tidy long format is one row per (run, epoch, metric) with metrics
``lr``, ``train_loss`` and ``val_nmse_db``; downstream plotting tools can
pivot it however they like. Rendering writes PNG figures next to the CSV:
a log-scale loss plot and, when validation points exist, an NMSE plot.
"""

from __future__ import annotations

from pathlib import Path

from .training import CurveLog

TIDY_HEADER = "run_name,epoch,metric,value"


def merge_curves(named_logs):
    """[(name, CurveLog)] -> tidy rows [(run_name, epoch, metric, value)]."""
    if not named_logs:
        raise ValueError("no curve logs given")
    rows = []
    for name, log in named_logs:
        for r in log.rows:
            rows.append((name, r.epoch, "lr", r.lr))
            rows.append((name, r.epoch, "train_loss", r.train_loss))
            if r.val_nmse_db is not None:
                rows.append((name, r.epoch, "val_nmse_db", r.val_nmse_db))
    return rows


def load_runs(specs):
    """Parse ["name=path" | "path", ...] into [(name, CurveLog)]."""
    runs = []
    for spec in specs:
        if "=" in spec:
            name, path = spec.split("=", 1)
        else:
            path = spec
            name = Path(path).stem
        runs.append((name, CurveLog.from_csv(path)))
    return runs


def write_tidy_csv(rows, path):
    lines = [TIDY_HEADER]
    for run_name, epoch, metric, value in rows:
        lines.append(f"{run_name},{epoch},{metric},{value!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def render_figures(named_logs, out_base):
    """Write loss (and, if present, validation NMSE) figures; returns paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_base = Path(out_base)
    out_base.parent.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for name, log in named_logs:
        ax.semilogy([r.epoch for r in log.rows], [r.train_loss for r in log.rows], label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training MSE loss")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    loss_path = out_base.with_name(out_base.name + ".loss.png")
    fig.savefig(loss_path, dpi=120)
    plt.close(fig)
    written.append(loss_path)

    have_val = [
        (name, [(r.epoch, r.val_nmse_db) for r in log.rows if r.val_nmse_db is not None])
        for name, log in named_logs
    ]
    have_val = [(n, pts) for n, pts in have_val if pts]
    if have_val:
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        for name, pts in have_val:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3, label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("validation NMSE (dB)")
        ax.legend()
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        nmse_path = out_base.with_name(out_base.name + ".nmse.png")
        fig.savefig(nmse_path, dpi=120)
        plt.close(fig)
        written.append(nmse_path)
    return written
