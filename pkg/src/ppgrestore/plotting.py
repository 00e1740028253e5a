"""Static figures for evaluation and training reports, written as PNG files."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import MetricsReport  # noqa: E402

KIND_COLORS = {"measured": "tab:gray", "restored": "tab:blue", "fppg": "tab:red"}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def bland_altman_figure(rep: MetricsReport, path: Path, channel: str = "green") -> Path | None:
    """Scatter and Bland-Altman panels of chest vs finger PP intervals."""
    rows = [r for r in rep.rows if r["channel"] == channel]
    if not rows:
        return None
    fig, axes = plt.subplots(2, 2, figsize=(9, 7))
    for row_ax, kind in zip(axes, ("measured", "restored")):
        a = np.array([r[f"{kind}_PP"] for r in rows], dtype=float)
        b = np.array([r["fppg_PP"] for r in rows], dtype=float)
        ok = np.isfinite(a) & np.isfinite(b)
        a, b = a[ok], b[ok]
        sc, ba = row_ax
        sc.scatter(b, a, s=8, color=KIND_COLORS[kind], alpha=0.6)
        if a.size:
            lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
            sc.plot([lo, hi], [lo, hi], "k--", lw=0.8)
        sc.set_xlabel("fPPG PP (s)")
        sc.set_ylabel(f"{kind} cPPG PP (s)")
        stats = rep.bland_altman.get(kind, {}).get(channel)
        ba.scatter((a + b) / 2, a - b, s=8, color=KIND_COLORS[kind], alpha=0.6)
        if stats:
            for key, style in (("bias", "-"), ("lower", "--"), ("upper", "--")):
                ba.axhline(stats[key], color="k", ls=style, lw=0.8)
        ba.set_xlabel("mean PP (s)")
        ba.set_ylabel("difference (s)")
    fig.suptitle(f"PP intervals, {channel} channel")
    return _save(fig, path)


def lag_histogram_figure(rep: MetricsReport, path: Path) -> Path | None:
    if not rep.lag_rows:
        return None
    fig, ax = plt.subplots(figsize=(7, 4))
    bins = np.arange(-2000, 2001, 25)
    for key, label, color in (
        ("restored_vs_measured_ms", "restored vs measured cPPG", "tab:blue"),
        ("restored_vs_fppg_ms", "restored cPPG vs fPPG", "tab:orange"),
    ):
        v = np.array([r[key] for r in rep.lag_rows], dtype=float)
        ax.hist(v, bins=bins, alpha=0.6, label=label, color=color)
    ax.set_xlabel("lag (ms)")
    ax.set_ylabel("chunks")
    ax.legend()
    return _save(fig, path)


def traces_figure(traces: Sequence[Mapping], path: Path, channels: Sequence[str]) -> Path | None:
    """Overlay of finger, measured and restored chest signals for each traced chunk."""
    if not traces:
        return None
    ids = list(dict.fromkeys(r["chunk_id"] for r in traces))
    fig, axes = plt.subplots(len(channels), len(ids), figsize=(4.5 * len(ids), 2.2 * len(channels)), squeeze=False)
    for j, cid in enumerate(ids):
        rows = [r for r in traces if r["chunk_id"] == cid]
        t = np.array([r["t"] for r in rows])
        for i, name in enumerate(channels):
            ax = axes[i][j]
            for kind in ("fppg", "measured", "restored"):
                ax.plot(t, [r[f"{kind}_{name}"] for r in rows], lw=0.8, color=KIND_COLORS[kind], label=kind)
            ax.set_title(f"{cid} {name}", fontsize=8)
            if i == len(channels) - 1:
                ax.set_xlabel("t (s)")
    axes[0][0].legend(fontsize=7)
    return _save(fig, path)


def history_figure(history: Sequence[Mapping], path: Path) -> Path | None:
    if not history:
        return None
    ep = [h["epoch"] for h in history]
    fig, (a, b) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("total_y", "total_x", "adv_d_y", "adv_d_x"):
        if key in history[0]:
            a.plot(ep, [h[key] for h in history], label=key)
    a.set_xlabel("epoch")
    a.set_ylabel("loss")
    a.legend()
    b.plot(ep, [h["val_RMSE_t"] for h in history], marker="o")
    b.set_xlabel("epoch")
    b.set_ylabel("validation RMSE_t")
    return _save(fig, path)


def report_figures(rep: MetricsReport, out: Path, traces: Sequence[Mapping] = ()) -> dict[str, Path]:
    """Render every evaluation figure next to the CSV report."""
    out = Path(out)
    made = {
        "bland_altman_png": bland_altman_figure(rep, out / "bland_altman.png",
                                                "green" if "green" in rep.channels else rep.channels[0]),
        "lag_histogram_png": lag_histogram_figure(rep, out / "lag_histogram.png"),
        "traces_png": traces_figure(traces, out / "traces.png", rep.channels),
    }
    return {k: v for k, v in made.items() if v is not None}
