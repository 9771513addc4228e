"""Report serialization: key=value summary, ROC CSV, and rendered figures.

The summary file doubles as the machine-readable form (comment lines start
with `#`, everything else is `key=value`). ROC points go to a sibling CSV,
and unless disabled the ROC curve, CMC curve, and score histogram are
rendered as PNGs next to it. All outputs are byte-deterministic.
"""

from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .metrics import ScoreReport, ScoreSet

_PNG_METADATA = {"Software": "fingermatch"}


def fmt(x) -> str:
    """Shortest exact decimal form of a float (round-trips via float())."""
    return repr(float(x))


def _atomic_write(path: Path, text: str) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def report_lines(report: ScoreReport, roc_csv_name: str | None = None) -> list[str]:
    lines = [
        "# fingermatch evaluation report",
        f"protocol={report.protocol}",
        f"stage={report.stage}",
        f"fusion_weight={fmt(report.fusion_weight)}",
        f"genuine_pairs={report.genuine_count}",
        f"impostor_pairs={report.impostor_count}",
        f"eer={fmt(report.eer)}",
    ]
    for target in sorted(report.tar_at_far, reverse=True):
        taf = report.tar_at_far[target]
        lines.append(f"tar_at_far_{fmt(target)}={fmt(taf.value)}")
        lines.append(
            f"tar_at_far_{fmt(target)}_resolution_limited="
            + ("true" if taf.resolution_limited else "false")
        )
    for k, value in enumerate(report.cmc, start=1):
        lines.append(f"cmc_rank_{k}={fmt(value)}")
    lines.append(f"roc_points={len(report.roc)}")
    if roc_csv_name is not None:
        lines.append(f"roc_csv={roc_csv_name}")
    return lines


def write_roc_csv(report: ScoreReport, path: Path) -> None:
    rows = ["threshold,far,tar"]
    rows.extend(f"{fmt(p.threshold)},{fmt(p.far)},{fmt(p.tar)}" for p in report.roc)
    _atomic_write(path, "\n".join(rows) + "\n")


def _save(fig, path: Path) -> None:
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)


def render_figures(report: ScoreReport, stem: Path) -> list[Path]:
    """ROC curve, CMC curve, and (when scores are present) score histogram."""
    written = []

    fig, ax = plt.subplots(figsize=(4.5, 3.4), constrained_layout=True)
    fars = [p.far for p in report.roc]
    tars = [p.tar for p in report.roc]
    ax.plot(fars, tars, drawstyle="steps-post", color="tab:blue")
    ax.plot([0, 1], [1, 0], ls=":", lw=0.8, color="gray")  # EER diagonal
    ax.set_xlabel("false accept rate")
    ax.set_ylabel("true accept rate")
    ax.set_title(f"ROC ({report.protocol}, stage {report.stage}), EER={report.eer:.4f}")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    roc_png = stem.with_name(stem.name + "_roc.png")
    _save(fig, roc_png)
    written.append(roc_png)

    fig, ax = plt.subplots(figsize=(4.5, 3.4), constrained_layout=True)
    ranks = range(1, len(report.cmc) + 1)
    ax.plot(ranks, report.cmc, marker="o", ms=4, color="tab:green")
    ax.set_xlabel("rank")
    ax.set_ylabel("recall")
    ax.set_title(f"CMC ({report.protocol}, stage {report.stage})")
    ax.set_xticks(list(ranks))
    ax.set_ylim(0.0, 1.05)
    cmc_png = stem.with_name(stem.name + "_cmc.png")
    _save(fig, cmc_png)
    written.append(cmc_png)

    if report.score_set is not None:
        fig, ax = plt.subplots(figsize=(4.5, 3.4), constrained_layout=True)
        ax.hist(report.score_set.impostor, bins=40, range=(-1, 1), alpha=0.6,
                label="impostor", color="tab:red", density=True)
        ax.hist(report.score_set.genuine, bins=40, range=(-1, 1), alpha=0.6,
                label="genuine", color="tab:blue", density=True)
        ax.set_xlabel("score")
        ax.set_ylabel("density")
        ax.set_title(f"Score distributions ({report.protocol}, stage {report.stage})")
        ax.legend(loc="upper left")
        hist_png = stem.with_name(stem.name + "_scores.png")
        _save(fig, hist_png)
        written.append(hist_png)
    return written


def write_report(report: ScoreReport, out_path, figures: bool = True) -> list[Path]:
    """Write summary + ROC CSV (+ figures); returns every path written."""
    out = Path(out_path)
    stem = out.with_suffix("") if out.suffix else out
    roc_csv = stem.with_name(stem.name + "_roc.csv")
    _atomic_write(out, "\n".join(report_lines(report, roc_csv.name)) + "\n")
    write_roc_csv(report, roc_csv)
    written = [out, roc_csv]
    if figures:
        written.extend(render_figures(report, stem))
    return written


def parse_report(path) -> dict:
    """Read a key=value report back into a dict of floats/strings."""
    out: dict = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            try:
                out[key] = float(value)
            except ValueError:
                out[key] = value
    return out
