"""Run reporting: completeness checks, text and CSV summaries, figures.

Everything here re-derives its output from files a previous subcommand wrote,
so regenerating a report is byte-identical as long as those inputs have not
changed. Figures are rendered with the Agg backend at a fixed dpi and with
the Software metadata stripped to keep the PNG bytes stable.
"""

import os
from dataclasses import dataclass, field

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .dataio import write_text_file
from .errors import DataFormatError
from .evaluation import ResultsTable, moving_average
from .trainer import PRETRAIN_FAMILIES

_SAVEFIG = dict(dpi=100, metadata={"Software": None})


def read_train_log(path) -> dict:
    """Parse a step,objective,estimate,grad_norm CSV back into arrays."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    except OSError as exc:
        raise DataFormatError(f"cannot read train log {path}: {exc}") from exc
    if not lines or lines[0] != "step,objective,estimate,grad_norm":
        raise DataFormatError(f"{path}: unrecognized train log header")
    rows = np.array([[float(p) for p in ln.split(",")] for ln in lines[1:]])
    if rows.size == 0:
        raise DataFormatError(f"{path}: empty train log")
    return {"step": rows[:, 0].astype(int), "objective": rows[:, 1],
            "estimate": rows[:, 2], "grad_norm": rows[:, 3]}


@dataclass
class ReportStatus:
    missing: list = field(default_factory=list)
    written: list = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.missing


def _expected_matrix_files(out_dir, seeds) -> list:
    paths = []
    for arm, bound in PRETRAIN_FAMILIES:
        for seed in seeds:
            base = os.path.join(out_dir, "matrix", f"{arm}-{bound}-seed{seed}")
            paths.append(os.path.join(base, "pretrain_log.csv"))
            paths.append(os.path.join(base, "probe_frozen_log.csv"))
            paths.append(os.path.join(base, "probe_tuned_log.csv"))
    for seed in seeds:
        paths.append(os.path.join(out_dir, "matrix", f"image-only-seed{seed}",
                                  "probe_scratch_log.csv"))
    return paths


def render_auc_bars(table: ResultsTable, out_png):
    rows = [r for r in table.rows if r.task == "overall"]
    labels = [f"{r.arm}\n{r.bound}/{r.probe_mode}" for r in rows]
    means = [r.mean_auc for r in rows]
    errs = [r.stdev for r in rows]
    fig, ax = plt.subplots(figsize=(10, 4.5))
    x = np.arange(len(rows))
    ax.bar(x, means, yerr=errs, capsize=3, color="#4878a8")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("overall AUC (mean over seeds)")
    ax.set_ylim(0.4, 1.0)
    ax.axhline(0.5, color="gray", linewidth=0.8, linestyle=":")
    ax.set_title("Downstream probe quality by arm")
    fig.tight_layout()
    fig.savefig(out_png, **_SAVEFIG)
    plt.close(fig)


def _family_curves(out_dir, seeds):
    """Window-100 smoothed pretraining curves, one per (family, seed)."""
    for arm, bound in PRETRAIN_FAMILIES:
        for seed in seeds:
            log = read_train_log(os.path.join(
                out_dir, "matrix", f"{arm}-{bound}-seed{seed}",
                "pretrain_log.csv"))
            yield arm, bound, seed, log["step"], moving_average(
                log["objective"], 100)


def pretrain_curves_csv_text(out_dir, seeds) -> str:
    """Plot data behind the pretraining figure, one row per smoothed step."""
    lines = ["arm,bound,seed,step,smoothed_objective"]
    for arm, bound, seed, steps, smoothed in _family_curves(out_dir, seeds):
        lines.extend(f"{arm},{bound},{seed},{s},{v!r}"
                     for s, v in zip(steps, smoothed))
    return "\n".join(lines) + "\n"


def render_pretrain_curves(out_dir, seeds, out_png):
    fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True)
    curves = {}
    for arm, bound, seed, steps, smoothed in _family_curves(out_dir, seeds):
        curves.setdefault((arm, bound), []).append((seed, steps, smoothed))
    for ax, (arm, bound) in zip(axes.ravel(), PRETRAIN_FAMILIES):
        for seed, steps, smoothed in curves[(arm, bound)]:
            ax.plot(steps, smoothed, linewidth=1.0, label=f"seed {seed}")
        ax.set_title(f"{arm} / {bound}", fontsize=9)
        ax.tick_params(labelsize=7)
    axes[0, 0].legend(fontsize=6)
    for ax in axes[1]:
        ax.set_xlabel("step")
    for ax in axes[:, 0]:
        ax.set_ylabel("objective (window-100 mean)")
    fig.suptitle("Pretraining objective by arm family")
    fig.tight_layout()
    fig.savefig(out_png, **_SAVEFIG)
    plt.close(fig)


def render_mi_trace(log_path, summary_path, out_png):
    log = read_train_log(log_path)
    truth = None
    try:
        with open(summary_path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        head = lines[0].split(",")
        vals = lines[1].split(",")
        truth = float(vals[head.index("true_mi_nats")])
    except (OSError, ValueError, IndexError):
        pass
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(log["step"], log["estimate"], linewidth=0.6, alpha=0.35,
            color="#4878a8", label="per-step estimate")
    ax.plot(log["step"], moving_average(log["estimate"], 100), linewidth=1.4,
            color="#28486a", label="window-100 mean")
    if truth is not None:
        ax.axhline(truth, color="#a83232", linewidth=1.0, linestyle="--",
                   label="true MI")
    ax.set_xlabel("step")
    ax.set_ylabel("estimate (nats)")
    ax.set_title("MI estimate on correlated Gaussian pairs")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, **_SAVEFIG)
    plt.close(fig)


def write_report(out_dir, seeds) -> ReportStatus:
    """Collect one run directory into report files and figures.

    Referenced runs: the generated dataset, the matrix with its per-arm logs
    and results.csv. A Gaussian estimation run is included when its directory
    exists. Anything referenced but absent lands in `missing`, and nothing is
    written unless every reference resolves.
    """
    status = ReportStatus()
    expected = [os.path.join(out_dir, "data", name)
                for name in ("train.bin", "test.bin", "region_mi.csv")]
    results_csv = os.path.join(out_dir, "results.csv")
    expected.append(results_csv)
    expected.extend(_expected_matrix_files(out_dir, seeds))
    estimate_dir = os.path.join(out_dir, "estimate")
    if os.path.isdir(estimate_dir):
        expected.append(os.path.join(estimate_dir, "estimate_log.csv"))
        expected.append(os.path.join(estimate_dir, "estimate_summary.csv"))
    failures_marker = os.path.join(out_dir, "matrix_failures.txt")
    if os.path.exists(failures_marker):
        status.missing.append(failures_marker + " (recorded arm failures)")
    status.missing.extend(os.path.relpath(p, out_dir)
                          for p in expected if not os.path.exists(p))
    if status.missing:
        return status

    with open(results_csv, "r", encoding="utf-8") as fh:
        table = ResultsTable.from_csv_text(fh.read())
    report_dir = os.path.join(out_dir, "report")
    report_csv = os.path.join(report_dir, "report.csv")
    write_text_file(report_csv, table.to_csv_text())
    report_txt = os.path.join(report_dir, "report.txt")
    write_text_file(report_txt, table.render_text())
    status.written.extend([report_csv, report_txt])

    curves_csv = os.path.join(report_dir, "pretrain_smoothed.csv")
    write_text_file(curves_csv, pretrain_curves_csv_text(out_dir, seeds))
    status.written.append(curves_csv)

    bars = os.path.join(report_dir, "auc_bars.png")
    render_auc_bars(table, bars)
    status.written.append(bars)
    curves = os.path.join(report_dir, "pretrain_curves.png")
    render_pretrain_curves(out_dir, seeds, curves)
    status.written.append(curves)
    if os.path.isdir(estimate_dir):
        trace = os.path.join(report_dir, "mi_trace.png")
        render_mi_trace(os.path.join(estimate_dir, "estimate_log.csv"),
                        os.path.join(estimate_dir, "estimate_summary.csv"),
                        trace)
        status.written.append(trace)
    return status
