"""AUC scoring and cross-seed aggregation of experiment arms."""

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import DimensionMismatch, SingleClassError


@dataclass
class ScoredLabelSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.scores.ndim != 1 or self.scores.shape != self.labels.shape:
            raise DimensionMismatch("scores and labels must be aligned vectors",
                                    where="ScoredLabelSet")
        if self.scores.size < 2:
            raise DimensionMismatch("need at least two scored items",
                                    where="ScoredLabelSet")
        if not np.all(np.isfinite(self.scores)):
            raise DimensionMismatch("scores must be finite", where="ScoredLabelSet")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise DimensionMismatch("labels must be 0 or 1", where="ScoredLabelSet")
        self.labels = self.labels.astype(np.int64)


def auc(scored: ScoredLabelSet) -> float:
    """Probability a random positive outscores a random negative, ties half.

    Mann-Whitney via midranks: with average ranks the positive rank sum minus
    its minimum equals the number of correctly ordered pairs plus half the
    tied pairs, exactly, so this matches brute-force pair counting.
    """
    n_pos = int(scored.labels.sum())
    n_neg = scored.labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError(
            f"AUC undefined with {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(scored.scores, method="average")
    u = float(ranks[scored.labels == 1].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


@dataclass(frozen=True)
class AggregateStats:
    mean: float
    stdev: float  # population standard deviation across seeds
    n: int


def aggregate(values) -> AggregateStats:
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size < 1:
        raise DimensionMismatch("nothing to aggregate", where="aggregate")
    return AggregateStats(float(vals.mean()), float(vals.std(ddof=0)), int(vals.size))


@dataclass(frozen=True)
class ResultsRow:
    arm: str
    bound: str
    probe_mode: str
    task: str
    mean_auc: float
    stdev: float
    n_seeds: int

    def __post_init__(self):
        if not 0.0 <= self.mean_auc <= 1.0:
            raise ValueError(f"mean AUC {self.mean_auc} outside [0, 1]")


RESULTS_COLUMNS = ("arm", "bound", "probe_mode", "task", "mean_auc", "stdev", "n_seeds")


class ResultsTable:
    """Per-(arm, task) AUC summary with CSV and terminal renderings."""

    def __init__(self, rows=()):
        self.rows = list(rows)

    def add(self, arm, bound, probe_mode, task, per_seed_aucs):
        stats = aggregate(per_seed_aucs)
        self.rows.append(ResultsRow(arm, bound, probe_mode, task,
                                    stats.mean, stats.stdev, stats.n))

    def to_csv_text(self) -> str:
        lines = [",".join(RESULTS_COLUMNS)]
        for r in self.rows:
            lines.append(",".join([r.arm, r.bound, r.probe_mode, r.task,
                                   repr(r.mean_auc), repr(r.stdev), str(r.n_seeds)]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv_text(cls, text: str) -> "ResultsTable":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != ",".join(RESULTS_COLUMNS):
            raise ValueError("unrecognized results table header")
        rows = []
        for ln in lines[1:]:
            parts = ln.split(",")
            if len(parts) != len(RESULTS_COLUMNS):
                raise ValueError(f"malformed results row: {ln!r}")
            rows.append(ResultsRow(parts[0], parts[1], parts[2], parts[3],
                                   float(parts[4]), float(parts[5]), int(parts[6])))
        return cls(rows)

    def render_text(self) -> str:
        header = list(RESULTS_COLUMNS)
        body = [[r.arm, r.bound, r.probe_mode, r.task,
                 f"{r.mean_auc:.4f}", f"{r.stdev:.4f}", str(r.n_seeds)]
                for r in self.rows]
        widths = [max(len(header[c]), *(len(row[c]) for row in body)) if body
                  else len(header[c]) for c in range(len(header))]
        def fmt(cells):
            return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
        lines = [fmt(header), fmt(["-" * w for w in widths])]
        lines.extend(fmt(row) for row in body)
        return "\n".join(lines) + "\n"


def moving_average(values, window: int = 100) -> np.ndarray:
    """Trailing mean over up to `window` previous points (shorter at the start)."""
    vals = np.asarray(values, dtype=np.float64)
    if window < 1:
        raise ValueError("window must be at least 1")
    csum = np.concatenate([[0.0], np.cumsum(vals)])
    out = np.empty_like(vals)
    for i in range(vals.size):
        lo = max(0, i + 1 - window)
        out[i] = (csum[i + 1] - csum[lo]) / (i + 1 - lo)
    return out
