"""Equal error rate, DET points and EER summary tables."""

import csv
import io
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .io import ScoreSet


@dataclass
class EvalReport:
    eer: float
    eer_threshold: float
    n_target: int
    n_nontarget: int
    det_points: List[Tuple[float, float, float]] = field(default_factory=list, repr=False)
    """(threshold, false_alarm_rate, miss_rate); the final point has threshold +inf."""

    def to_dict(self) -> dict:
        return {
            "eer": self.eer,
            "eer_threshold": self.eer_threshold,
            "n_target": self.n_target,
            "n_nontarget": self.n_nontarget,
            "n_det_points": len(self.det_points),
        }

    def det_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "false_alarm_rate", "miss_rate"])
        for thr, far, frr in self.det_points:
            w.writerow([format(thr, ".17g"), format(far, ".17g"), format(frr, ".17g")])
        return buf.getvalue()


def operating_points(target_scores, nontarget_scores):
    """False-alarm and miss rates for "accept if score >= t" at every distinct score.

    Returns ``(thresholds, far, frr)``, with a trailing +inf threshold where
    everything is rejected. Tied scores share one operating point.
    """
    tar = np.sort(np.asarray(target_scores, dtype=np.float64))
    non = np.sort(np.asarray(nontarget_scores, dtype=np.float64))
    thresholds = np.unique(np.concatenate([tar, non]))
    # count of scores strictly below each threshold
    tar_below = np.searchsorted(tar, thresholds, side="left")
    non_below = np.searchsorted(non, thresholds, side="left")
    far = (non.size - non_below) / non.size
    frr = tar_below / tar.size
    return (np.append(thresholds, np.inf), np.append(far, 0.0), np.append(frr, 1.0))


def eer_from_scores(target_scores, nontarget_scores) -> Tuple[float, float, tuple]:
    tar = np.asarray(target_scores, dtype=np.float64)
    non = np.asarray(nontarget_scores, dtype=np.float64)
    if tar.size == 0 or non.size == 0:
        raise ValueError(f"EER needs both classes, got {tar.size} target and {non.size} nontarget trials")
    thr, far, frr = operating_points(tar, non)
    diff = far - frr  # starts at 1, ends at -1, non-increasing
    k = int(np.argmax(diff <= 0))
    if diff[k] == 0:
        return float(far[k]), float(thr[k]), (thr, far, frr)
    j = k - 1
    alpha = diff[j] / (diff[j] - diff[k])
    eer = far[j] + alpha * (far[k] - far[j])
    if math.isinf(thr[k]):
        threshold = float(thr[j])
    else:
        threshold = float(thr[j] + alpha * (thr[k] - thr[j]))
    return float(eer), threshold, (thr, far, frr)


def compute_eer(scores: ScoreSet) -> EvalReport:
    values = scores.scores
    flags = scores.targets
    tar, non = values[flags], values[~flags]
    eer, threshold, (thr, far, frr) = eer_from_scores(tar, non)
    det = [(float(t), float(a), float(b)) for t, a, b in zip(thr, far, frr)]
    return EvalReport(eer, threshold, int(tar.size), int(non.size), det)


def summarize_experiment(reports: Sequence[Tuple[str, float]]) -> Tuple[str, str]:
    """Render ``(name, eer)`` pairs as a text table and a CSV, in the given order.

    ``eer`` may be a fraction or an :class:`EvalReport`.
    """
    if not reports:
        raise ValueError("nothing to summarize")
    rows = []
    for name, rep in reports:
        eer = rep.eer if isinstance(rep, EvalReport) else float(rep)
        rows.append((name, eer))
    width = max(len(name) for name, _ in rows)
    table = "".join(f"{name:<{width}} {100 * eer:.2f}\n" for name, eer in rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["condition", "eer_percent"])
    for name, eer in rows:
        w.writerow([name, f"{100 * eer:.2f}"])
    return table, buf.getvalue()
