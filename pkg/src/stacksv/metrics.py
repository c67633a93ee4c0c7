"""Verification metrics: DET sweep, EER, threshold-transfer EER*, minDCF.

Acceptance rule: a trial is accepted when score >= threshold, rejected when
score < threshold.  FAR(t) = |{nontargets with score >= t}| / |N| and
FRR(t) = |{targets with score < t}| / |P|.  All metric arithmetic is 64-bit.
"""

import io
from dataclasses import dataclass

import numpy as np


@dataclass
class DetCurve:
    """FAR/FRR evaluated at every distinct score plus -inf/+inf sentinels."""
    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray

    def points(self):
        return list(zip(self.thresholds, self.far, self.frr))


@dataclass
class MetricReport:
    eer: float
    eer_threshold: float
    eer_star: float
    far_star: float
    frr_star: float
    min_dcf: float
    dcf_threshold: float


def _validate(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    if not np.isfinite(scores).all():
        raise ValueError("trial scores must be finite")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 (nontarget) or 1 (target)")
    if not (labels == 1).any() or not (labels == 0).any():
        raise ValueError("need at least one target and one nontarget trial")
    return scores, labels.astype(np.int64)


def far_frr_at(scores, labels, threshold):
    """Operating point at one threshold (accept when score >= threshold)."""
    scores, labels = _validate(scores, labels)
    non = scores[labels == 0]
    tar = scores[labels == 1]
    far = float(np.count_nonzero(non >= threshold)) / non.size
    frr = float(np.count_nonzero(tar < threshold)) / tar.size
    return far, frr


def det_sweep(scores, labels):
    scores, labels = _validate(scores, labels)
    non = np.sort(scores[labels == 0])
    tar = np.sort(scores[labels == 1])
    thresholds = np.concatenate(
        ([-np.inf], np.unique(scores), [np.inf]))
    # score >= t counted from the sorted nontargets; score < t from targets
    far = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    frr = np.searchsorted(tar, thresholds, side="left") / tar.size
    return DetCurve(thresholds, far, frr)


def eer(scores, labels):
    """Equal error rate and its threshold.

    The FAR/FRR step curves are interpolated linearly between adjacent sweep
    points; an exact FAR == FRR point is returned directly.
    """
    curve = det_sweep(scores, labels)
    diff = curve.far - curve.frr          # nonincreasing, +1 .. -1
    exact = np.flatnonzero(diff == 0.0)
    if exact.size:
        k = exact[0]
        return float(curve.far[k]), float(curve.thresholds[k])
    k = int(np.flatnonzero(diff > 0.0)[-1])   # crossing in (k, k+1)
    f = diff[k] / (diff[k] - diff[k + 1])
    value = curve.far[k] + f * (curve.far[k + 1] - curve.far[k])
    lo, hi = curve.thresholds[k], curve.thresholds[k + 1]
    if not np.isfinite(lo):
        thr = hi
    elif not np.isfinite(hi):
        thr = lo
    else:
        thr = lo + f * (hi - lo)
    return float(value), float(thr)


def eer_star(val_scores, val_labels, test_scores, test_labels):
    """Mean of test FAR/FRR at the validation EER threshold."""
    _, threshold = eer(val_scores, val_labels)
    far, frr = far_frr_at(test_scores, test_labels, threshold)
    return (far + frr) / 2.0, far, frr


def min_dcf(scores, labels, c_miss=1.0, c_fa=1.0, p_target=0.01):
    """Minimum detection cost over the sweep; ties pick the lowest threshold."""
    curve = det_sweep(scores, labels)
    costs = c_miss * curve.frr * p_target + c_fa * curve.far * (1.0 - p_target)
    k = int(np.argmin(costs))
    return float(costs[k]), float(curve.thresholds[k])


def compute_report(val_scores, val_labels, test_scores, test_labels,
                   c_miss=1.0, c_fa=1.0, p_target=0.01):
    """Test-set report using the validation split for the EER* threshold."""
    test_eer, test_thr = eer(test_scores, test_labels)
    star, far_s, frr_s = eer_star(val_scores, val_labels,
                                  test_scores, test_labels)
    dcf, dcf_thr = min_dcf(test_scores, test_labels, c_miss, c_fa, p_target)
    return MetricReport(eer=test_eer, eer_threshold=test_thr, eer_star=star,
                        far_star=far_s, frr_star=frr_s, min_dcf=dcf,
                        dcf_threshold=dcf_thr)


# ---------------------------------------------------------------------------
# score files and report formats
# ---------------------------------------------------------------------------

def write_score_file(path, scores, labels):
    scores, labels = _validate(scores, labels)
    with open(path, "w") as fh:
        for lab, sc in zip(labels, scores):
            fh.write(f"{int(lab)}\t{sc:.17g}\n")


def read_score_file(path):
    labels, scores = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(
                    f"{path}:{lineno}: expected 'label<TAB>score', got "
                    f"{line!r}")
            try:
                lab = int(parts[0])
                sc = float(parts[1])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if lab not in (0, 1):
                raise ValueError(f"{path}:{lineno}: label must be 0 or 1")
            labels.append(lab)
            scores.append(sc)
    return np.asarray(scores, dtype=np.float64), np.asarray(labels)


REPORT_COLUMNS = ("eer", "eer_star", "far_star", "frr_star", "min_dcf",
                  "eer_threshold", "dcf_threshold")


def report_csv(report):
    buf = io.StringIO()
    buf.write(",".join(REPORT_COLUMNS) + "\n")
    buf.write(",".join(f"{getattr(report, c):.10g}" for c in REPORT_COLUMNS))
    buf.write("\n")
    return buf.getvalue()


def report_table(report):
    lines = [
        f"  EER       : {report.eer * 100:7.3f} %   (threshold "
        f"{report.eer_threshold:.6f})",
        f"  EER*      : {report.eer_star * 100:7.3f} %   "
        f"(FAR* {report.far_star * 100:.3f} %, FRR* {report.frr_star * 100:.3f} %)",
        f"  minDCF    : {report.min_dcf:9.6f}   (threshold "
        f"{report.dcf_threshold:.6f})",
    ]
    return "\n".join(lines)
