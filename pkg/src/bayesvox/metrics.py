"""Segmentation and uncertainty metrics.

Covers per-class and mean Dice, predictive entropy of MC-averaged softmax
output, ROC analysis for two downstream tasks (ranking voxels by uncertainty
to predict misclassification, and ranking volumes by mean non-background
uncertainty to predict bad scans), and paired bootstrap comparison of AUCs
between methods.

Entropy uses the natural logarithm, is computed on the MC-averaged
predictive distribution, and clamps probabilities at 1e-8 before the log.
Dice for a class absent from both prediction and truth is reported as None
(``absent``) and excluded from the mean.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "PredictiveOutput",
    "AnalysisRecord",
    "RocResult",
    "BootstrapResult",
    "dice_per_class",
    "mean_dice",
    "voxel_entropy",
    "volume_uncertainty",
    "roc_auc",
    "error_prediction_analysis",
    "qc_analysis",
    "bootstrap_auc_compare",
    "sign_test_greater",
    "average_roc_curves",
    "write_records_csv",
    "write_curve_csv",
]

ENTROPY_CLAMP = 1e-8
SIMPLEX_TOL = 1e-6


# -- predictive output ---------------------------------------------------


@dataclass
class PredictiveOutput:
    """MC-averaged class probabilities plus derived argmax and entropy maps."""

    probs: np.ndarray  # (C, ...) simplex along axis 0
    argmax_labels: np.ndarray  # (...), int
    entropy: np.ndarray  # (...), nats

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "PredictiveOutput":
        probs = np.asarray(probs, dtype=np.float64)
        return cls(
            probs=probs,
            argmax_labels=np.argmax(probs, axis=0),
            entropy=voxel_entropy(probs),
        )


@dataclass
class AnalysisRecord:
    """Per-volume evaluation summary, one row of the records CSV."""

    volume_id: str
    mean_dice: float
    per_class_dice: list = field(default_factory=list)
    mean_nonbg_entropy: float = float("nan")
    quality_label: str = "good"


@dataclass
class RocResult:
    """AUC with the full operating curve at every distinct threshold."""

    auc: float
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray


@dataclass
class BootstrapResult:
    """Per-method AUC distributions and one-sided pairwise p-values.

    ``p_greater[(a, b)]`` is the fraction of replicates where method a's AUC
    failed to exceed method b's, i.e. the p-value for the claim "a > b".
    """

    observed_auc: dict[str, float]
    auc_mean: dict[str, float]
    auc_std: dict[str, float]
    p_greater: dict[tuple[str, str], float]
    n_boot: int
    sample_size: int
    redraws: int


# -- Dice ----------------------------------------------------------------


def _class_counts(pred: np.ndarray, true: np.ndarray, num_classes: int):
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"dice: shape mismatch {pred.shape} vs {true.shape}")
    joint = np.bincount(
        (true.reshape(-1) * num_classes + pred.reshape(-1)).astype(np.int64),
        minlength=num_classes * num_classes,
    ).reshape(num_classes, num_classes)
    tp = np.diag(joint).astype(np.float64)
    fn = joint.sum(axis=1) - tp  # true class c, predicted something else
    fp = joint.sum(axis=0) - tp
    return tp, fn, fp


def dice_per_class(pred_labels, true_labels, c: int, num_classes: int | None = None) -> float | None:
    """Dice 2TP/(2TP+FN+FP) for class c; None when c is absent from both."""
    if num_classes is None:
        num_classes = int(max(np.max(pred_labels), np.max(true_labels))) + 1
    if not 0 <= c < num_classes:
        raise ValueError(f"dice_per_class: class {c} outside [0, {num_classes})")
    tp, fn, fp = _class_counts(pred_labels, true_labels, num_classes)
    denom = 2 * tp[c] + fn[c] + fp[c]
    if denom == 0:
        return None
    return float(2 * tp[c] / denom)


def mean_dice(pred_labels, true_labels, num_classes: int) -> tuple[float, list]:
    """Mean Dice over classes present in prediction or truth, plus the per-class list."""
    tp, fn, fp = _class_counts(pred_labels, true_labels, num_classes)
    per_class: list[float | None] = []
    present = []
    for c in range(num_classes):
        denom = 2 * tp[c] + fn[c] + fp[c]
        if denom == 0:
            per_class.append(None)
        else:
            d = float(2 * tp[c] / denom)
            per_class.append(d)
            present.append(d)
    if not present:
        raise ValueError("mean_dice: every class absent from both volumes")
    return float(np.mean(present)), per_class


# -- entropy -------------------------------------------------------------


def voxel_entropy(probs: np.ndarray) -> np.ndarray | float:
    """Natural-log entropy along axis 0 of a (C, ...) probability array."""
    p = np.asarray(probs, dtype=np.float64)
    sums = p.sum(axis=0)
    if np.any(np.abs(sums - 1.0) > SIMPLEX_TOL):
        worst = float(np.abs(sums - 1.0).max())
        raise ValueError(f"voxel_entropy: probabilities off the simplex by {worst:.3g}")
    pc = np.maximum(p, ENTROPY_CLAMP)
    h = -(pc * np.log(pc)).sum(axis=0)
    if h.ndim == 0:
        return float(h)
    return h


def volume_uncertainty(out: PredictiveOutput) -> float:
    """Mean entropy over voxels whose argmax is not background (class 0)."""
    mask = out.argmax_labels != 0
    if not np.any(mask):
        raise ValueError("volume_uncertainty: no voxel classified as foreground")
    return float(out.entropy[mask].mean())


# -- ROC -----------------------------------------------------------------


def roc_auc(scores, labels) -> RocResult:
    """Mann-Whitney AUC (ties count one half) and the threshold-sweep curve.

    The curve starts at (0,0) with threshold +inf and ends at (1,1) at the
    smallest score; a point is emitted per distinct score value, classifying
    score >= threshold as positive.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"roc_auc: {s.size} scores but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("roc_auc: labels must be 0 or 1")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"roc_auc: need both classes, got {n_pos} positives of {y.size}")

    ranks = rankdata(s)  # average rank on ties = half credit
    auc = (ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    distinct = np.nonzero(np.diff(s_sorted))[0]  # last index of each score group
    ends = np.concatenate([distinct, [s.size - 1]])
    tp_cum = np.cumsum(y_sorted)[ends]
    fp_cum = (ends + 1) - tp_cum
    thresholds = np.concatenate([[np.inf], s_sorted[ends]])
    tpr = np.concatenate([[0.0], tp_cum / n_pos])
    fpr = np.concatenate([[0.0], fp_cum / n_neg])
    return RocResult(auc=float(auc), thresholds=thresholds, fpr=fpr, tpr=tpr)


def error_prediction_analysis(out: PredictiveOutput, true_labels) -> RocResult | None:
    """Rank voxels by entropy to predict misclassification; None when undefined.

    Undefined means the volume has no errors (or no correct voxels), leaving
    a single label class.
    """
    true = np.asarray(true_labels)
    if true.shape != out.argmax_labels.shape:
        raise ValueError(
            f"error_prediction_analysis: labels shape {true.shape} vs "
            f"prediction shape {out.argmax_labels.shape}"
        )
    errors = (out.argmax_labels != true).astype(np.int8)
    if errors.min() == errors.max():
        return None
    return roc_auc(out.entropy.reshape(-1), errors.reshape(-1))


def qc_analysis(records: list[AnalysisRecord]) -> RocResult:
    """Rank volumes by mean non-background entropy to predict bad quality."""
    scores = [r.mean_nonbg_entropy for r in records]
    labels = [1 if r.quality_label == "bad" else 0 for r in records]
    return roc_auc(scores, labels)


def average_roc_curves(curves: list[RocResult], grid_points: int = 101) -> RocResult:
    """Mean TPR over a common FPR grid; AUC is the mean of member AUCs.

    Interpolated grid points carry no meaningful threshold, so thresholds
    are NaN in the averaged curve.
    """
    if not curves:
        raise ValueError("average_roc_curves: no curves to average")
    grid = np.linspace(0.0, 1.0, grid_points)
    tprs = np.stack([np.interp(grid, c.fpr, c.tpr) for c in curves])
    return RocResult(
        auc=float(np.mean([c.auc for c in curves])),
        thresholds=np.full(grid_points, np.nan),
        fpr=grid,
        tpr=tprs.mean(axis=0),
    )


# -- bootstrap and sign test ---------------------------------------------


def bootstrap_auc_compare(
    records_by_method: dict[str, list[AnalysisRecord]],
    n_boot: int = 10_000,
    sample_size: int | None = None,
    seed: int = 0,
) -> BootstrapResult:
    """Paired bootstrap over volumes: one resample per replicate, all methods.

    Methods must cover the same volumes in the same order (checked by id and
    quality label). A replicate whose resampled labels are single-class is
    redrawn, at most 100 times, before erroring out.
    """
    if len(records_by_method) < 2:
        raise ValueError("bootstrap_auc_compare: need at least two methods")
    if n_boot < 1:
        raise ValueError(f"bootstrap_auc_compare: n_boot must be >= 1, got {n_boot}")
    methods = list(records_by_method)
    first = records_by_method[methods[0]]
    ids = [r.volume_id for r in first]
    labels = np.array([1 if r.quality_label == "bad" else 0 for r in first], dtype=np.int8)
    for m in methods[1:]:
        recs = records_by_method[m]
        if [r.volume_id for r in recs] != ids:
            raise ValueError(f"bootstrap_auc_compare: method {m!r} covers different volumes")
        if any((r.quality_label == "bad") != bool(l) for r, l in zip(recs, labels)):
            raise ValueError(f"bootstrap_auc_compare: method {m!r} disagrees on quality labels")
    n = len(first)
    if labels.min() == labels.max():
        raise ValueError("bootstrap_auc_compare: records contain a single quality class")
    size = n if sample_size is None else int(sample_size)
    if size < 2:
        raise ValueError(f"bootstrap_auc_compare: sample_size must be >= 2, got {size}")

    scores = {m: np.array([r.mean_nonbg_entropy for r in records_by_method[m]]) for m in methods}
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(n_boot, size))
    redraws = 0
    for _ in range(100):
        lab = labels[idx]
        bad = (lab.min(axis=1) == lab.max(axis=1)).nonzero()[0]
        if bad.size == 0:
            break
        redraws += int(bad.size)
        idx[bad] = rng.integers(0, n, size=(bad.size, size))
    else:
        raise ValueError("bootstrap_auc_compare: could not draw two-class replicates in 100 rounds")

    lab = labels[idx]
    n_pos = lab.sum(axis=1).astype(np.float64)
    n_neg = size - n_pos
    aucs = {}
    for m in methods:
        ranks = rankdata(scores[m][idx], axis=1)
        pos_rank_sum = (ranks * lab).sum(axis=1)
        aucs[m] = (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    observed = {m: roc_auc(scores[m], labels).auc for m in methods}
    p_greater = {}
    for a in methods:
        for b in methods:
            if a != b:
                # replicates where a fails to beat b; exact AUC ties count half
                # so identical methods land at p = 0.5 by symmetry
                p_greater[(a, b)] = float(
                    (aucs[a] < aucs[b]).mean() + 0.5 * (aucs[a] == aucs[b]).mean()
                )
    return BootstrapResult(
        observed_auc=observed,
        auc_mean={m: float(aucs[m].mean()) for m in methods},
        auc_std={m: float(aucs[m].std(ddof=1)) for m in methods},
        p_greater=p_greater,
        n_boot=n_boot,
        sample_size=size,
        redraws=redraws,
    )


def sign_test_greater(n_success: int, n_total: int) -> float:
    """One-sided sign test: P(X >= n_success) for X ~ Binomial(n_total, 1/2)."""
    if not 0 <= n_success <= n_total:
        raise ValueError(f"sign_test_greater: need 0 <= {n_success} <= {n_total}")
    total = sum(math.comb(n_total, k) for k in range(n_success, n_total + 1))
    return total / 2.0**n_total


# -- CSV output ----------------------------------------------------------


def write_records_csv(path, records: list[AnalysisRecord], method: str):
    """Rows of volume_id,mean_dice,mean_nonbg_entropy,quality_label,method."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["volume_id", "mean_dice", "mean_nonbg_entropy", "quality_label", "method"])
        for r in records:
            writer.writerow(
                [r.volume_id, f"{r.mean_dice:.6f}", f"{r.mean_nonbg_entropy:.6f}", r.quality_label, method]
            )


def write_curve_csv(path, curve: RocResult):
    """Rows of threshold,fpr,tpr; averaged curves carry NaN thresholds."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fpr", "tpr"])
        for thr, fpr, tpr in zip(curve.thresholds, curve.fpr, curve.tpr):
            writer.writerow([repr(float(thr)), f"{fpr:.6f}", f"{tpr:.6f}"])
