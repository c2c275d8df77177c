"""Reconstruction-error anomaly scores, ROC/AUC, and per-class aggregation."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .losses import recon_loss

SCORE_KINDS = ("l2", "ffl")


@dataclass
class ScoredSet:
    scores: np.ndarray
    anomaly_flags: np.ndarray
    score_kind: str = "l2"

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.anomaly_flags = np.asarray(self.anomaly_flags, dtype=bool)
        if self.scores.shape != self.anomaly_flags.shape:
            raise ValueError("scores and anomaly_flags must have equal length")
        if self.scores.size and (not np.isfinite(self.scores).all() or self.scores.min() < 0):
            raise ValueError("scores must be finite and non-negative")


@dataclass
class EvalReport:
    per_class: dict
    auc_avg: float
    roc_points: list = field(default_factory=list)
    score_histograms: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "per_class": {str(k): float(v) for k, v in self.per_class.items()},
            "auc_avg": float(self.auc_avg),
            "score_histograms": self.score_histograms,
            "timing": self.timing,
        }


def _score_kind(kind):
    if kind not in SCORE_KINDS:
        raise ValueError(f"score_kind must be one of {SCORE_KINDS}, got {kind!r}")
    return "ffl" if kind == "ffl" else "l2"


def anomaly_score(denoiser, image, score_kind="l2") -> float:
    """Reconstruction error of one clean (C, H, W) image."""
    x = torch.as_tensor(np.asarray(image, dtype=np.float32))
    if x.dim() != 3:
        raise ValueError(f"expected a single (C, H, W) image, got shape {tuple(x.shape)}")
    return float(score_batch(denoiser, x[None], score_kind)[0])


def score_batch(denoiser, x, score_kind="l2"):
    with torch.no_grad():
        rec = denoiser(x)
        return recon_loss(_score_kind(score_kind), x, rec, reduce=False).numpy()


def score_set(denoiser, images, flags, score_kind="l2", batch_size=256, timings=None) -> ScoredSet:
    """Score every image; ``timings`` (a list) collects per-batch milliseconds."""
    images = np.asarray(images, dtype=np.float32)
    out = []
    was_training = denoiser.training
    denoiser.eval()
    try:
        for i in range(0, len(images), batch_size):
            t0 = time.perf_counter()
            out.append(score_batch(denoiser, torch.from_numpy(images[i:i + batch_size]), score_kind))
            if timings is not None:
                timings.append((time.perf_counter() - t0) * 1e3)
    finally:
        denoiser.train(was_training)
    scores = np.concatenate(out) if out else np.zeros(0)
    return ScoredSet(scores, flags, score_kind)


def _split_counts(scored: ScoredSet):
    pos = int(scored.anomaly_flags.sum())
    neg = len(scored.anomaly_flags) - pos
    if pos == 0 or neg == 0:
        raise ValueError("AUC needs at least one normal and one anomalous sample")
    return pos, neg


def _midranks(values):
    """1-based ranks with ties sharing the mean of their positions."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], len(values)]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + e + 1) / 2.0
    return ranks


def roc_auc(scored: ScoredSet) -> float:
    """Mann-Whitney estimate: P(anomalous > normal) + 0.5 * P(tie)."""
    pos, neg = _split_counts(scored)
    ranks = _midranks(scored.scores)
    u = ranks[scored.anomaly_flags].sum() - pos * (pos + 1) / 2.0
    return float(u / (pos * neg))


def roc_curve(scored: ScoredSet):
    """ROC points from (0, 0) to (1, 1), one threshold per distinct score."""
    pos, neg = _split_counts(scored)
    order = np.argsort(-scored.scores, kind="mergesort")
    s = scored.scores[order]
    f = scored.anomaly_flags[order]
    last_of_run = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(f)[last_of_run]
    fp = np.cumsum(~f)[last_of_run]
    fpr = np.r_[0.0, fp / neg]
    tpr = np.r_[0.0, tp / pos]
    return list(zip(fpr.tolist(), tpr.tolist()))


def trapezoid_area(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2.0))


def score_summary(scored: ScoredSet, bins=20):
    """Histogram of normal vs anomalous scores on a shared bin grid."""
    s = scored.scores
    if s.size == 0:
        return {}
    edges = np.histogram_bin_edges(s, bins=bins)
    out = {"bin_edges": edges.tolist()}
    for name, mask in (("normal", ~scored.anomaly_flags), ("anomalous", scored.anomaly_flags)):
        vals = s[mask]
        out[name] = {
            "count": int(mask.sum()),
            "mean": float(vals.mean()) if vals.size else None,
            "std": float(vals.std()) if vals.size else None,
            "counts": np.histogram(vals, bins=edges)[0].tolist(),
        }
    return out


def aggregate_report(per_class_scored: dict, timings=None) -> EvalReport:
    """Per-class AUC and their unweighted mean."""
    if not per_class_scored:
        raise ValueError("aggregate_report needs at least one class")
    per_class = {k: roc_auc(v) for k, v in per_class_scored.items()}
    first = next(iter(per_class_scored.values()))
    timings = list(timings or [])
    timing = {}
    if timings:
        timing = {"ms_per_batch_mean": float(np.mean(timings)), "batches": len(timings)}
    return EvalReport(
        per_class=per_class,
        auc_avg=float(np.mean(list(per_class.values()))),
        roc_points=roc_curve(first) if len(per_class_scored) == 1 else [],
        score_histograms={str(k): score_summary(v) for k, v in per_class_scored.items()},
        timing=timing,
    )
