"""Classification accuracy, pixel-level average precision and balance diagnostics."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .model import ModelParams, cam, embed_batch, foreground_map, pooled, predict_pooled


def cl_accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    if predictions.size == 0:
        raise ValueError("empty input")
    return float(np.mean(predictions == labels))


def pxap(score_maps, masks) -> float:
    """Dataset-level average precision over all pixels pooled together.

    AP = sum over tied score groups (descending) of precision at the end of the
    group times the recall gained inside the group.
    """
    scores = np.concatenate([np.asarray(s, dtype=float).ravel() for s in score_maps]) if len(score_maps) else np.zeros(0)
    truth = np.concatenate([np.asarray(m).ravel() != 0 for m in masks]) if len(masks) else np.zeros(0, bool)
    if scores.shape != truth.shape:
        raise ValueError("score maps and masks are not aligned")
    n_pos = int(truth.sum())
    if n_pos == 0:
        raise ValueError("no positive pixels to evaluate")
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], truth[order]
    tp = np.cumsum(t)
    # last index of every run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_end = tp[ends]
    precision = tp_end / (ends + 1)
    recall_gain = np.diff(np.r_[0, tp_end]) / n_pos
    return float(np.sum(precision * recall_gain))


def balance_report(snapshot_or_labels, k=None, entropies=None):
    """(class frequencies, imbalance = max frequency, mean entropy)."""
    labels = getattr(snapshot_or_labels, "pseudo_labels", snapshot_or_labels)
    if entropies is None:
        entropies = getattr(snapshot_or_labels, "entropies", None)
    k = k if k is not None else getattr(snapshot_or_labels, "k", None)
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise ValueError("empty snapshot")
    if k is None:
        k = int(labels.max()) + 1
    freqs = np.bincount(labels, minlength=k) / labels.size
    mean_ent = float(np.mean(entropies)) if entropies is not None else float("nan")
    return freqs, float(freqs.max()), mean_ent


@dataclass(frozen=True)
class MetricsReport:
    cl: float
    pxap: float
    class_freqs: tuple
    imbalance: float
    mean_entropy: float
    n_samples: int
    domain: str = ""

    def __post_init__(self):
        for name in ("cl", "pxap", "imbalance", "mean_entropy"):
            v = getattr(self, name)
            if v is None or not np.isfinite(v):
                raise ValueError(f"report field {name} is not populated")
        if self.n_samples <= 0 or len(self.class_freqs) < 2:
            raise ValueError("report needs samples and at least two class frequencies")


def score_maps(params: ModelParams, z, pred_labels, use_pixel_head):
    """Localisation scores per image: pixel-head foreground probability, or the
    normalised CAM of the predicted class."""
    if use_pixel_head:
        return [foreground_map(params, zi) for zi in z]
    return [cam(params, zi, int(y)) for zi, y in zip(z, pred_labels)]


def evaluate(params: ModelParams, samples, use_pixel_head=True, domain="", maps=None) -> MetricsReport:
    """Full report on labelled samples.  ``maps`` overrides the localisation scores."""
    if len(samples) == 0:
        raise ValueError("empty evaluation split")
    z = embed_batch(params, np.stack([s.pixels for s in samples]))
    probs, pred, ent = predict_pooled(params, pooled(z))
    labels = np.array([s.label for s in samples])
    if maps is None:
        maps = score_maps(params, z, pred, use_pixel_head)
    freqs, imbalance, mean_ent = balance_report(pred, params.k, ent)
    return MetricsReport(
        cl=cl_accuracy(pred, labels),
        pxap=pxap(maps, [s.mask for s in samples]),
        class_freqs=tuple(float(f) for f in freqs),
        imbalance=imbalance,
        mean_entropy=mean_ent,
        n_samples=len(samples),
        domain=domain,
    )


def make_evaluator(cl_samples, pxap_samples, use_pixel_head=True):
    """Closure returning (CL, PxAP) for given params; NaN where a split is empty.

    This is the only route by which target labels and masks reach the
    adaptation loop's records.
    """
    cache = {}

    def _z(params, samples, key):
        token = (key, params.extractor_bytes())
        if token not in cache:
            if len(cache) > 4:
                cache.clear()
            cache[token] = embed_batch(params, np.stack([s.pixels for s in samples]))
        return cache[token]

    def evaluator(params):
        cl = px = float("nan")
        if len(cl_samples):
            z = _z(params, cl_samples, "cl")
            _, pred, _ = predict_pooled(params, pooled(z))
            cl = cl_accuracy(pred, [s.label for s in cl_samples])
        if len(pxap_samples) and any(s.mask.any() for s in pxap_samples):
            z = _z(params, pxap_samples, "px")
            _, pred, _ = predict_pooled(params, pooled(z))
            px = pxap(score_maps(params, z, pred, use_pixel_head), [s.mask for s in pxap_samples])
        return cl, px

    return evaluator


REPORT_COLUMNS = ("domain", "PxAP", "CL")


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    k = max(len(r.class_freqs) for r in reports)
    w.writerow(list(REPORT_COLUMNS) + ["imbalance", "mean_entropy", "n_samples"] + [f"freq_class_{c}" for c in range(k)])
    for r in reports:
        w.writerow(
            [r.domain, f"{100 * r.pxap:.4f}", f"{100 * r.cl:.4f}", f"{r.imbalance:.6f}", f"{r.mean_entropy:.6f}", r.n_samples]
            + [f"{f:.6f}" for f in r.class_freqs]
        )
    return buf.getvalue()


def format_table(rows, columns) -> str:
    """Left-aligned first column, right-aligned others."""
    cells = [list(columns)] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    out = []
    for j, r in enumerate(cells):
        parts = [r[0].ljust(widths[0])] + [r[i].rjust(widths[i]) for i in range(1, len(r))]
        out.append("  ".join(parts).rstrip())
        if j == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def reports_to_table(reports) -> str:
    """PxAP and CL (percent) per domain."""
    rows = [(r.domain, f"{100 * r.pxap:.1f}", f"{100 * r.cl:.1f}") for r in reports]
    return format_table(rows, REPORT_COLUMNS)
