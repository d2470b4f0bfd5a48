"""Retain / forget / localisation losses with closed-form head gradients.

Every loss returns a :class:`LossValue` carrying gradients for both heads; the
head a loss does not touch gets exact zeros.  Image-level losses take pooled
embeddings (N x d) and frozen pseudo-labels; the localisation loss takes the
per-pixel embeddings of one image and its partial pseudo-mask.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParams, image_logits, softmax

EPS = 1e-12
UNKNOWN = 255


@dataclass(frozen=True)
class LossValue:
    value: float
    grad_image_w: np.ndarray
    grad_image_b: np.ndarray
    grad_pixel_w: np.ndarray
    grad_pixel_b: np.ndarray

    @classmethod
    def zero(cls, params: ModelParams) -> "LossValue":
        return cls(
            0.0,
            np.zeros_like(params.image_w),
            np.zeros_like(params.image_b),
            np.zeros_like(params.pixel_w),
            np.zeros_like(params.pixel_b),
        )

    def grads(self):
        return self.grad_image_w, self.grad_image_b, self.grad_pixel_w, self.grad_pixel_b

    def is_finite(self):
        return np.isfinite(self.value) and all(np.all(np.isfinite(g)) for g in self.grads())


def _image_loss_value(params, pooled_z):
    pooled_z = np.atleast_2d(np.asarray(pooled_z, dtype=float))
    return pooled_z, _probs(image_logits(params, pooled_z))


def _probs(logits):
    # overflowed logits make every downstream value NaN so callers see the divergence
    if not np.all(np.isfinite(logits)):
        return np.full(logits.shape, np.nan)
    return softmax(logits)


def _image_grads(params, pooled_z, dlogits):
    n = pooled_z.shape[0]
    return LossValue(
        0.0,
        dlogits.T @ pooled_z / n,
        dlogits.sum(axis=0) / n,
        np.zeros_like(params.pixel_w),
        np.zeros_like(params.pixel_b),
    )


def retain_loss(params: ModelParams, pooled_z, pseudo_labels) -> LossValue:
    """Mean of -log p(y_hat) over the batch."""
    pseudo_labels = np.asarray(pseudo_labels, dtype=int)
    if len(pseudo_labels) == 0:
        return LossValue.zero(params)
    pooled_z, p = _image_loss_value(params, pooled_z)
    n = len(pseudo_labels)
    p_hat = p[np.arange(n), pseudo_labels]
    value = float(np.mean(-np.log(np.maximum(p_hat, EPS))))
    dlogits = p.copy()
    dlogits[np.arange(n), pseudo_labels] -= 1.0
    out = _image_grads(params, pooled_z, dlogits)
    return LossValue(value, *out.grads())


def forget_loss(params: ModelParams, pooled_z, pseudo_labels) -> LossValue:
    """Mean of -log(1 - p(y_hat)) over the batch.

    With q = 1 - p(y_hat), d/dlogit_j = p(y_hat) / q * (onehot(y_hat) - p)_j.
    """
    pseudo_labels = np.asarray(pseudo_labels, dtype=int)
    if len(pseudo_labels) == 0:
        return LossValue.zero(params)
    pooled_z, p = _image_loss_value(params, pooled_z)
    n = len(pseudo_labels)
    rows = np.arange(n)
    p_hat = p[rows, pseudo_labels]
    # 1 - p(y_hat) as a sum of the other probabilities keeps precision near p -> 1
    others = p.copy()
    others[rows, pseudo_labels] = 0.0
    q = np.maximum(others.sum(axis=1), EPS)
    value = float(np.mean(-np.log(q)))
    onehot = np.zeros_like(p)
    onehot[rows, pseudo_labels] = 1.0
    dlogits = (p_hat / q)[:, None] * (onehot - p)
    out = _image_grads(params, pooled_z, dlogits)
    return LossValue(value, *out.grads())


def loc_loss(params: ModelParams, z, pseudo_mask) -> LossValue:
    """Binary cross-entropy of the pixel head over known pixels of one image.

    ``pseudo_mask`` is a flat or H x W array with 0 (background), 1
    (foreground) or ``UNKNOWN``; unknown pixels are never read.
    """
    labels = np.asarray(getattr(pseudo_mask, "labels", pseudo_mask)).reshape(-1)
    known = labels != UNKNOWN
    if not known.any():
        raise ValueError("no supervised pixels")
    zk = np.asarray(z, dtype=float)[known]
    y = labels[known].astype(int)
    h = _probs(zk @ params.pixel_w.T + params.pixel_b)
    rows = np.arange(len(y))
    value = float(np.mean(-np.log(np.maximum(h[rows, y], EPS))))
    dlogits = h.copy()
    dlogits[rows, y] -= 1.0
    m = len(y)
    return LossValue(
        value,
        np.zeros_like(params.image_w),
        np.zeros_like(params.image_b),
        dlogits.T @ zk / m,
        dlogits.sum(axis=0) / m,
    )


def loc_loss_batch(params: ModelParams, zs, masks) -> LossValue:
    """Per-image localisation losses averaged over a batch (equal image weights)."""
    if len(zs) == 0:
        return LossValue.zero(params)
    parts = [loc_loss(params, z, m) for z, m in zip(zs, masks)]
    return scale_sum([(1.0 / len(parts), lv) for lv in parts], params)


def scale_sum(weighted, params: ModelParams) -> LossValue:
    """Sum of ``weight * loss`` in the given order."""
    value = 0.0
    grads = [np.zeros_like(a) for a in (params.image_w, params.image_b, params.pixel_w, params.pixel_b)]
    for w, lv in weighted:
        value += w * lv.value
        for g, part in zip(grads, lv.grads()):
            g += w * part
    return LossValue(value, *grads)


def total_loss(retain: LossValue, forget: LossValue, loc: LossValue, lam_retain, lam_forget, lam_loc) -> LossValue:
    for lam in (lam_retain, lam_forget, lam_loc):
        if lam < 0:
            raise ValueError("loss weights must be nonnegative")
    value = lam_retain * retain.value + lam_forget * forget.value + lam_loc * loc.value
    grads = [
        lam_retain * a + lam_forget * b + lam_loc * c
        for a, b, c in zip(retain.grads(), forget.grads(), loc.grads())
    ]
    return LossValue(value, *grads)
