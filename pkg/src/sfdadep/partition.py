"""Bias detection and the forget / retain / localisation partition of a target set."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import UNKNOWN
from .model import ModelParams, cam, predict_pooled

STATIC = None  # resampling period meaning "build once, never rebuild"


@dataclass(frozen=True)
class Snapshot:
    ids: np.ndarray
    pseudo_labels: np.ndarray
    entropies: np.ndarray
    k: int

    def __len__(self):
        return len(self.ids)

    def frequencies(self):
        return np.bincount(self.pseudo_labels, minlength=self.k) / len(self)


@dataclass(frozen=True)
class PseudoMask:
    labels: np.ndarray  # H x W uint8 in {0, 1, UNKNOWN}

    @property
    def known(self):
        return self.labels != UNKNOWN

    def n_known(self):
        return int(self.known.sum())


@dataclass(frozen=True)
class Partition:
    snapshot: Snapshot
    dominant_classes: frozenset
    forget_ids: np.ndarray
    retain_ids: np.ndarray
    loc_ids: np.ndarray
    epoch_built: int
    masks: dict = field(default_factory=dict)

    def check(self):
        """Raise AssertionError if the set invariants are violated."""
        f, r = set(self.forget_ids.tolist()), set(self.retain_ids.tolist())
        assert not f & r, "forget and retain sets overlap"
        assert f | r == set(self.snapshot.ids.tolist()), "forget + retain do not cover the target set"
        label_of = dict(zip(self.snapshot.ids.tolist(), self.snapshot.pseudo_labels.tolist()))
        assert all(label_of[i] in self.dominant_classes for i in f)
        assert not f & set(self.loc_ids.tolist()), "forget samples in the localisation set"
        assert set(self.masks) == set(self.loc_ids.tolist())


def predict_all(params: ModelParams, ids, pooled_z) -> Snapshot:
    ids = np.asarray(ids)
    if len(ids) == 0:
        raise ValueError("empty target set")
    _, labels, ent = predict_pooled(params, pooled_z)
    return Snapshot(ids=ids, pseudo_labels=labels, entropies=np.atleast_1d(ent), k=params.k)


def dominant_classes(freqs, tau=0.1) -> frozenset:
    """Classes predicted more often than 1/K + tau."""
    freqs = np.asarray(freqs, dtype=float)
    if np.any(freqs < 0) or abs(freqs.sum() - 1.0) > 1e-9:
        raise ValueError("frequencies are not on the simplex")
    k = len(freqs)
    return frozenset(int(c) for c in np.flatnonzero(freqs > 1.0 / k + tau))


def _count(fraction, n):
    return int(math.floor(fraction * n + 1e-9))


def build_forget_set(snapshot: Snapshot, dominant, rho) -> np.ndarray:
    """The floor(rho * |B|) highest-entropy ids among samples predicted in ``dominant``.

    Ties go to the lower id.  Returned ids are in selection order.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    in_b = np.isin(snapshot.pseudo_labels, list(dominant))
    ids, ent = snapshot.ids[in_b], snapshot.entropies[in_b]
    n = _count(rho, len(ids))
    order = np.lexsort((ids, -ent))
    return ids[order[:n]]


def build_loc_set(snapshot: Snapshot, rho_loc, exclude=()) -> np.ndarray:
    """Per predicted class, the lowest-entropy fraction ``rho_loc`` (at least one)."""
    if not 0.0 < rho_loc <= 1.0:
        raise ValueError(f"rho_loc must lie in (0, 1], got {rho_loc}")
    keep = ~np.isin(snapshot.ids, np.asarray(list(exclude), dtype=snapshot.ids.dtype))
    ids, ent, lab = snapshot.ids[keep], snapshot.entropies[keep], snapshot.pseudo_labels[keep]
    chosen = []
    for c in range(snapshot.k):
        sel = lab == c
        n_c = int(sel.sum())
        if n_c == 0:
            continue
        n = max(1, _count(rho_loc, n_c))
        order = np.lexsort((ids[sel], ent[sel]))
        chosen.append(ids[sel][order[:n]])
    return np.concatenate(chosen) if chosen else np.zeros(0, dtype=snapshot.ids.dtype)


def cam_to_pseudomask(cam_map, theta_fg=0.8, theta_bg=0.2) -> PseudoMask:
    """Foreground at or above the ``theta_fg`` quantile, background at or below the
    ``theta_bg`` quantile; pixels satisfying both (constant maps) stay unknown."""
    if not 0.0 <= theta_bg < theta_fg <= 1.0:
        raise ValueError("need 0 <= theta_bg < theta_fg <= 1")
    cam_map = np.asarray(cam_map, dtype=float)
    hi = np.quantile(cam_map, theta_fg)
    lo = np.quantile(cam_map, theta_bg)
    fg = cam_map >= hi
    bg = cam_map <= lo
    labels = np.full(cam_map.shape, UNKNOWN, dtype=np.uint8)
    labels[fg & ~bg] = 1
    labels[bg & ~fg] = 0
    return PseudoMask(labels)


def background_mask(shape) -> PseudoMask:
    return PseudoMask(np.zeros(shape, dtype=np.uint8))


def build_partition(params, cam_params, ids, embeddings, pooled_z, *, tau, rho, rho_loc,
                    theta_fg, theta_bg, epoch, selftrain=False) -> Partition:
    """Snapshot the current model and derive every set plus the pseudo-masks.

    ``cam_params`` supplies the heads used for CAM pseudo-masks (the source
    model).  With ``selftrain`` the forget set is empty and no masks are built.
    """
    snap = predict_all(params, ids, pooled_z)
    dom = dominant_classes(snap.frequencies(), tau)
    if selftrain:
        forget = np.zeros(0, dtype=snap.ids.dtype)
    else:
        forget = build_forget_set(snap, dom, rho)
    retain = snap.ids[~np.isin(snap.ids, forget)]
    masks, loc = {}, []
    if not selftrain:
        index = {int(i): j for j, i in enumerate(snap.ids.tolist())}
        shape = (cam_params.height, cam_params.width)
        for i in build_loc_set(snap, rho_loc, exclude=forget).tolist():
            y = int(snap.pseudo_labels[index[i]])
            if y == 0:
                pm = background_mask(shape)
            else:
                pm = cam_to_pseudomask(cam(cam_params, embeddings[index[i]], y), theta_fg, theta_bg)
                if pm.n_known() == 0:
                    continue
            masks[i] = pm
            loc.append(i)
    return Partition(
        snapshot=snap,
        dominant_classes=dom,
        forget_ids=forget,
        retain_ids=retain,
        loc_ids=np.asarray(loc, dtype=snap.ids.dtype),
        epoch_built=epoch,
        masks=masks,
    )


def is_due(epoch, m) -> bool:
    """Whether the partition is rebuilt at ``epoch`` for period ``m`` (``STATIC`` = only epoch 0)."""
    if m is STATIC or (isinstance(m, float) and math.isinf(m)):
        return epoch == 0
    if m < 1:
        raise ValueError("resampling period must be >= 1")
    return epoch % int(m) == 0


def rebuild(current, epoch, m, build):
    """Return ``build()`` when a rebuild is due (or nothing exists yet), else ``current``."""
    if current is None or is_due(epoch, m):
        return build()
    return current


def audit_text(part: Partition) -> str:
    snap = part.snapshot
    freqs = snap.frequencies()
    ent = snap.entropies
    lines = [
        f"epoch = {part.epoch_built}",
        "dominant_classes = " + ",".join(str(c) for c in sorted(part.dominant_classes)),
        f"n_target = {len(snap)}",
        f"n_forget = {len(part.forget_ids)}",
        f"n_retain = {len(part.retain_ids)}",
        f"n_loc = {len(part.loc_ids)}",
        "class_freqs = " + ",".join(f"{f:.6f}" for f in freqs),
        f"entropy_mean = {ent.mean():.6f}",
        f"entropy_min = {ent.min():.6f}",
        f"entropy_max = {ent.max():.6f}",
    ]
    return "\n".join(lines) + "\n"


def write_audit(part: Partition, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"partition_epoch_{part.epoch_built:04d}.txt"
    path.write_text(audit_text(part), encoding="utf-8")
    return path
