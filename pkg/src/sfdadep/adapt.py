"""Source pre-training, debiased adaptation and the naive self-training baseline."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import partition as part
from .losses import LossValue, loc_loss_batch, retain_loss, forget_loss, total_loss
from .model import ModelParams, cam, embed_batch, pooled, predict_pooled

LAMBDA_GRID = (0.2, 0.5, 1.0, 2.0)
LAMBDA_LOC_GRID = (0.5, 1.0, 5.0)
RHO_GRID = (0.05, 0.15, 0.25)
LR_GRID = (1e-5, 1e-4, 1e-3)


class DivergenceError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""


@dataclass
class AdaptConfig:
    lam_retain: float = 1.0
    lam_forget: float = 0.5
    lam_loc: float = 1.0
    rho: float = 0.15
    rho_loc: float = 0.25
    m: int | None = 5  # None: static partition
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    tau: float = 0.1
    theta_fg: float = 0.8
    theta_bg: float = 0.2
    seed: int = 0

    def validate(self, strict_grid=True):
        """Check ranges; with ``strict_grid`` the swept values must come from the
        sweep grids (0 is accepted for the forget / loc terms and rho, which
        switches the corresponding term off)."""
        if strict_grid:
            checks = [
                ("lam_retain", self.lam_retain, LAMBDA_GRID),
                ("lam_forget", self.lam_forget, (0.0,) + LAMBDA_GRID),
                ("lam_loc", self.lam_loc, (0.0,) + LAMBDA_LOC_GRID),
                ("rho", self.rho, (0.0,) + RHO_GRID),
                ("lr", self.lr, LR_GRID),
            ]
            for name, val, grid in checks:
                if not any(math.isclose(val, g, rel_tol=1e-12, abs_tol=0.0) or val == g for g in grid):
                    raise ValueError(f"{name}={val} is not one of {grid}")
        if min(self.lam_retain, self.lam_forget, self.lam_loc) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0.0 <= self.rho <= 1.0 or not 0.0 < self.rho_loc <= 1.0:
            raise ValueError("rho must be in [0, 1] and rho_loc in (0, 1]")
        if not self.lr > 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("need lr > 0, epochs >= 0, batch_size >= 1")
        if self.m is not None and self.m < 1:
            raise ValueError("resampling period must be >= 1 (or None for static)")
        if not 0.0 <= self.theta_bg < self.theta_fg <= 1.0:
            raise ValueError("need 0 <= theta_bg < theta_fg <= 1")
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")
        return self


@dataclass
class SourceConfig:
    lr: float = 1e-2
    epochs: int = 200
    pixel_epochs: int = 20
    batch_size: int = 32
    theta_fg: float = 0.8
    theta_bg: float = 0.2
    seed: int = 0

    def validate(self):
        if not self.lr > 0 or self.epochs < 0 or self.pixel_epochs < 0 or self.batch_size < 1:
            raise ValueError("need lr > 0, nonnegative epochs, batch_size >= 1")
        if not 0.0 <= self.theta_bg < self.theta_fg <= 1.0:
            raise ValueError("need 0 <= theta_bg < theta_fg <= 1")
        return self


@dataclass(frozen=True)
class TargetView:
    """Unlabelled target images: ids and pixels only."""

    ids: np.ndarray
    pixels: np.ndarray  # N x H x W x C

    def __len__(self):
        return len(self.ids)


def strip_labels(samples) -> TargetView:
    if len(samples) == 0:
        return TargetView(np.zeros(0, dtype=np.int64), np.zeros((0, 1, 1, 1)))
    return TargetView(
        ids=np.array([s.id for s in samples], dtype=np.int64),
        pixels=np.stack([s.pixels for s in samples]),
    )


@dataclass
class EpochRow:
    epoch: int
    loss_retain: float
    loss_forget: float
    loss_loc: float
    loss_total: float
    class_freqs: tuple
    val_cl: float = float("nan")
    val_pxap: float = float("nan")


@dataclass
class RunRecord:
    rows: list = field(default_factory=list)
    params: ModelParams | None = None
    config: dict = field(default_factory=dict)
    initial_class_freqs: tuple = ()
    wall_time: float = 0.0
    partitions: list = field(default_factory=list)

    @property
    def final_class_freqs(self):
        return self.rows[-1].class_freqs if self.rows else self.initial_class_freqs

    def to_csv(self, k=None) -> str:
        k = k or len(self.initial_class_freqs) or (len(self.rows[0].class_freqs) if self.rows else 2)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(
            ["epoch", "loss_retain", "loss_forget", "loss_loc", "loss_total"]
            + [f"freq_class_{c}" for c in range(k)]
            + ["val_cl", "val_pxap"]
        )
        for r in self.rows:
            w.writerow(
                [r.epoch] + [repr(float(v)) for v in (r.loss_retain, r.loss_forget, r.loss_loc, r.loss_total)]
                + [repr(float(f)) for f in r.class_freqs]
                + [repr(float(r.val_cl)), repr(float(r.val_pxap))]
            )
        return buf.getvalue()

    def same_as(self, other) -> bool:
        """Equality of everything except wall time."""
        return (
            self.to_csv() == other.to_csv()
            and self.params.heads_bytes() == other.params.heads_bytes()
            and self.params.extractor_bytes() == other.params.extractor_bytes()
        )


def _grad_tuple(grads):
    if isinstance(grads, LossValue):
        return grads.grads()
    return tuple(grads)


def sgd_step(params: ModelParams, grads, lr) -> ModelParams:
    """heads <- heads - lr * grad; the extractor is shared untouched."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    g = _grad_tuple(grads)
    heads = (params.image_w, params.image_b, params.pixel_w, params.pixel_b)
    for gi, hi in zip(g, heads):
        if np.shape(gi) != hi.shape:
            raise ValueError(f"gradient shape {np.shape(gi)} does not match head shape {hi.shape}")
        if not np.all(np.isfinite(gi)):
            raise DivergenceError("non-finite gradient")
    with np.errstate(over="ignore"):
        new = [hi - lr * gi for hi, gi in zip(heads, g)]
    if not all(np.all(np.isfinite(h)) for h in new):
        raise DivergenceError("step produced non-finite head weights")
    return params.with_heads(*new)


def _check(lv: LossValue, where):
    if not lv.is_finite():
        raise DivergenceError(f"non-finite loss in {where}")
    return lv


# -- source ------------------------------------------------------------------


def train_source(source_train, config: SourceConfig, params: ModelParams, history=None) -> ModelParams:
    """Supervised cross-entropy on image labels, then the pixel head on pseudo-masks
    taken from the CAM of each image's true class.

    ``source_train`` is a list of labelled samples; ``params`` supplies the frozen
    extractor (heads are reset to zero).  Per-epoch losses are appended to
    ``history`` when given.
    """
    config.validate()
    params = params.with_heads(
        np.zeros_like(params.image_w), np.zeros_like(params.image_b),
        np.zeros_like(params.pixel_w), np.zeros_like(params.pixel_b),
    )
    if config.epochs == 0 or len(source_train) == 0:
        return params
    z = embed_batch(params, np.stack([s.pixels for s in source_train]))
    pz = pooled(z)
    y = np.array([s.label for s in source_train])
    if y.max() >= params.k:
        raise ValueError("source label outside the model's class range")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    bs = config.batch_size
    for epoch in range(config.epochs):
        perm = rng.permutation(len(y))
        losses = []
        for s in range(0, len(y), bs):
            b = perm[s : s + bs]
            lv = _check(retain_loss(params, pz[b], y[b]), "source training")
            params = sgd_step(params, lv, config.lr)
            losses.append(lv.value)
        if history is not None:
            history.append(("image", epoch, float(np.mean(losses))))

    masks = [
        part.background_mask((params.height, params.width)) if yi == 0
        else part.cam_to_pseudomask(cam(params, zi, int(yi)), config.theta_fg, config.theta_bg)
        for zi, yi in zip(z, y)
    ]
    keep = np.array([m.n_known() > 0 for m in masks])
    rows = np.flatnonzero(keep)
    for epoch in range(config.pixel_epochs):
        perm = rng.permutation(rows)
        losses = []
        for s in range(0, len(perm), bs):
            b = perm[s : s + bs]
            lv = _check(loc_loss_batch(params, z[b], [masks[i] for i in b]), "source pixel head")
            params = sgd_step(params, lv, config.lr)
            losses.append(lv.value)
        if history is not None:
            history.append(("pixel", epoch, float(np.mean(losses)) if losses else 0.0))
    return params


# -- adaptation --------------------------------------------------------------


def _wrap_batch(perm, step, size):
    if len(perm) == 0:
        return perm
    b = min(size, len(perm))
    return np.take(perm, np.arange(step * b, step * b + b), mode="wrap")


def _adapt(params, target, config: AdaptConfig, selftrain, evaluator, source_params, audit_dir, strict_grid):
    config.validate(strict_grid=strict_grid)
    if not isinstance(target, TargetView):
        raise TypeError("adaptation takes a label-free TargetView (see strip_labels)")
    if len(target) == 0:
        raise ValueError("empty target set")
    t0 = time.perf_counter()
    source_params = source_params if source_params is not None else params
    extractor = params.extractor_bytes()
    z = embed_batch(params, target.pixels)
    pz = pooled(z)
    ids = target.ids
    row_of = {int(i): j for j, i in enumerate(ids.tolist())}
    _, lab0, _ = predict_pooled(params, pz)
    record = RunRecord(
        config=dict(asdict(config), method="selftrain" if selftrain else "dep"),
        initial_class_freqs=tuple(np.bincount(lab0, minlength=params.k) / len(ids)),
    )
    rng_r, rng_f, rng_l = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(3))
    use_forget = not selftrain and config.lam_forget > 0
    use_loc = not selftrain and config.lam_loc > 0
    bs = config.batch_size

    def build(epoch):
        return part.build_partition(
            params, source_params, ids, z, pz,
            tau=config.tau, rho=config.rho, rho_loc=config.rho_loc,
            theta_fg=config.theta_fg, theta_bg=config.theta_bg, epoch=epoch, selftrain=selftrain,
        )

    partition = None
    for epoch in range(config.epochs):
        previous = partition
        partition = part.rebuild(partition, epoch, config.m, lambda: build(epoch))
        if partition is not previous:
            record.partitions.append(part.audit_text(partition))
            if audit_dir is not None:
                part.write_audit(partition, audit_dir)
        yhat = np.empty(len(ids), dtype=int)
        yhat[[row_of[int(i)] for i in partition.snapshot.ids]] = partition.snapshot.pseudo_labels
        retain_rows = np.array([row_of[int(i)] for i in partition.retain_ids], dtype=int)
        forget_rows = np.array([row_of[int(i)] for i in partition.forget_ids], dtype=int)
        loc_rows = np.array([row_of[int(i)] for i in partition.loc_ids], dtype=int)
        perm_r = rng_r.permutation(retain_rows)
        perm_f = rng_f.permutation(forget_rows) if use_forget else forget_rows[:0]
        perm_l = rng_l.permutation(loc_rows) if use_loc else loc_rows[:0]
        n_steps = max(1, math.ceil(len(perm_r) / bs))
        sums = np.zeros(4)
        zero = LossValue.zero(params)
        for step in range(n_steps):
            rb = perm_r[step * bs : (step + 1) * bs]
            lr_ = _check(retain_loss(params, pz[rb], yhat[rb]), "retain loss") if len(rb) else zero
            fb = _wrap_batch(perm_f, step, bs)
            lf = _check(forget_loss(params, pz[fb], yhat[fb]), "forget loss") if len(fb) else zero
            lb = _wrap_batch(perm_l, step, bs)
            if len(lb):
                masks = [partition.masks[int(ids[i])] for i in lb]
                ll = _check(loc_loss_batch(params, z[lb], masks), "localisation loss")
            else:
                ll = zero
            tot = _check(
                total_loss(lr_, lf, ll, config.lam_retain,
                           config.lam_forget if use_forget else 0.0,
                           config.lam_loc if use_loc else 0.0),
                "total loss",
            )
            params = sgd_step(params, tot, config.lr)
            sums += (lr_.value, lf.value, ll.value, tot.value)
        means = sums / n_steps
        _, lab, _ = predict_pooled(params, pz)
        val_cl, val_px = evaluator(params) if evaluator is not None else (float("nan"), float("nan"))
        record.rows.append(EpochRow(
            epoch, *map(float, means), tuple(np.bincount(lab, minlength=params.k) / len(ids)),
            float(val_cl), float(val_px),
        ))
    assert params.extractor_bytes() == extractor
    record.params = params
    record.wall_time = time.perf_counter() - t0
    return params, record


def adapt_dep(params, target: TargetView, config: AdaptConfig, evaluator=None, source_params=None,
              audit_dir=None, strict_grid=True):
    """Debiased adaptation: retain + forget + localisation losses with periodic rebuilds."""
    return _adapt(params, target, config, False, evaluator, source_params, audit_dir, strict_grid)


def adapt_selftrain(params, target: TargetView, config: AdaptConfig, evaluator=None, audit_dir=None,
                    strict_grid=True):
    """Cross-entropy on every sample's own pseudo-label, rebuilt every ``m`` epochs."""
    return _adapt(params, target, config, True, evaluator, None, audit_dir, strict_grid)


def write_record(record: RunRecord, directory, k=None):
    from .model import save_params

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "record.csv").write_text(record.to_csv(k), encoding="utf-8", newline="")
    if record.params is not None:
        save_params(record.params, directory / "params.bin")
