"""Synthetic histology-like benchmark with controllable domain shift.

Images are small multi-channel patches: a smooth "tissue" background made of
band-limited value noise, plus (for every class other than the normal class 0)
one or two thresholded Gaussian blobs carrying a distinct colour and a finer,
stronger texture.  A :class:`DomainSpec` controls the appearance; two specs
differing only in their colour affine / texture scale / blob size / class prior
give a source and a shifted target domain.

Pixel values are stored on the 1/255 grid so that the portable-pixmap
serialisation round-trips bit-exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import pnm

SPLITS = ("train", "val_cl", "val_pxap", "test")
MIN_FOREGROUND_FRACTION = 0.05

# Appearance of the normal tissue and of the abnormal blobs (RGB, before shift).
_BG_COLOR = np.array([0.85, 0.62, 0.74])
_BG_AMPLITUDE = 0.18
_FG_COLOR = np.array([0.48, 0.28, 0.58])
_FG_AMPLITUDE = 0.25
_FG_FREQ_FACTOR = 2.0


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray  # H x W x C in [0, 1]
    label: int
    mask: np.ndarray  # H x W, uint8 in {0, 1}
    id: int

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True)
class DomainSpec:
    """Appearance parameters of one domain.

    ``gain``/``bias`` are the per-channel colour affine applied after the
    tissue is rendered; the identity spec has gain 1 and bias 0.
    """

    gain: tuple = (1.0, 1.0, 1.0)
    bias: tuple = (0.0, 0.0, 0.0)
    texture_freq: float = 4.0
    blob_scale: float = 1.5
    class_prior: tuple = (0.5, 0.5)
    noise_sigma: float = 0.02
    seed: int = 0
    height: int = 32
    width: int = 32

    def __post_init__(self):
        gain = np.asarray(self.gain, dtype=float)
        bias = np.asarray(self.bias, dtype=float)
        if gain.shape != bias.shape or gain.ndim != 1 or gain.size < 1:
            raise ValueError("gain and bias must be equal-length per-channel vectors")
        if np.any(gain < 0.0) or np.any(gain > 1.5):
            raise ValueError(f"gain outside [0, 1.5]: {self.gain}")
        if np.any(np.abs(bias) > 0.3):
            raise ValueError(f"bias outside [-0.3, 0.3]: {self.bias}")
        if not self.texture_freq > 0 or not self.blob_scale > 0:
            raise ValueError("texture_freq and blob_scale must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        prior = np.asarray(self.class_prior, dtype=float)
        if prior.ndim != 1 or np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-9:
            raise ValueError(f"class_prior is not on the simplex: {self.class_prior}")
        if self.height < 4 or self.width < 4:
            raise ValueError("images must be at least 4x4")

    @property
    def channels(self) -> int:
        return len(self.gain)

    def with_shift(self, gain=None, bias=None, **kw) -> "DomainSpec":
        if gain is not None:
            kw["gain"] = tuple(float(g) for g in gain)
        if bias is not None:
            kw["bias"] = tuple(float(b) for b in bias)
        return replace(self, **kw)


@dataclass(frozen=True)
class SplitCounts:
    train: int = 0
    val_cl: int = 0
    val_pxap: int = 10
    test: int = 0

    def __post_init__(self):
        for name in SPLITS:
            if getattr(self, name) < 0:
                raise ValueError(f"negative count for split {name!r}")

    def as_dict(self):
        return {name: getattr(self, name) for name in SPLITS}


@dataclass
class Dataset:
    splits: dict = field(default_factory=dict)
    k: int = 2

    def __getitem__(self, split):
        return self.splits[split]

    def counts(self):
        return {s: len(self.splits.get(s, [])) for s in SPLITS}

    def all_samples(self):
        for s in SPLITS:
            yield from ((s, x) for x in self.splits.get(s, []))


# -- rendering ---------------------------------------------------------------


def _value_noise(rng, h, w, freq):
    """Bilinearly interpolated lattice noise with about ``freq`` cells per side."""
    cells = max(1, int(math.ceil(freq)))
    grid = rng.random((cells + 1, cells + 1))
    ys = np.linspace(0.0, freq, h, endpoint=False) * cells / freq
    xs = np.linspace(0.0, freq, w, endpoint=False) * cells / freq
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    ty = (ys - y0)[:, None]
    tx = (xs - x0)[None, :]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    top = g00 * (1 - tx) + g01 * tx
    bot = g10 * (1 - tx) + g11 * tx
    return top * (1 - ty) + bot * ty


def _blob_mask(rng, h, w, blob_scale):
    n_bumps = int(rng.integers(1, 3))
    sigma = blob_scale * min(h, w) / 8.0
    yy, xx = np.mgrid[0:h, 0:w]
    field_ = np.zeros((h, w))
    for _ in range(n_bumps):
        cy = rng.uniform(0.2 * h, 0.8 * h)
        cx = rng.uniform(0.2 * w, 0.8 * w)
        field_ += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
    mask = field_ > 0.5
    need = int(math.ceil(MIN_FOREGROUND_FRACTION * h * w))
    if mask.sum() < need:
        # top up to the minimum fraction with the strongest-field pixels
        order = np.argsort(-field_, axis=None, kind="stable")[:need]
        mask = np.zeros(h * w, dtype=bool)
        mask[order] = True
        mask = mask.reshape(h, w)
    return mask.astype(np.uint8)


def _class_color(label, channels):
    color = np.resize(_FG_COLOR, channels).astype(float)
    if label > 1:
        # further abnormal classes rotate the blob colour
        color = np.roll(color, label - 1)
    return color


def render_sample(spec: DomainSpec, label: int, rng, sample_id: int) -> ImageSample:
    """Render one sample of class ``label`` in the source appearance of ``spec``
    (no colour shift yet), quantised to the 1/255 grid."""
    h, w, c = spec.height, spec.width, spec.channels
    bg_color = np.resize(_BG_COLOR, c)
    bg = _value_noise(rng, h, w, spec.texture_freq)
    img = bg_color[None, None, :] + _BG_AMPLITUDE * (bg[..., None] - 0.5)
    if label != 0:
        mask = _blob_mask(rng, h, w, spec.blob_scale)
        fg = _value_noise(rng, h, w, spec.texture_freq * _FG_FREQ_FACTOR)
        fg_img = _class_color(label, c)[None, None, :] + _FG_AMPLITUDE * (fg[..., None] - 0.5)
        img = np.where(mask[..., None] == 1, fg_img, img)
    else:
        mask = np.zeros((h, w), dtype=np.uint8)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return ImageSample(pixels=quantize(np.clip(img, 0.0, 1.0)), label=int(label), mask=mask, id=int(sample_id))


def quantize(pixels):
    return np.round(pixels * 255.0) / 255.0


def apply_shift(img: ImageSample, spec: DomainSpec) -> ImageSample:
    """Per-channel affine followed by clamping to [0, 1]. Label and mask are kept."""
    gain = np.asarray(spec.gain, dtype=float)
    bias = np.asarray(spec.bias, dtype=float)
    if gain.size != img.pixels.shape[-1]:
        raise ValueError("channel count of spec and image differ")
    pixels = np.clip(img.pixels * gain + bias, 0.0, 1.0)
    return replace(img, pixels=pixels)


def generate_dataset(spec: DomainSpec, counts: SplitCounts, k: int) -> Dataset:
    """Generate the four splits for one domain.

    Labels are drawn from ``spec.class_prior``, except for ``val_pxap`` which is
    a localisation set and only draws from the abnormal classes (prior
    renormalised over classes 1..k-1).  Output is a pure function of the inputs.
    """
    if k < 2:
        raise ValueError(f"need at least two classes, got k={k}")
    prior = np.asarray(spec.class_prior, dtype=float)
    if prior.size != k:
        raise ValueError(f"class_prior has {prior.size} entries, expected {k}")
    if counts.val_pxap > 0 and prior[1:].sum() <= 0:
        raise ValueError("val_pxap requested but the class prior has no foreground classes")

    ds = Dataset(k=k)
    next_id = 0
    for split_idx, split in enumerate(SPLITS):
        n = getattr(counts, split)
        rng = np.random.default_rng([spec.seed, split_idx])
        if split == "val_pxap":
            p = prior.copy()
            p[0] = 0.0
            p = p / p.sum() if n else p
        else:
            p = prior
        labels = rng.choice(k, size=n, p=p) if n else np.zeros(0, dtype=int)
        samples = []
        for i, y in enumerate(labels):
            srng = np.random.default_rng([spec.seed, split_idx, i, 7919])
            s = render_sample(spec, int(y), srng, next_id)
            s = apply_shift(s, spec)
            samples.append(replace(s, pixels=quantize(s.pixels)))
            next_id += 1
        ds.splits[split] = samples
    return ds


# -- serialisation -------------------------------------------------------------

MANIFEST = "manifest.txt"


class ManifestError(ValueError):
    pass


def _image_name(sample_id, channels):
    ext = {1: "pgm", 3: "ppm"}.get(channels, "pam")
    return f"{sample_id:06d}.{ext}"


def save_dataset(ds: Dataset, directory) -> Path:
    """Write one pixmap per sample plus ``manifest.txt``.

    Manifest lines are ``id split label mask`` where ``mask`` is the mask file
    name or ``-`` for normal samples (whose mask is all zero).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"# k={ds.k}"]
    for split, s in ds.all_samples():
        name = _image_name(s.id, s.pixels.shape[-1])
        pnm.write(directory / name, np.round(s.pixels * 255.0).astype(np.uint8))
        if s.label != 0:
            mname = f"{s.id:06d}_mask.pgm"
            pnm.write(directory / mname, s.mask.astype(np.uint8) * 255)
        else:
            mname = "-"
        lines.append(f"{s.id} {split} {s.label} {mname}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no manifest at {path}")
    ds = Dataset(splits={s: [] for s in SPLITS})
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line.startswith("# k="):
                ds.k = int(line[4:])
            continue
        parts = line.split()
        if len(parts) != 4 or parts[1] not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: malformed manifest line {raw!r}")
        try:
            sid, label = int(parts[0]), int(parts[2])
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: non-integer id or label") from None
        if not 0 <= label < ds.k:
            raise ManifestError(f"{path}:{lineno}: label {label} outside 0..{ds.k - 1}")
        candidates = sorted(directory.glob(f"{sid:06d}.p[gpa]m"))
        if len(candidates) != 1:
            raise ManifestError(f"{path}:{lineno}: image file for id {sid} missing")
        raw_px = pnm.read(candidates[0])
        if raw_px.ndim == 2:
            raw_px = raw_px[..., None]
        pixels = raw_px.astype(float) / 255.0
        if parts[3] == "-":
            mask = np.zeros(pixels.shape[:2], dtype=np.uint8)
        else:
            m = pnm.read(directory / parts[3])
            mask = (m > 0).astype(np.uint8)
        ds.splits[parts[1]].append(ImageSample(pixels=pixels, label=label, mask=mask, id=sid))
    return ds
