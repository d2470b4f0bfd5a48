"""Frozen random filter-bank extractor with trainable linear heads.

``embed`` maps an H x W x C image to per-pixel embeddings Z (H*W x d).  The
image classifier is softmax(W_img . mean_p z_p + b_img); the pixel classifier
is softmax(W_pix . z_p + b_pix) over (background, foreground).  Only the two
heads are ever trained.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

MAGIC = b"SFDP"
VERSION = 1
_HEADER = struct.Struct("<4sIiiiiiiii")  # magic, version, d, K, n_f, H, W, C, ksize, smooth


@dataclass(frozen=True)
class ModelParams:
    filters: np.ndarray  # n_f x ks x ks x C, frozen
    mix: np.ndarray  # n_f x d, frozen
    image_w: np.ndarray  # K x d
    image_b: np.ndarray  # K
    pixel_w: np.ndarray  # 2 x d
    pixel_b: np.ndarray  # 2
    height: int = 32
    width: int = 32
    smooth: int = 5  # box window applied after the nonlinearity

    @property
    def d(self):
        return self.mix.shape[1]

    @property
    def k(self):
        return self.image_w.shape[0]

    @property
    def n_f(self):
        return self.filters.shape[0]

    @property
    def channels(self):
        return self.filters.shape[3]

    @property
    def ksize(self):
        return self.filters.shape[1]

    def with_heads(self, image_w=None, image_b=None, pixel_w=None, pixel_b=None):
        kw = {}
        for name, val in (("image_w", image_w), ("image_b", image_b), ("pixel_w", pixel_w), ("pixel_b", pixel_b)):
            if val is not None:
                kw[name] = np.asarray(val, dtype=float)
        return replace(self, **kw)

    def extractor_bytes(self) -> bytes:
        return self.filters.astype("<f8").tobytes() + self.mix.astype("<f8").tobytes()

    def heads_bytes(self) -> bytes:
        return b"".join(a.astype("<f8").tobytes() for a in (self.image_w, self.image_b, self.pixel_w, self.pixel_b))

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in (self.filters, self.mix, self.image_w, self.image_b, self.pixel_w, self.pixel_b))


@dataclass(frozen=True)
class Prediction:
    probs: np.ndarray
    pseudo_label: int
    entropy: float


def init_params(seed, d=16, k=2, n_f=8, channels=3, ksize=5, height=32, width=32, smooth=5) -> ModelParams:
    """Draw the frozen filter bank from ``seed``; heads start at zero.

    Half of the filters are made spatially zero-mean per channel so they
    respond to texture rather than colour.
    """
    if d < 2 or k < 2 or n_f < 1:
        raise ValueError(f"invalid dimensions d={d}, k={k}, n_f={n_f}")
    if channels < 1 or ksize < 1 or ksize % 2 == 0 or height < 1 or width < 1 or smooth < 1:
        raise ValueError("channels, image size, smooth must be positive and ksize odd")
    rng = np.random.default_rng([int(seed), 0x5FDA])
    filters = rng.normal(size=(n_f, ksize, ksize, channels)) / np.sqrt(ksize * ksize * channels)
    half = n_f // 2
    filters[:half] -= filters[:half].mean(axis=(1, 2), keepdims=True)
    filters[:half] *= 3.0
    mix = rng.normal(size=(n_f, d)) * (2.0 / np.sqrt(n_f))
    return ModelParams(
        filters=filters,
        mix=mix,
        image_w=np.zeros((k, d)),
        image_b=np.zeros(k),
        pixel_w=np.zeros((2, d)),
        pixel_b=np.zeros(2),
        height=height,
        width=width,
        smooth=smooth,
    )


FEATURE_SCALE = 10.0


def nonlinearity(u):
    """Scaled softplus, evaluated stably.

    The fixed output scale puts the heads' useful learning rates in the
    1e-5..1e-3 range.
    """
    return FEATURE_SCALE * np.logaddexp(0.0, u)


def filter_responses(params: ModelParams, images):
    """Reflect-padded same-size correlation of a batch (N x H x W x C) with the bank."""
    images = np.asarray(images, dtype=float)
    n, h, w, c = images.shape
    ks = params.ksize
    r = ks // 2
    padded = np.pad(images, ((0, 0), (r, r), (r, r), (0, 0)), mode="reflect")
    out = np.zeros((n, h, w, params.n_f))
    for dy in range(ks):
        for dx in range(ks):
            out += padded[:, dy : dy + h, dx : dx + w, :] @ params.filters[:, dy, dx, :].T
    return out


def embed_batch(params: ModelParams, images):
    """Embeddings for a batch of images: N x (H*W) x d."""
    images = np.asarray(images, dtype=float)
    if images.ndim != 4 or images.shape[1:] != (params.height, params.width, params.channels):
        raise ValueError(
            f"image batch shape {images.shape} does not match extractor "
            f"({params.height}, {params.width}, {params.channels})"
        )
    resp = filter_responses(params, images)
    z = nonlinearity(resp @ params.mix)
    if params.smooth > 1:
        # direct box sums (not running sums) keep each output a function of its window only
        box = np.full(params.smooth, 1.0 / params.smooth)
        z = correlate1d(z, box, axis=1, mode="nearest")
        z = correlate1d(z, box, axis=2, mode="nearest")
    return z.reshape(images.shape[0], params.height * params.width, params.d)


def embed(params: ModelParams, img):
    """Per-pixel embedding Z (H*W x d) of a single image (array or ImageSample)."""
    pixels = getattr(img, "pixels", img)
    pixels = np.asarray(pixels, dtype=float)
    if pixels.ndim == 2:
        pixels = pixels[..., None]
    return embed_batch(params, pixels[None])[0]


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=float)
    with np.errstate(over="ignore"):  # a gap beyond float range correctly becomes exp(-inf) = 0
        z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def normalized_entropy(probs, tol=1e-6):
    """Shannon entropy divided by ln K; works row-wise on a 2-D array."""
    p = np.asarray(probs, dtype=float)
    if p.shape[-1] < 2:
        raise ValueError("need at least two classes")
    if np.any(p < -tol) or np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise ValueError("probabilities are not on the simplex")
    p = np.clip(p, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    h = -terms.sum(axis=-1) / np.log(p.shape[-1])
    h = np.clip(h, 0.0, 1.0) + 0.0  # no negative zero
    return float(h) if np.ndim(h) == 0 else h


def pooled(z):
    """Mean-pool embeddings over pixels; accepts (P x d) or (N x P x d)."""
    return np.asarray(z).mean(axis=-2)


def image_logits(params: ModelParams, pooled_z):
    return pooled_z @ params.image_w.T + params.image_b


def predict_pooled(params: ModelParams, pooled_z):
    """Row-wise (probs, pseudo-labels, entropies) for pooled embeddings N x d."""
    probs = softmax(image_logits(params, np.atleast_2d(pooled_z)))
    labels = probs.argmax(axis=1)  # first maximum wins ties
    return probs, labels, normalized_entropy(probs)


def classify(params: ModelParams, z) -> Prediction:
    probs, labels, ent = predict_pooled(params, pooled(z)[None])
    return Prediction(probs=probs[0], pseudo_label=int(labels[0]), entropy=float(ent[0]))


def raw_cam(params: ModelParams, z, class_k):
    return np.asarray(z) @ params.image_w[class_k]


def normalize_map(raw, atol=1e-12):
    """Min-max normalise to [0, 1]; constant maps become 0.5 everywhere."""
    raw = np.asarray(raw, dtype=float)
    lo, hi = raw.min(), raw.max()
    if hi - lo <= atol * max(1.0, abs(hi), abs(lo)):
        return np.full(raw.shape, 0.5)
    return (raw - lo) / (hi - lo)


def cam(params: ModelParams, z, class_k):
    """Normalised class activation map of class ``class_k`` as an H x W array."""
    if not 0 <= class_k < params.k:
        raise ValueError(f"class {class_k} outside 0..{params.k - 1}")
    return normalize_map(raw_cam(params, z, class_k)).reshape(params.height, params.width)


def pixel_classify(params: ModelParams, z_p):
    """(background, foreground) probabilities; ``z_p`` may be a single embedding or P x d."""
    return softmax(np.asarray(z_p) @ params.pixel_w.T + params.pixel_b)


def foreground_map(params: ModelParams, z):
    return pixel_classify(params, z)[:, 1].reshape(params.height, params.width)


# -- serialisation -----------------------------------------------------------


def save_params(params: ModelParams, path):
    header = _HEADER.pack(
        MAGIC, VERSION, params.d, params.k, params.n_f, params.height, params.width,
        params.channels, params.ksize, params.smooth,
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + params.extractor_bytes() + params.heads_bytes())


def load_params(path) -> ModelParams:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated params file")
    magic, version, d, k, n_f, h, w, c, ks, smooth = _HEADER.unpack_from(data)
    if magic != MAGIC or version != VERSION:
        raise ValueError(f"{path}: not a version-{VERSION} params file")
    shapes = [(n_f, ks, ks, c), (n_f, d), (k, d), (k,), (2, d), (2,)]
    sizes = [int(np.prod(s)) for s in shapes]
    if len(data) != _HEADER.size + 8 * sum(sizes):
        raise ValueError(f"{path}: params payload has wrong length")
    arrays, off = [], _HEADER.size
    for shape, size in zip(shapes, sizes):
        arrays.append(np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(float))
        off += 8 * size
    return ModelParams(*arrays, height=h, width=w, smooth=smooth)
