"""Dataset manifests, synthetic paired-modality fingerprints, preprocessing.

Synthetic identities are oriented sinusoidal ridge fields: a per-identity
ridge frequency and a smoothly varying orientation field around a core
point. Contact-based (CB) renders are high contrast with mild elastic
jitter; contactless (CL) renders have reduced contrast, blur, a small
perspective warp, and additive noise. Everything is a pure function of
seeds, so regenerating a corpus is byte-identical.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .rng import stream

MODALITIES = ("CL", "CB")
SPLITS = ("train", "test")
MANIFEST_COLUMNS = ("path", "subject_id", "finger_id", "modality", "split")


@dataclass(frozen=True)
class Sample:
    """One manifest row; identity is the subject/finger combination."""

    image_path: Path
    subject_id: str
    finger_id: str
    modality: str
    split: str
    rotate: int = 0  # quarter turns applied during preprocessing
    raw_path: str = ""  # path exactly as written in the manifest

    @property
    def identity(self) -> str:
        return f"{self.subject_id}:{self.finger_id}"


@dataclass(frozen=True)
class IdentityParams:
    """Generative parameters of one synthetic identity."""

    ridge_freq: float  # cycles per pixel
    orient_coeffs: tuple
    core: tuple  # (x, y) pixel coordinates
    seed: object

    def __post_init__(self):
        if not (0.05 <= self.ridge_freq <= 0.25):
            raise ConfigError(f"ridge frequency {self.ridge_freq} outside [0.05, 0.25]")


@dataclass
class Batch:
    """Indices into a sample list plus their labels and modalities."""

    indices: list
    identity_labels: list
    modalities: list


class Preprocessed(NamedTuple):
    image: np.ndarray
    constant: bool  # true when the source had zero dynamic range


# ---------------------------------------------------------------------------
# manifests

def load_manifest(path) -> list[Sample]:
    """Parse a manifest CSV; relative image paths resolve against its folder.

    Schema: path,subject_id,finger_id,modality,split with an optional
    trailing `rotate` column (quarter turns as a multiple of 90 degrees).
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    samples: list[Sample] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty manifest, expected header row") from None
        header = [h.strip() for h in header]
        if tuple(header[:5]) != MANIFEST_COLUMNS or len(header) > 6 or (
            len(header) == 6 and header[5] != "rotate"
        ):
            raise DataError(
                f"{path}: bad header {header}, expected {','.join(MANIFEST_COLUMNS)}[,rotate]"
            )
        has_rotate = len(header) == 6
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rel, subject, finger, modality, split = (v.strip() for v in row[:5])
            if modality not in MODALITIES:
                raise DataError(f"{path}:{lineno}: bad modality {modality!r}, expected CL or CB")
            if split not in SPLITS:
                raise DataError(f"{path}:{lineno}: bad split {split!r}, expected train or test")
            rotate = 0
            if has_rotate:
                raw = row[5].strip()
                try:
                    degrees = int(raw)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad rotate {raw!r}") from None
                if degrees % 90 != 0:
                    raise DataError(f"{path}:{lineno}: rotate {degrees} is not a multiple of 90")
                rotate = (degrees // 90) % 4
            img_path = (base / rel).resolve() if not Path(rel).is_absolute() else Path(rel)
            if not img_path.is_file():
                raise DataError(f"{path}:{lineno}: image not found: {img_path}")
            samples.append(Sample(img_path, subject, finger, modality, split, rotate, rel))
    return samples


def load_image(path) -> np.ndarray:
    """8-bit grayscale file -> float array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def save_image(image: np.ndarray, path) -> None:
    """Float [0, 1] array -> 8-bit grayscale PNG."""
    quantized = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(quantized, mode="L").save(path)


# ---------------------------------------------------------------------------
# synthesis

def synth_identity(identity_seed, image_size: int = 32) -> IdentityParams:
    """Deterministic generative parameters for one identity."""
    g = stream("identity", identity_seed)
    freq = float(g.uniform(0.08, 0.22))
    coeffs = tuple(float(c) for c in np.concatenate([
        g.uniform(0.0, np.pi, size=1),       # base ridge direction
        g.uniform(-1.2, 1.2, size=4),        # orientation field gradients
    ]))
    core = (
        float(g.uniform(0.3, 0.7) * (image_size - 1)),
        float(g.uniform(0.3, 0.7) * (image_size - 1)),
    )
    return IdentityParams(freq, coeffs, core, identity_seed)


def _orientation_field(identity: IdentityParams, xx, yy, size):
    c0, c1, c2, c3, c4 = identity.orient_coeffs
    u = (xx - identity.core[0]) / size
    v = (yy - identity.core[1]) / size
    return c0 + c1 * u + c2 * v + c3 * u * v + c4 * (u * u - v * v)


def _ridge_pattern(identity: IdentityParams, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = _orientation_field(identity, xx, yy, size)
    phase = 2.0 * np.pi * identity.ridge_freq * (xx * np.cos(theta) + yy * np.sin(theta))
    return 0.5 + 0.5 * np.sin(phase)


def bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample image at fractional coordinates with edge clamping."""
    h, w = image.shape
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def _gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (t / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(image, radius, mode="reflect")
    rows = np.zeros_like(padded)
    for k, wk in enumerate(kernel):
        rows += wk * np.roll(padded, k - radius, axis=1)
    out = np.zeros_like(padded)
    for k, wk in enumerate(kernel):
        out += wk * np.roll(rows, k - radius, axis=0)
    return out[radius:-radius, radius:-radius]


def render_fingerprint(identity: IdentityParams, modality: str, sample_seed,
                       size: int = 32) -> np.ndarray:
    """Render one sample of an identity in the given modality, in [0, 1]."""
    if modality not in MODALITIES:
        raise ConfigError(f"unknown modality {modality!r}, expected CL or CB")
    base = _ridge_pattern(identity, size)
    g = stream("render", identity.seed, modality, sample_seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    if modality == "CB":
        # mild elastic jitter, then a hard ridge/valley contrast boost
        fx, fy = g.uniform(0.5, 1.5, size=2)
        px, py = g.uniform(0.0, 2.0 * np.pi, size=2)
        amp = g.uniform(0.3, 0.7)
        dx = amp * np.sin(2.0 * np.pi * fy * yy / size + px)
        dy = amp * np.sin(2.0 * np.pi * fx * xx / size + py)
        warped = bilinear_sample(base, xx + dx, yy + dy)
        out = 0.5 + 0.5 * np.tanh(4.0 * (2.0 * warped - 1.0))
    else:
        # small perspective warp around the image center
        n = np.stack([
            2.0 * xx / (size - 1) - 1.0,
            2.0 * yy / (size - 1) - 1.0,
            np.ones_like(xx),
        ])
        h = np.eye(3)
        h[0, 0] += g.normal(0.0, 0.03)
        h[0, 1] += g.normal(0.0, 0.03)
        h[1, 0] += g.normal(0.0, 0.03)
        h[1, 1] += g.normal(0.0, 0.03)
        h[0, 2] += g.normal(0.0, 0.04)
        h[1, 2] += g.normal(0.0, 0.04)
        h[2, 0] += g.normal(0.0, 0.04)
        h[2, 1] += g.normal(0.0, 0.04)
        src = np.einsum("ij,jhw->ihw", h, n)
        sx = (src[0] / src[2] + 1.0) * (size - 1) / 2.0
        sy = (src[1] / src[2] + 1.0) * (size - 1) / 2.0
        warped = bilinear_sample(base, sx, sy)
        blurred = _gaussian_blur(warped, float(g.uniform(0.8, 1.2)))
        contrast = float(g.uniform(0.45, 0.6))
        out = 0.5 + contrast * (blurred - 0.5)
        out = out + g.normal(0.0, 0.015, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def michelson_contrast(image: np.ndarray) -> float:
    lo, hi = float(image.min()), float(image.max())
    if hi + lo == 0.0:
        return 0.0
    return (hi - lo) / (hi + lo)


# ---------------------------------------------------------------------------
# preprocessing

def _resize_bilinear(image: np.ndarray, target: int) -> np.ndarray:
    h, w = image.shape
    if (h, w) == (target, target):
        return image
    ys = (np.arange(target) + 0.5) * (h / target) - 0.5
    xs = (np.arange(target) + 0.5) * (w / target) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return bilinear_sample(image, gx, gy)


def preprocess(image: np.ndarray, target: int, quarter_turns: int = 0) -> Preprocessed:
    """Rotate by multiples of 90 degrees, resize, min-max normalize to [0, 1].

    A zero-dynamic-range input comes back as all zeros with the constant
    flag set.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise DataError(f"preprocess needs a nonempty 2-D image, got shape {arr.shape}")
    if quarter_turns % 4:
        arr = np.rot90(arr, k=quarter_turns % 4)
    arr = _resize_bilinear(arr, target)
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        return Preprocessed(np.zeros_like(arr, dtype=np.float32), True)
    return Preprocessed(((arr - lo) / (hi - lo)).astype(np.float32), False)


# ---------------------------------------------------------------------------
# batching

def make_batch(samples: Sequence[Sample], ids_per_batch: int, samples_per_id: int,
               epoch_seed) -> list[Batch]:
    """P-K batches: K CL and K CB samples for each of P identities per batch.

    Identity order over the epoch is a deterministic permutation from
    `epoch_seed`; a short final chunk wraps around the permutation.
    """
    if ids_per_batch < 2:
        raise ConfigError(f"ids_per_batch must be >= 2, got {ids_per_batch}")
    if samples_per_id < 1:
        raise ConfigError(f"samples_per_id must be >= 1, got {samples_per_id}")
    by_identity: dict[str, dict[str, list[int]]] = {}
    for idx, s in enumerate(samples):
        by_identity.setdefault(s.identity, {m: [] for m in MODALITIES})[s.modality].append(idx)
    identities = sorted(by_identity)
    if len(identities) < ids_per_batch:
        raise ConfigError(
            f"need at least {ids_per_batch} identities, dataset has {len(identities)}"
        )
    deficient = [
        ident for ident in identities
        if any(len(by_identity[ident][m]) < samples_per_id for m in MODALITIES)
    ]
    if deficient:
        raise ConfigError(
            f"identities lack {samples_per_id} samples in some modality: {', '.join(deficient)}"
        )
    g = stream("batch", epoch_seed)
    perm = [identities[i] for i in g.permutation(len(identities))]
    n = len(perm)
    batches: list[Batch] = []
    for start in range(0, n, ids_per_batch):
        chosen = [perm[(start + i) % n] for i in range(ids_per_batch)]
        indices: list[int] = []
        for ident in chosen:
            for modality in MODALITIES:
                pool = by_identity[ident][modality]
                picks = g.choice(len(pool), size=samples_per_id, replace=False)
                indices.extend(pool[int(p)] for p in sorted(picks))
        batches.append(Batch(
            indices=indices,
            identity_labels=[samples[i].identity for i in indices],
            modalities=[samples[i].modality for i in indices],
        ))
    return batches


# ---------------------------------------------------------------------------
# loaded dataset

@dataclass
class Dataset:
    """Samples plus their preprocessed images, aligned by position."""

    samples: list = field(default_factory=list)
    images: list = field(default_factory=list)

    @classmethod
    def from_manifest(cls, manifest_path, image_size: int) -> "Dataset":
        samples = load_manifest(manifest_path)
        images = [
            preprocess(load_image(s.image_path), image_size, s.rotate).image for s in samples
        ]
        return cls(samples, images)

    def split(self, name: str) -> "Dataset":
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}")
        keep = [i for i, s in enumerate(self.samples) if s.split == name]
        return Dataset([self.samples[i] for i in keep], [self.images[i] for i in keep])

    def by_modality(self, modality: str) -> "Dataset":
        keep = [i for i, s in enumerate(self.samples) if s.modality == modality]
        return Dataset([self.samples[i] for i in keep], [self.images[i] for i in keep])

    def __len__(self):
        return len(self.samples)
