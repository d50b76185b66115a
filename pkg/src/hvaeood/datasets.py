"""Dataset ingestion and synthesis.

IDX files (the MNIST family's big-endian binary format) are parsed
bit-exactly, with transparent gzip handling.  Synthetic generators provide
desk-scale ID/OOD pairs; preprocessing adapts raw [0,1] images to the
configured decoder (dynamic binarization for Bernoulli, 1/256-bin uniform
dequantization for the continuous kernels).
"""

from __future__ import annotations

import gzip
import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .likelihoods import DecoderKind
from .rng import SeededRng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MAX_IDX_ELEMENTS = 1 << 33  # refuse absurd headers before allocating


class IdxFormatError(ValueError):
    """Raised when an IDX file violates the format."""


@dataclass(frozen=True)
class Dataset:
    """Images in [0,1] with provenance describing exactly how they were made."""

    name: str
    images: np.ndarray  # (n, H, W, C) float64
    provenance: dict
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            raise ValueError(f"images must be (n, H, W, C) with n >= 1, got {self.images.shape}")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.images.shape[0]


def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _parse_idx(payload: bytes, path, expect_magic: int, what: str) -> np.ndarray:
    if len(payload) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", payload[:4])
    if magic != expect_magic:
        raise IdxFormatError(
            f"{path}: wrong magic 0x{magic:08x} for {what} (expected 0x{expect_magic:08x})")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(payload) < header_len:
        raise IdxFormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", payload[4:header_len])
    count = math.prod(dims)
    if count > MAX_IDX_ELEMENTS:
        raise IdxFormatError(f"{path}: dimension overflow, {dims} declares {count} elements")
    body = payload[header_len:]
    if len(body) != count:
        raise IdxFormatError(
            f"{path}: truncated payload, expected {count} bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path=None, name: str | None = None) -> Dataset:
    """Parse an IDX image file (and optional labels), scaling pixels to [0,1]."""
    raw = _read_maybe_gzip(images_path)
    grid = _parse_idx(raw, images_path, IMAGE_MAGIC, "images")
    images = grid.astype(np.float64) / 255.0
    if images.ndim == 3:
        images = images[..., np.newaxis]
    provenance = {
        "kind": "idx_file",
        "path": str(images_path),
        "sha256": hashlib.sha256(Path(images_path).read_bytes()).hexdigest(),
    }
    labels = None
    if labels_path is not None:
        labels = _parse_idx(_read_maybe_gzip(labels_path), labels_path, LABEL_MAGIC, "labels")
        if labels.shape[0] != images.shape[0]:
            raise IdxFormatError(
                f"{labels_path}: {labels.shape[0]} labels for {images.shape[0]} images")
    return Dataset(name=name or Path(str(images_path)).stem, images=images,
                   provenance=provenance, labels=labels)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (images for 3-D input, labels for 1-D)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    magic = IMAGE_MAGIC if arr.ndim == 3 else LABEL_MAGIC
    if arr.ndim not in (1, 3):
        raise ValueError(f"write_idx supports 1-D labels or 3-D images, got ndim {arr.ndim}")
    header = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


# ---------------------------------------------------------------------------
# synthetic generators


def _gen_blobs(shape, n, rng: SeededRng) -> np.ndarray:
    """Compact bright bumps on a dark background; 1-3 bumps per image."""
    h, w, c = shape
    yy, xx = np.mgrid[0:h, 0:w]
    images = np.zeros((n, h, w, c))
    counts = rng.integers(1, 4, (n,))
    for i in range(n):
        img = np.zeros((h, w))
        for _ in range(int(counts[i])):
            cy = rng.uniform(0.15 * h, 0.85 * h)
            cx = rng.uniform(0.15 * w, 0.85 * w)
            width = rng.uniform(0.09, 0.16) * min(h, w)
            amp = rng.uniform(0.8, 1.0)
            img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width ** 2))
        images[i, :, :, :] = np.clip(img, 0.0, 1.0)[:, :, np.newaxis]
    return images


def _gen_stripes(shape, n, rng: SeededRng) -> np.ndarray:
    """Thin bright oriented sinusoid ridges on a dark background.

    Ridge sharpening keeps the on-pixel fraction close to the blobs
    generator's, so the two populations differ in global arrangement rather
    than first-order pixel statistics.
    """
    h, w, c = shape
    yy, xx = np.mgrid[0:h, 0:w]
    images = np.zeros((n, h, w, c))
    for i in range(n):
        theta = rng.uniform(0.0, np.pi)
        freq = rng.uniform(2.0, 3.5) * 2.0 * np.pi / min(h, w)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = 0.5 + 0.5 * np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        images[i, :, :, :] = (wave ** 6)[:, :, np.newaxis]
    return images


def _gen_noise(shape, n, rng: SeededRng) -> np.ndarray:
    h, w, c = shape
    return rng.uniform(0.0, 1.0, (n, h, w, c))


GENERATORS = {"blobs": _gen_blobs, "stripes": _gen_stripes, "noise": _gen_noise}


def synth(generator: str, shape, n: int, seed: int, name: str | None = None) -> Dataset:
    """One synthetic dataset from a named generator, deterministic in the seed."""
    if generator not in GENERATORS:
        raise ValueError(f"unknown generator {generator!r}; expected one of {sorted(GENERATORS)}")
    if n < 1:
        raise ValueError("need at least one sample")
    rng = SeededRng(seed).stream(f"synth:{generator}")
    images = GENERATORS[generator](tuple(shape), n, rng)
    return Dataset(
        name=name or generator,
        images=images,
        provenance={"kind": "synthetic", "generator": generator, "seed": seed},
    )


def synth_pair(spec: dict) -> tuple[Dataset, Dataset]:
    """An (ID, OOD) pair; the two sides use independent derived seeds.

    spec keys: shape, n, id_generator, ood_generator, seed.
    """
    shape, n, seed = spec["shape"], spec["n"], spec["seed"]
    root = SeededRng(seed)
    id_seed = int(root.stream("pair:id").integers(0, 2 ** 31, ()))
    ood_seed = int(root.stream("pair:ood").integers(0, 2 ** 31, ()))
    return (
        synth(spec["id_generator"], shape, n, id_seed, name=f"id:{spec['id_generator']}"),
        synth(spec["ood_generator"], shape, n, ood_seed, name=f"ood:{spec['ood_generator']}"),
    )


# ---------------------------------------------------------------------------
# preprocessing


def preprocess(ds: Dataset, decoder: DecoderKind, rng: SeededRng) -> Dataset:
    """Adapt raw images to a decoder: binarize for Bernoulli, dequantize otherwise.

    Binarization draws each pixel Bernoulli(pixel value); dequantization adds
    u/256 with u ~ U[0,1) and clamps below 1.
    """
    if decoder.tag == "bernoulli":
        u = rng.uniform(0.0, 1.0, ds.images.shape)
        images = (u < ds.images).astype(np.float64)
        step = "binarize"
    else:
        u = rng.uniform(0.0, 1.0, ds.images.shape)
        images = np.minimum(ds.images + u / 256.0, np.nextafter(1.0, 0.0))
        step = "dequantize"
    provenance = dict(ds.provenance)
    provenance["preprocess"] = step
    return Dataset(name=ds.name, images=images, provenance=provenance, labels=ds.labels)


def subsample(ds: Dataset, n: int, seed: int) -> Dataset:
    """Seeded uniform sample without replacement, preserving original order."""
    if not (1 <= n <= ds.n):
        raise ValueError(f"subsample size {n} out of range [1, {ds.n}]")
    idx = np.sort(SeededRng(seed).stream("subsample").choice_without_replacement(ds.n, n))
    provenance = dict(ds.provenance)
    provenance["subsample"] = {"n": n, "seed": seed}
    labels = None if ds.labels is None else ds.labels[idx]
    return Dataset(name=ds.name, images=ds.images[idx], provenance=provenance, labels=labels)
