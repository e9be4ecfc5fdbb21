"""Labeled image corpora and their on-disk form (PGM files + CSV manifest).

Pixels are float32 in [0, 1], always quantized to multiples of 1/255, so a
dump to 8-bit PGM and back reproduces them bit-exactly.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataFormatError(Exception):
    """Malformed on-disk data (bad header, truncation, inconsistent counts)."""


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # (C, H, W) float32 in [0, 1]
    label: int

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3:
            raise ValueError(f"pixels must be (C, H, W), got {self.pixels.shape}")
        if self.label < 0:
            raise ValueError("label must be non-negative")


class Corpus:
    """A batch of labeled images stored as dense arrays."""

    def __init__(self, images: np.ndarray, labels: np.ndarray) -> None:
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ValueError("labels must be one per image")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        self.images = images
        self.labels = labels

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]))

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels)) if len(self) else []

    def indices_of(self, label: int) -> np.ndarray:
        return np.nonzero(self.labels == label)[0]

    def subset(self, indices) -> "Corpus":
        idx = np.asarray(indices, dtype=np.int64)
        return Corpus(self.images[idx], self.labels[idx])


def quantize01(images: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and snap to the 8-bit grid (k/255)."""
    u8 = np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    return (u8.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def to_u8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write one grayscale image as binary PGM (P5, maxval 255)."""
    img = np.asarray(image)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise DataFormatError(f"PGM supports a single channel, got shape {img.shape}")
        img = img[0]
    if img.ndim != 2:
        raise DataFormatError(f"PGM image must be 2-d, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(to_u8(img).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM into a (1, H, W) float32 array in [0, 1]."""
    raw = Path(path).read_bytes()
    try:
        header, rest = raw.split(b"\n", 1)
        dims, rest = rest.split(b"\n", 1)
        maxval, payload = rest.split(b"\n", 1)
        if header != b"P5" or maxval != b"255":
            raise ValueError
        w, h = (int(v) for v in dims.split())
    except ValueError as exc:
        raise DataFormatError(f"{path}: not a maxval-255 binary PGM") from exc
    if len(payload) != w * h:
        raise DataFormatError(f"{path}: expected {w * h} pixel bytes, found {len(payload)}")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(1, h, w)
    return (img.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def image_checksum(pixels: np.ndarray, label: int) -> int:
    """CRC32 over the label and the 8-bit pixel payload."""
    crc = zlib.crc32(str(int(label)).encode("ascii"))
    return zlib.crc32(to_u8(pixels).tobytes(), crc)


def dump_corpus(corpus: Corpus, directory: str | Path) -> Path:
    """Write a corpus as img_%05d.pgm files plus manifest.csv (filename,label)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["filename", "label"])
        for i in range(len(corpus)):
            name = f"img_{i:05d}.pgm"
            write_pgm(directory / name, corpus.images[i])
            writer.writerow([name, int(corpus.labels[i])])
    return manifest


def load_corpus(directory: str | Path) -> Corpus:
    directory = Path(directory)
    manifest = directory / "manifest.csv"
    if not manifest.exists():
        raise DataFormatError(f"{manifest}: manifest not found")
    images, labels = [], []
    with open(manifest, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["filename", "label"]:
            raise DataFormatError(f"{manifest}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise DataFormatError(f"{manifest}: line {lineno}: expected 2 fields, got {len(row)}")
            try:
                label = int(row[1])
            except ValueError as exc:
                raise DataFormatError(f"{manifest}: line {lineno}: bad label {row[1]!r}") from exc
            images.append(read_pgm(directory / row[0]))
            labels.append(label)
    if not images:
        return Corpus(np.zeros((0, 1, 1, 1), dtype=np.float32), np.zeros((0,), dtype=np.int64))
    return Corpus(np.stack(images), np.asarray(labels))
