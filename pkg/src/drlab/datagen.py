"""Deterministic synthetic class stream (base task + B0 Inc-n stages) and PGM folder ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigurationError

TRAIN, TEST = "train", "test"


class StreamSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    base_classes: int = Field(10, gt=0)
    incremental_classes: int = Field(10, gt=0)
    inc_n: int = Field(2, gt=0)
    train_per_class: int = Field(40, gt=0)
    test_per_class: int = Field(20, gt=0)
    noise_sigma: float = Field(0.15, ge=0)
    image_side: int = Field(16, gt=0)
    max_shift: int = Field(2, ge=0)
    seed: int = Field(0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _check(self):
        if self.incremental_classes % self.inc_n:
            raise ValueError("incremental_classes must be divisible by inc_n")
        return self

    @property
    def num_stages(self) -> int:
        return self.incremental_classes // self.inc_n


@dataclass
class Dataset:
    """Images, labels and globally unique sample ids for one split.

    Every call to :meth:`read` is appended to ``access_log`` so the engine's
    data access can be audited.
    """

    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    access_log: list[int] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def classes(self) -> list[int]:
        return sorted(set(self.labels.tolist()))

    def read(self, indices=None) -> tuple[np.ndarray, np.ndarray]:
        if indices is None:
            indices = np.arange(len(self))
        self.access_log.extend(self.ids[indices].tolist())
        return self.images[indices], self.labels[indices]

    @classmethod
    def concat(cls, parts: list["Dataset"]) -> "Dataset":
        return cls(
            images=np.concatenate([p.images for p in parts]),
            labels=np.concatenate([p.labels for p in parts]),
            ids=np.concatenate([p.ids for p in parts]),
        )


@dataclass
class StageDataset:
    stage: int
    classes: list[int]
    train: Dataset
    test: Dataset


def split_b0_inc_n(classes, n: int) -> list[list[int]]:
    classes = list(classes)
    if n <= 0 or len(classes) % n:
        raise ConfigurationError(f"{len(classes)} classes cannot be split into stages of {n}")
    return [classes[i : i + n] for i in range(0, len(classes), n)]


def class_template(class_id: int, seed: int, side: int) -> np.ndarray:
    """Oriented sinusoid grating plus a signed Gaussian-blob mixture, unique per class."""
    rng = np.random.default_rng([seed, class_id, 0x7E])
    yy, xx = np.mgrid[0:side, 0:side] / side
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(1.0, 3.0)
    phase = rng.uniform(0, 2 * np.pi)
    grating = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    blobs = np.zeros((side, side))
    for _ in range(rng.integers(2, 4)):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        width = rng.uniform(0.08, 0.2)
        sign = rng.choice([-1.0, 1.0])
        blobs += sign * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
    img = 0.5 + 0.22 * grating + 0.3 * blobs
    return np.clip(img, 0.0, 1.0)


def _class_samples(class_id: int, split: str, count: int, spec: StreamSpec) -> np.ndarray:
    template = class_template(class_id, spec.seed, spec.image_side)
    rng = np.random.default_rng([spec.seed, class_id, 0 if split == TRAIN else 1])
    out = np.empty((count, spec.image_side, spec.image_side))
    for i in range(count):
        dy, dx = rng.integers(-spec.max_shift, spec.max_shift + 1, size=2)
        img = np.roll(template, (dy, dx), axis=(0, 1))
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
        out[i] = np.clip(img, 0.0, 1.0)
    return out


def _sample_id(class_id: int, split: str, i: int) -> int:
    return class_id * 100_000 + (0 if split == TRAIN else 50_000) + i


def make_dataset(classes, split: str, spec: StreamSpec) -> Dataset:
    count = spec.train_per_class if split == TRAIN else spec.test_per_class
    images, labels, ids = [], [], []
    for c in classes:
        images.append(_class_samples(c, split, count, spec))
        labels.append(np.full(count, c))
        ids.append([_sample_id(c, split, i) for i in range(count)])
    return Dataset(np.concatenate(images), np.concatenate(labels), np.concatenate(ids).astype(np.int64))


def generate_stream(spec: StreamSpec) -> tuple[StageDataset, list[StageDataset]]:
    """Base task (stage 0) and the incremental stages 1..T, all determined by ``spec.seed``."""
    base = list(range(spec.base_classes))
    incremental = list(range(spec.base_classes, spec.base_classes + spec.incremental_classes))
    base_ds = StageDataset(0, base, make_dataset(base, TRAIN, spec), make_dataset(base, TEST, spec))
    stages = [
        StageDataset(t, part, make_dataset(part, TRAIN, spec), make_dataset(part, TEST, spec))
        for t, part in enumerate(split_b0_inc_n(incremental, spec.inc_n), start=1)
    ]
    return base_ds, stages


def write_manifest(stages: list[StageDataset], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "stage", "split", "sample_count"])
        for st in stages:
            for split, ds in ((TRAIN, st.train), (TEST, st.test)):
                counts = {c: int((ds.labels == c).sum()) for c in st.classes}
                for c in st.classes:
                    writer.writerow([c, st.stage, split, counts[c]])


# -- PGM ingestion -----------------------------------------------------------------


def _pgm_tokens(raw: bytes):
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ConfigurationError("truncated PGM header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Binary (P5) PGM -> float image scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    tokens, offset = _pgm_tokens(raw)
    if tokens[0] != b"P5":
        raise ConfigurationError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval < 65536:
        raise ConfigurationError(f"{path}: invalid maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    body = raw[offset : offset + width * height * dtype.itemsize]
    if len(body) != width * height * dtype.itemsize:
        raise ConfigurationError(f"{path}: truncated PGM pixel data")
    return np.frombuffer(body, dtype=dtype).reshape(height, width).astype(np.float64) / maxval


def write_pgm(path, image: np.ndarray) -> None:
    pixels = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def load_pgm_folder(root, first_class_id: int = 0, image_side: int = 16) -> Dataset:
    """One subdirectory per class (sorted by name), each holding ``*.pgm`` files."""
    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ConfigurationError(f"{root}: no class subdirectories")
    images, labels, ids = [], [], []
    for offset, folder in enumerate(class_dirs):
        c = first_class_id + offset
        for i, f in enumerate(sorted(folder.glob("*.pgm"))):
            img = read_pgm(f)
            if img.shape != (image_side, image_side):
                raise ConfigurationError(f"{f}: expected {image_side}x{image_side}, got {img.shape}")
            images.append(img)
            labels.append(c)
            ids.append(c * 100_000 + i)
    return Dataset(np.stack(images), np.array(labels), np.array(ids, dtype=np.int64))
