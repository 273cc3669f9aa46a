"""Synthetic multi-modal tumor phantoms, dataset splits and file I/O.

Each phantom is an elliptical "brain" with a skull ring, smooth texture and
three nested tumor regions (label 1 outermost, 3 innermost).  Every
modality renders the same tissue map through its own intensity table, so
the modalities are perfectly co-registered but carry different contrast.
"""

from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng, tenfile

NUM_CLASSES = 4
NOISE_STD = 0.02

# tissue codes for the intermediate map
OUTSIDE, SKULL, BRAIN, EDEMA, CORE, ENHANCING = range(6)

# intensity per tissue code, one row per modality (T1-, T1Gd-, T2-, FLAIR-like)
_BASE_TABLES = np.array([
    [0.02, 0.70, 0.45, 0.38, 0.28, 0.33],
    [0.02, 0.70, 0.45, 0.40, 0.33, 0.88],
    [0.02, 0.30, 0.35, 0.78, 0.62, 0.52],
    [0.02, 0.55, 0.40, 0.88, 0.55, 0.65],
], dtype=np.float64)


@dataclass
class PhantomSet:
    images: np.ndarray  # (n, K, S, S) float32 in [0, 1]
    labels: np.ndarray  # (n, S, S) uint8 in 0..3
    seed: int

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def num_modalities(self) -> int:
        return self.images.shape[1]

    @property
    def size(self) -> int:
        return self.images.shape[2]

    def modality(self, k: int) -> np.ndarray:
        return self.images[:, k]


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def modality_table(k: int, seed: int) -> np.ndarray:
    if k < len(_BASE_TABLES):
        return _BASE_TABLES[k]
    g = rng.stream(seed, "modality-table", k)
    table = g.uniform(0.25, 0.9, size=6)
    table[OUTSIDE] = 0.02
    return table


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def phantom_geometry(index: int, size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Tissue map and smooth texture field for one sample."""
    g = rng.stream(seed, "phantom", index)
    lin = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(lin, lin, indexing="ij")

    cy, cx = g.uniform(-0.05, 0.05, 2)
    ry, rx = g.uniform(0.68, 0.82), g.uniform(0.58, 0.74)
    theta = g.uniform(-0.3, 0.3)
    head = _ellipse(yy, xx, cy, cx, ry, rx, theta)
    brain = _ellipse(yy, xx, cy, cx, ry * 0.9, rx * 0.9, theta)

    # tumor center well inside the brain
    ang, rad = g.uniform(0, 2 * np.pi), g.uniform(0.0, 0.35)
    ty, tx = cy + rad * ry * np.sin(ang), cx + rad * rx * np.cos(ang)
    r1y, r1x = g.uniform(0.2, 0.32), g.uniform(0.2, 0.32)
    t1 = g.uniform(0, np.pi)
    edema = _ellipse(yy, xx, ty, tx, r1y, r1x, t1) & brain
    s2 = g.uniform(0.55, 0.7)
    oy, ox = g.uniform(-0.06, 0.06, 2) * np.array([r1y, r1x])
    core = _ellipse(yy, xx, ty + oy, tx + ox, r1y * s2, r1x * s2, t1 + g.uniform(-0.3, 0.3)) & edema
    s3 = g.uniform(0.45, 0.6)
    enh = _ellipse(yy, xx, ty + oy, tx + ox, r1y * s2 * s3, r1x * s2 * s3, t1) & core

    tissue = np.full((size, size), OUTSIDE, dtype=np.uint8)
    tissue[head] = SKULL
    tissue[brain] = BRAIN
    tissue[edema] = EDEMA
    tissue[core] = CORE
    tissue[enh] = ENHANCING

    texture = np.zeros((size, size))
    for _ in range(3):
        fy, fx = g.uniform(1.0, 4.0, 2)
        ph = g.uniform(0, 2 * np.pi)
        texture += np.cos(np.pi * (fy * yy + fx * xx) + ph)
    texture *= brain / 3.0
    return tissue, texture


def labels_from_tissue(tissue: np.ndarray) -> np.ndarray:
    lab = np.zeros(tissue.shape, dtype=np.uint8)
    lab[tissue == EDEMA] = 1
    lab[tissue == CORE] = 2
    lab[tissue == ENHANCING] = 3
    return lab


def render_modality(tissue: np.ndarray, texture: np.ndarray, k: int, seed: int, index: int,
                    noise: bool = True) -> np.ndarray:
    g = rng.stream(seed, "render", index, k)
    table = modality_table(k, seed)
    img = table[tissue] + 0.06 * texture
    gain, offset = g.uniform(0.85, 1.15), g.uniform(-0.05, 0.05)
    img = gain * img + offset
    if noise:
        img = img + g.normal(0.0, NOISE_STD, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_phantoms(n: int, num_modalities: int, size: int, seed: int) -> PhantomSet:
    """Deterministic phantom set; sample i depends only on (i, seed)."""
    if size < 16 or size % 16:
        raise ValueError(f"phantom size must be a positive multiple of 16, got {size}")
    if num_modalities < 1:
        raise ValueError(f"need at least one modality, got {num_modalities}")
    if n < 1:
        raise ValueError(f"need at least one sample, got {n}")
    images = np.empty((n, num_modalities, size, size), dtype=np.float32)
    labels = np.empty((n, size, size), dtype=np.uint8)
    for i in range(n):
        tissue, texture = phantom_geometry(i, size, seed)
        labels[i] = labels_from_tissue(tissue)
        for k in range(num_modalities):
            images[i, k] = render_modality(tissue, texture, k, seed, i)
    return PhantomSet(images, labels, seed)


def split_counts(n: int) -> tuple[int, int, int]:
    """70/10/20 with validation and test rounded up (484 -> 338/49/97)."""
    n_val = -(-n * 10 // 100)
    n_test = -(-n * 20 // 100)
    return n - n_val - n_test, n_val, n_test


def split_dataset(n: int, seed: int) -> DatasetSplit:
    if n < 10:
        raise ValueError(f"need at least 10 samples to split, got {n}")
    n_train, n_val, _ = split_counts(n)
    perm = rng.stream(seed, "split").permutation(n)
    return DatasetSplit(
        tuple(sorted(int(i) for i in perm[:n_train])),
        tuple(sorted(int(i) for i in perm[n_train:n_train + n_val])),
        tuple(sorted(int(i) for i in perm[n_train + n_val:])),
    )


# ---------------------------------------------------------------------------
# files


def to_pgm_bytes(image: np.ndarray) -> bytes:
    """8-bit binary PGM (P5) of a 2-D image, min-max scaled; flat images map to 0."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D image, got shape {img.shape}")
    lo, hi = img.min(), img.max()
    if hi > lo:
        px = np.round((img - lo) / (hi - lo) * 255.0)
    else:
        px = np.zeros_like(img)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + px.astype(np.uint8).tobytes()


def save_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(to_pgm_bytes(image))


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    # exactly one whitespace byte separates the header from the pixels
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", buf)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported, maxval={maxval}")
    return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)


def manifest_text(ps: PhantomSet) -> str:
    n_train, n_val, n_test = split_counts(ps.n)
    return (f"n={ps.n}\nsites={ps.num_modalities}\nsize={ps.size}\nseed={ps.seed}\n"
            f"split={n_train}/{n_val}/{n_test}\n")


def save_phantoms(ps: PhantomSet, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(ps.n):
        d = out / f"sample_{i:04d}"
        d.mkdir(exist_ok=True)
        for k in range(ps.num_modalities):
            tenfile.save(d / f"mod_{k}.ten", ps.images[i, k])
        tenfile.save(d / "label.ten", ps.labels[i].astype(np.float32))
    (out / "manifest.txt").write_text(manifest_text(ps))
    return out


def read_manifest(path: str | os.PathLike) -> dict[str, str]:
    entries = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            entries[key.strip()] = value.strip()
    return entries


def load_phantoms(in_dir: str | os.PathLike) -> PhantomSet:
    root = Path(in_dir)
    meta = read_manifest(root / "manifest.txt")
    n, k, s = int(meta["n"]), int(meta["sites"]), int(meta["size"])
    images = np.empty((n, k, s, s), dtype=np.float32)
    labels = np.empty((n, s, s), dtype=np.uint8)
    for i in range(n):
        d = root / f"sample_{i:04d}"
        for m in range(k):
            images[i, m] = tenfile.load(d / f"mod_{m}.ten").reshape(s, s)
        labels[i] = tenfile.load(d / "label.ten").reshape(s, s).astype(np.uint8)
    return PhantomSet(images, labels, int(meta["seed"]))


def digest(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
