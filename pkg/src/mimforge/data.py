"""Synthetic source images, augmentations, domain-shift corruptions and OOD meshes."""

from __future__ import annotations

import enum
import io
import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from ._io import FormatError, atomic_write, check_magic, pack_u32, read_exact, read_u32
from .resample import bilinear_resize
from .seeding import derive_seed

__all__ = [
    "UNKNOWN",
    "Provenance",
    "LabeledImage",
    "Dataset",
    "ShiftSpec",
    "SHIFT_KINDS",
    "ParameterError",
    "generate_shapes_dataset",
    "augment",
    "corrupt",
    "corrupt_dataset",
    "make_ood_mesh",
    "save_dataset",
    "load_dataset",
]

UNKNOWN = -1
SHIFT_KINDS = ("gaussian_noise", "blur", "color_jitter", "style_invert")

MAGIC = b"MIMD"
VERSION = 1

# Mesh recipe.
MESH_DONOR_FRACTION = 0.5
MESH_NOISE_SIGMA = 0.1
MESH_JITTER = 0.15
MESH_CELL = 8


class ParameterError(ValueError):
    """Raised for generator parameters outside the supported range."""


class Provenance(enum.IntEnum):
    SOURCE = 0
    AUGMENTED = 1
    CORRUPTED = 2
    OOD_MESH = 3


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (H, W, C) float32 in [0, 1]
    label: int
    provenance: Provenance = Provenance.SOURCE
    source_labels: tuple[int, ...] = ()


@dataclass
class Dataset:
    """Images stored as one (N, H, W, C) float32 array with parallel label/provenance arrays."""

    images: np.ndarray
    labels: np.ndarray
    provenance: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.provenance = np.asarray(self.provenance, dtype=np.uint8).reshape(-1)
        if self.images.ndim != 4:
            raise ParameterError(f"images must be (N, H, W, C), got {self.images.shape}")
        if not (len(self.images) == len(self.labels) == len(self.provenance)):
            raise ParameterError("images, labels and provenance lengths differ")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]), Provenance(int(self.provenance[i])))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    @classmethod
    def empty(cls, image_size: int, channels: int, num_classes: int) -> Dataset:
        return cls(np.zeros((0, image_size, image_size, channels), np.float32), [], [], num_classes)

    @classmethod
    def from_items(cls, items: list[LabeledImage], num_classes: int, image_shape=None) -> Dataset:
        if not items:
            h, w, c = image_shape
            return cls(np.zeros((0, h, w, c), np.float32), [], [], num_classes)
        return cls(
            np.stack([it.pixels for it in items]),
            [it.label for it in items],
            [int(it.provenance) for it in items],
            num_classes,
        )

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.provenance[idx], self.num_classes)

    def concat(self, other: Dataset) -> Dataset:
        return Dataset(
            np.concatenate([self.images, other.images]),
            np.concatenate([self.labels, other.labels]),
            np.concatenate([self.provenance, other.provenance]),
            self.num_classes,
        )

    def known(self) -> Dataset:
        return self.subset(np.flatnonzero(self.labels != UNKNOWN))


# -- shapes ---------------------------------------------------------------------
def _shape_mask(kind: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    au, av = np.abs(u), np.abs(v)
    box = np.maximum(au, av) <= 1.0
    r = np.sqrt(u * u + v * v)
    band = lambda t: np.floor((t + 1.0) * 2.0).astype(np.int64) % 2 == 0  # noqa: E731
    if kind == 0:  # disk
        return r <= 1.0
    if kind == 1:  # ring
        return (r >= 0.55) & (r <= 1.0)
    if kind == 2:  # filled square
        return np.maximum(au, av) <= 0.8
    if kind == 3:  # square outline
        m = np.maximum(au, av)
        return (m >= 0.55) & (m <= 0.85)
    if kind == 4:  # plus
        return ((au <= 0.25) & (av <= 1.0)) | ((av <= 0.25) & (au <= 1.0))
    if kind == 5:  # diagonal cross
        return ((np.abs(u - v) <= 0.3) | (np.abs(u + v) <= 0.3)) & box
    if kind == 6:  # horizontal bars
        return band(v) & box
    if kind == 7:  # vertical bars
        return band(u) & box
    if kind == 8:  # checkerboard
        return (band(u) == band(v)) & box
    if kind == 9:  # triangle
        return (au <= (v + 0.9) / 1.8) & (v <= 0.9)
    if kind == 10:  # diagonal stripes
        return (np.floor((u + v + 2.0) * 1.5).astype(np.int64) % 2 == 0) & box
    if kind == 11:  # four dots
        return ((au - 0.5) ** 2 + (av - 0.5) ** 2) <= 0.35**2
    if kind == 12:  # single horizontal band
        return (av <= 0.3) & (au <= 1.0)
    if kind == 13:  # single vertical band
        return (au <= 0.3) & (av <= 1.0)
    if kind == 14:  # corner "L"
        return ((u >= -0.9) & (u <= -0.4) & (av <= 0.9)) | ((v >= 0.4) & (v <= 0.9) & (au <= 0.9))
    if kind == 15:  # diamond
        return au + av <= 1.0
    raise ParameterError(f"unknown shape family {kind}")


NUM_SHAPE_FAMILIES = 16


def render_shape(kind: int, size: int, rng: np.random.Generator, channels: int = 3) -> np.ndarray:
    """Draw one shape with random centre, scale and colours."""
    cx, cy = size / 2 + rng.uniform(-0.05, 0.05, size=2) * size
    scale = rng.uniform(0.33, 0.40) * size
    bg = rng.uniform(0.0, 0.3, size=channels)
    fg = rng.uniform(0.6, 1.0, size=channels)
    coords = np.arange(size) + 0.5
    u = (coords[None, :] - cx) / scale
    v = (coords[:, None] - cy) / scale
    m = _shape_mask(kind, u, v)[:, :, None]
    return np.where(m, fg, bg)


def generate_shapes_dataset(
    num_classes: int, per_class: int, image_size: int = 32, rng_seed: int = 0, channels: int = 3
) -> Dataset:
    """Class ``k`` draws shape family ``k``; each image gets its own derived seed."""
    if num_classes < 2:
        raise ParameterError("num_classes must be >= 2")
    if num_classes > NUM_SHAPE_FAMILIES:
        raise ParameterError(f"at most {NUM_SHAPE_FAMILIES} shape families are available")
    if per_class < 0:
        raise ParameterError("per_class must be >= 0")
    n = num_classes * per_class
    images = np.zeros((n, image_size, image_size, channels), np.float32)
    labels = np.repeat(np.arange(num_classes), per_class)
    for i in range(n):
        rng = np.random.default_rng(derive_seed(rng_seed, "shape", i))
        images[i] = render_shape(int(labels[i]), image_size, rng, channels)
    return Dataset(images, labels, np.full(n, Provenance.SOURCE), num_classes)


# -- augmentation -----------------------------------------------------------------
def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def augment(
    image: np.ndarray,
    rng: np.random.Generator,
    crop_scale: tuple[float, float] = (0.7, 1.0),
    jitter: float = 0.2,
    flip_p: float = 0.5,
) -> np.ndarray:
    """Random resized crop, per-channel colour jitter and horizontal flip."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    scale = rng.uniform(*crop_scale)
    ch = min(h, max(1, int(round(h * np.sqrt(scale)))))
    cw = min(w, max(1, int(round(w * np.sqrt(scale)))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    out = bilinear_resize(img[top : top + ch, left : left + cw], h, w)
    offsets = rng.uniform(-jitter, jitter, size=img.shape[2]) if jitter > 0 else np.zeros(img.shape[2])
    out = np.clip(out + offsets, 0.0, 1.0)
    if rng.random() < flip_p:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


# -- corruptions ---------------------------------------------------------------------
@dataclass(frozen=True)
class ShiftSpec:
    kind: str
    severity: int
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in SHIFT_KINDS:
            raise ParameterError(f"unknown shift kind {self.kind!r}; expected one of {SHIFT_KINDS}")
        if not 1 <= self.severity <= 5:
            raise ParameterError(f"severity must be in [1, 5], got {self.severity}")

    @property
    def name(self) -> str:
        return f"{self.kind}_s{self.severity}"


def noise_sigma(severity: int) -> float:
    return 0.04 * severity


def corrupt(image: np.ndarray, spec: ShiftSpec, index: int = 0) -> np.ndarray:
    """Apply one shift. The random draw depends on (seed, index) but not on severity."""
    src = np.asarray(image)
    img = src.astype(np.float64)
    s = spec.severity
    rng = np.random.default_rng(derive_seed(spec.rng_seed, spec.kind, index))
    if spec.kind == "gaussian_noise":
        out = img + noise_sigma(s) * rng.standard_normal(img.shape)
    elif spec.kind == "blur":
        # Filtering the offset from a per-channel reference keeps flat regions exact.
        ref = img[:1, :1]
        out = ref + uniform_filter(img - ref, size=(2 * s + 1, 2 * s + 1, 1), mode="nearest")
    elif spec.kind == "color_jitter":
        out = img + 0.06 * s * rng.uniform(-1.0, 1.0, size=img.shape[2])
    else:  # style_invert: solarise the top 20% * severity of the value range
        threshold = 1.0 - 0.2 * s
        out = np.where(img >= threshold, 1.0 - img, img)
    out = np.clip(out, 0.0, 1.0)
    return out.astype(np.float32) if src.dtype == np.float32 else out


def corrupt_dataset(dataset: Dataset, spec: ShiftSpec) -> Dataset:
    images = np.stack([corrupt(img, spec, i) for i, img in enumerate(dataset.images)]) if len(dataset) else dataset.images
    prov = np.full(len(dataset), Provenance.CORRUPTED)
    return Dataset(images, dataset.labels.copy(), prov, dataset.num_classes)


# -- OOD meshes ---------------------------------------------------------------------
def make_ood_mesh(dataset: Dataset, count: int, rng_seed: int = 0, cell: int = MESH_CELL) -> list[LabeledImage]:
    """Stitch cells from images of different classes, then noise and jitter them.

    Half of the cells come from a donor image; every other cell comes from a
    random image whose label differs from the donor's.
    """
    known = np.flatnonzero(dataset.labels != UNKNOWN)
    if count < 0:
        raise ParameterError("count must be >= 0")
    if count == 0:
        return []
    if len(known) < 2 or len(np.unique(dataset.labels[known])) < 2:
        raise ParameterError("mesh construction needs >= 2 labelled images from >= 2 classes")
    h, w, c = dataset.image_shape
    rows, cols = -(-h // cell), -(-w // cell)
    n_cells = rows * cols
    n_donor = int(round(MESH_DONOR_FRACTION * n_cells))
    out = []
    for k in range(count):
        rng = np.random.default_rng(derive_seed(rng_seed, "mesh", k))
        donor = int(known[rng.integers(len(known))])
        donor_label = int(dataset.labels[donor])
        others = known[dataset.labels[known] != donor_label]
        order = rng.permutation(n_cells)
        sources = np.empty(n_cells, dtype=np.int64)
        sources[order[:n_donor]] = donor
        sources[order[n_donor:]] = others[rng.integers(len(others), size=n_cells - n_donor)]
        mesh = np.empty((h, w, c))
        for j in range(n_cells):
            r0, c0 = (j // cols) * cell, (j % cols) * cell
            mesh[r0 : r0 + cell, c0 : c0 + cell] = dataset.images[sources[j], r0 : r0 + cell, c0 : c0 + cell]
        mesh += MESH_NOISE_SIGMA * rng.standard_normal(mesh.shape)
        mesh += rng.uniform(-MESH_JITTER, MESH_JITTER, size=c)
        pixels = np.clip(mesh, 0.0, 1.0).astype(np.float32)
        labels = tuple(sorted({int(dataset.labels[s]) for s in sources}))
        out.append(LabeledImage(pixels, UNKNOWN, Provenance.OOD_MESH, labels))
    return out


def mesh_dataset(dataset: Dataset, count: int, rng_seed: int = 0) -> Dataset:
    return Dataset.from_items(make_ood_mesh(dataset, count, rng_seed), dataset.num_classes, dataset.image_shape)


# -- file format ----------------------------------------------------------------------
def dataset_to_bytes(dataset: Dataset) -> bytes:
    n = len(dataset)
    h, w, c = dataset.image_shape
    parts = [MAGIC, pack_u32(VERSION, n, h, w, c, dataset.num_classes)]
    for i in range(n):
        parts.append(struct.pack("<iB", int(dataset.labels[i]), int(dataset.provenance[i])))
        parts.append(dataset.images[i].astype("<f4").tobytes())
    return b"".join(parts)


def dataset_from_bytes(payload: bytes) -> Dataset:
    fh = io.BytesIO(payload)
    check_magic(fh, MAGIC)
    version, n, h, w, c, k = read_u32(fh, 6)
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    images = np.zeros((n, h, w, c), np.float32)
    labels = np.zeros(n, np.int64)
    prov = np.zeros(n, np.uint8)
    size = h * w * c * 4
    for i in range(n):
        labels[i], prov[i] = struct.unpack("<iB", read_exact(fh, 5))
        images[i] = np.frombuffer(read_exact(fh, size), dtype="<f4").reshape(h, w, c)
    if fh.read(1):
        raise FormatError("trailing bytes after dataset payload")
    return Dataset(images, labels, prov, k)


def save_dataset(dataset: Dataset, path: str | os.PathLike) -> None:
    atomic_write(path, dataset_to_bytes(dataset))


def load_dataset(path: str | os.PathLike) -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
