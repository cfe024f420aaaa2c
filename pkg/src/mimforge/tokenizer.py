"""Discrete visual tokenizer backed by a k-means patch codebook.

Each patch maps to the index of its nearest centroid (the vocabulary), and a
token decodes back to the centroid's pixels.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from ._io import FormatError, atomic_write, check_magic, pack_u32, read_f64, read_u32
from .patches import _split, patchify_batch, unpatchify_batch
from .tensor import DimensionError

__all__ = [
    "Codebook",
    "TokenGrid",
    "TrainingError",
    "train_codebook",
    "encode_tokens",
    "encode_batch",
    "decode_tokens",
    "token_reconstruction_loss",
    "save_codebook",
    "load_codebook",
]

MAGIC = b"MIMC"
VERSION = 1
_CHUNK = 8192


class TrainingError(RuntimeError):
    """Raised when the codebook cannot be trained on the given patches."""


@dataclass
class Codebook:
    centroids: np.ndarray  # (V, P*P*C)
    patch_size: int
    channels: int
    quantization_error: float = float("nan")
    error_history: list[float] = field(default_factory=list)

    @property
    def vocab_size(self) -> int:
        return self.centroids.shape[0]

    def __post_init__(self) -> None:
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float64)
        p, c = self.patch_size, self.channels
        if self.centroids.ndim != 2 or self.centroids.shape[1] != p * p * c:
            raise DimensionError(f"centroids {self.centroids.shape} do not match P={p}, C={c}")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("codebook centroids must be finite")


@dataclass
class TokenGrid:
    tokens: np.ndarray  # (rows, cols) int64

    @property
    def grid(self) -> tuple[int, int]:
        return self.tokens.shape


def nearest_centroid(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest centroid per row (lowest index on ties) and its squared distance."""
    labels = np.empty(len(x), dtype=np.int64)
    dist = np.empty(len(x))
    for start in range(0, len(x), _CHUNK):
        d2 = cdist(x[start : start + _CHUNK], centroids, "sqeuclidean")
        idx = d2.argmin(axis=1)
        labels[start : start + _CHUNK] = idx
        dist[start : start + _CHUNK] = d2[np.arange(len(idx)), idx]
    return labels, dist


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator, init: np.ndarray | None) -> np.ndarray:
    centers = [] if init is None else [c for c in np.asarray(init, dtype=np.float64)]
    if not centers:
        centers.append(points[rng.integers(len(points))])
    d2 = cdist(points, np.asarray(centers), "sqeuclidean").min(axis=1)
    while len(centers) < k:
        total = d2.sum()
        if total <= 0:
            raise TrainingError("k-means++ seeding ran out of distinct points")
        i = int(rng.choice(len(points), p=d2 / total))
        centers.append(points[i])
        d2 = np.minimum(d2, cdist(points, points[i : i + 1], "sqeuclidean")[:, 0])
    return np.array(centers[:k])


def train_codebook(
    patches: np.ndarray,
    vocab_size: int,
    max_iters: int = 50,
    rng_seed: int = 0,
    patch_size: int | None = None,
    channels: int | None = None,
    init_centroids: np.ndarray | None = None,
) -> Codebook:
    """Lloyd's k-means over flattened patches with k-means++ seeding.

    ``init_centroids`` (fewer than or equal to ``vocab_size`` rows) are kept as
    the first seeds; the rest are drawn by k-means++. Stops after
    ``max_iters`` or once no assignment changes. The per-pixel quantization
    error after each assignment is recorded and must never increase.
    """
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim == 4:  # (N, P, P, C) patch images
        patch_size, channels = x.shape[1], x.shape[3]
    x = x.reshape(len(x), -1)
    dim = x.shape[1]
    if patch_size is None:
        patch_size = int(round(np.sqrt(dim / (channels or 1))))
    if channels is None:
        channels = dim // (patch_size * patch_size)
    if patch_size * patch_size * channels != dim:
        raise TrainingError(f"patch length {dim} does not factor as P*P*C (P={patch_size}, C={channels})")
    if vocab_size < 1:
        raise TrainingError("vocab_size must be >= 1")
    distinct = np.unique(x, axis=0)
    if len(distinct) < vocab_size:
        raise TrainingError(f"only {len(distinct)} distinct patches for vocab_size={vocab_size}")

    rng = np.random.default_rng(rng_seed)
    if vocab_size == 1:
        centroids = x.mean(axis=0, keepdims=True)
    else:
        centroids = _kmeans_pp(distinct, vocab_size, rng, init_centroids)

    history: list[float] = []
    labels = None
    for _ in range(max_iters):
        new_labels, dist = nearest_centroid(x, centroids)
        err = float(dist.mean() / dim)
        _check_monotone(history, err)
        history.append(err)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centroids = _update(x, labels, dist, centroids)
    else:
        labels, dist = nearest_centroid(x, centroids)
        err = float(dist.mean() / dim)
        _check_monotone(history, err)
        history.append(err)

    centroids = _dedup(x, centroids)
    _, dist = nearest_centroid(x, centroids)
    return Codebook(centroids, patch_size, channels, float(dist.mean() / dim), history)


def _check_monotone(history: list[float], err: float) -> None:
    if history and err > history[-1] * (1 + 1e-12) + 1e-15:
        raise TrainingError(f"quantization error increased: {history[-1]!r} -> {err!r}")


def _update(x: np.ndarray, labels: np.ndarray, dist: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    k = len(centroids)
    counts = np.bincount(labels, minlength=k)
    new = centroids.copy()
    for j in np.flatnonzero(counts):
        new[j] = x[labels == j].mean(axis=0)
    empty = np.flatnonzero(counts == 0)
    if len(empty):
        # Re-seed empty clusters at the worst-quantized points.
        order = np.argsort(-dist, kind="stable")
        for j, i in zip(empty, order):
            new[j] = x[i]
    return new


def _dedup(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    _, first = np.unique(centroids, axis=0, return_index=True)
    if len(first) == len(centroids):
        return centroids
    dup = np.setdiff1d(np.arange(len(centroids)), first)
    out = centroids.copy()
    _, dist = nearest_centroid(x, out)
    for j, i in zip(dup, np.argsort(-dist, kind="stable")):
        out[j] = x[i]
    return out


def _check_dims(image: np.ndarray, codebook: Codebook) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape[-3:]
    p = codebook.patch_size
    if h % p or w % p or c != codebook.channels:
        raise DimensionError(f"image {image.shape} incompatible with codebook P={p}, C={codebook.channels}")
    return image


def encode_tokens(image: np.ndarray, codebook: Codebook) -> TokenGrid:
    """Token grid of nearest-centroid indices for each patch (lowest index on ties)."""
    image = _check_dims(image, codebook)
    p = codebook.patch_size
    labels, _ = nearest_centroid(_split(image, p), codebook.centroids)
    return TokenGrid(labels.reshape(image.shape[0] // p, image.shape[1] // p))


def encode_batch(images: np.ndarray, codebook: Codebook) -> np.ndarray:
    """(B, H, W, C) -> (B, d) token indices."""
    images = _check_dims(images, codebook)
    patches = patchify_batch(images, codebook.patch_size)
    b, d, dim = patches.shape
    labels, _ = nearest_centroid(patches.reshape(b * d, dim), codebook.centroids)
    return labels.reshape(b, d)


def decode_tokens(grid: TokenGrid, codebook: Codebook) -> np.ndarray:
    """Fill each patch region with its centroid's pixels."""
    tokens = np.asarray(grid.tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= codebook.vocab_size):
        raise IndexError(f"token index out of range [0, {codebook.vocab_size})")
    r, c = tokens.shape
    patches = codebook.centroids[tokens.reshape(-1)][None]
    return unpatchify_batch(patches, (r, c), codebook.patch_size)[0]


def token_reconstruction_loss(image: np.ndarray, codebook: Codebook) -> float:
    """Per-pixel mean squared error of decode(encode(image)).

    This is the Gaussian-likelihood surrogate of the tokenizer's
    reconstruction log-likelihood, up to an affine constant.
    """
    image = _check_dims(image, codebook)
    recon = decode_tokens(encode_tokens(image, codebook), codebook)
    return float(np.mean((recon - image) ** 2))


def save_codebook(codebook: Codebook, path: str | os.PathLike) -> None:
    atomic_write(path, codebook_to_bytes(codebook))


def codebook_to_bytes(codebook: Codebook) -> bytes:
    header = MAGIC + pack_u32(VERSION, codebook.vocab_size, codebook.patch_size, codebook.channels)
    return header + codebook.centroids.astype("<f8").tobytes()


def load_codebook(path: str | os.PathLike) -> Codebook:
    with open(path, "rb") as fh:
        return codebook_from_bytes(fh.read())


def codebook_from_bytes(payload: bytes) -> Codebook:
    fh = io.BytesIO(payload)
    check_magic(fh, MAGIC)
    version, vocab, p, c = read_u32(fh, 4)
    if version != VERSION:
        raise FormatError(f"unsupported codebook version {version}")
    data = read_f64(fh, vocab * p * p * c).reshape(vocab, p * p * c)
    if fh.read(1):
        raise FormatError("trailing bytes after codebook payload")
    return Codebook(data, p, c)
