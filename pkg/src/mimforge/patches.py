"""Patch splicing and blockwise mask generation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, Tensor, where

__all__ = [
    "PatchSequence",
    "MaskPlan",
    "MaskParameterError",
    "patchify",
    "patchify_batch",
    "unpatchify",
    "blockwise_mask",
    "default_min_block",
    "apply_mask",
]

MAX_ATTEMPTS = 10_000


class MaskParameterError(ValueError):
    """Raised for infeasible blockwise-masking parameters."""


@dataclass
class PatchSequence:
    patches: np.ndarray  # (d, P*P*C)
    grid: tuple[int, int]
    source_dims: tuple[int, int, int]
    patch_size: int

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]


@dataclass
class MaskPlan:
    masked: frozenset[int]
    target_ratio: float
    seed: int
    grid: tuple[int, int] = (0, 0)
    blocks: list[tuple[int, int, int, int]] = field(default_factory=list)  # (top, left, h, w)

    def indices(self) -> np.ndarray:
        """Masked indices in ascending order."""
        return np.array(sorted(self.masked), dtype=np.int64)

    def as_bool(self, d: int) -> np.ndarray:
        out = np.zeros(d, dtype=bool)
        out[list(self.masked)] = True
        return out

    def to_line(self) -> str:
        return f"seed={self.seed} ratio={self.target_ratio!r} masked={','.join(map(str, sorted(self.masked)))}"

    @classmethod
    def from_line(cls, line: str) -> MaskPlan:
        fields = dict(part.split("=", 1) for part in line.split())
        masked = frozenset(int(i) for i in fields["masked"].split(",") if i)
        return cls(masked=masked, target_ratio=float(fields["ratio"]), seed=int(fields["seed"]))


def _split(images: np.ndarray, p: int) -> np.ndarray:
    *lead, h, w, c = images.shape
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} is not divisible by patch size {p}")
    r, cc = h // p, w // p
    x = images.reshape(*lead, r, p, cc, p, c)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, r * cc, p * p * c)


def patchify(image: np.ndarray, patch_size: int) -> PatchSequence:
    """Splice an H x W x C image into non-overlapping P x P patches.

    Patches are ordered row-major over the grid, and each one is flattened in
    (row, col, channel) order.
    """
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    patches = _split(image, patch_size)
    return PatchSequence(patches, (h // patch_size, w // patch_size), (h, w, c), patch_size)


def patchify_batch(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, C) -> (B, d, P*P*C)."""
    return _split(np.asarray(images), patch_size)


def unpatchify(seq: PatchSequence) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    h, w, c = seq.source_dims
    p = seq.patch_size
    r, cc = seq.grid
    x = seq.patches.reshape(r, cc, p, p, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(h, w, c)


def unpatchify_batch(patches: np.ndarray, grid: tuple[int, int], patch_size: int) -> np.ndarray:
    r, cc = grid
    p = patch_size
    b = patches.shape[0]
    c = patches.shape[-1] // (p * p)
    x = patches.reshape(b, r, cc, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, r * p, cc * p, c)


def default_min_block(d: int) -> int:
    return max(1, d // 12)


def blockwise_mask(
    grid: tuple[int, int],
    target_ratio: float = 0.4,
    min_block: int | None = None,
    max_aspect: float = 3.33,
    rng_seed: int = 0,
    max_block: int | None = None,
) -> MaskPlan:
    """Union random rectangles of patches until the target count is reached.

    Each rectangle has area in ``[min_block, max_block]``, aspect ratio within
    ``[1/max_aspect, max_aspect]`` and lies fully inside the grid. Sampling
    draws a target area and a log-uniform aspect ratio, then rounds to
    integer sides; draws that violate a constraint are rejected.
    ``max_block`` defaults to the target count.
    """
    rows, cols = grid
    d = rows * cols
    if not 0 < target_ratio < 1:
        raise MaskParameterError(f"target_ratio must lie in (0, 1), got {target_ratio}")
    target = math.ceil(target_ratio * d)
    if min_block is None:
        min_block = default_min_block(d)
    if max_block is None:
        max_block = max(target, min_block)
    if min_block < 1 or min_block > d:
        raise MaskParameterError(f"min_block={min_block} infeasible for {d} patches")
    if max_block < min_block:
        raise MaskParameterError(f"max_block={max_block} < min_block={min_block}")
    if max_aspect < 1:
        raise MaskParameterError(f"max_aspect must be >= 1, got {max_aspect}")

    rng = np.random.default_rng(rng_seed)
    log_aspect = math.log(max_aspect)
    mask = np.zeros((rows, cols), dtype=bool)
    count = 0
    blocks: list[tuple[int, int, int, int]] = []
    attempts = 0
    while count < target:
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise MaskParameterError(
                f"no admissible block found in {MAX_ATTEMPTS} attempts "
                f"(grid={grid}, min_block={min_block}, max_aspect={max_aspect})"
            )
        remaining = target - count
        hi = min(max_block, max(min_block, remaining))
        area = rng.uniform(min_block, hi) if hi > min_block else float(min_block)
        aspect = math.exp(rng.uniform(-log_aspect, log_aspect))
        h = int(round(math.sqrt(area * aspect)))
        w = int(round(math.sqrt(area / aspect)))
        if not (1 <= h <= rows and 1 <= w <= cols):
            continue
        if not (min_block <= h * w <= max_block) or not _aspect_ok(h, w, max_aspect):
            continue
        top = int(rng.integers(0, rows - h + 1))
        left = int(rng.integers(0, cols - w + 1))
        window = mask[top : top + h, left : left + w]
        new = h * w - int(window.sum())
        if new == 0:
            continue
        window[...] = True
        count += new
        blocks.append((top, left, h, w))
    masked = frozenset(int(i) for i in np.flatnonzero(mask))
    return MaskPlan(masked=masked, target_ratio=target_ratio, seed=rng_seed, grid=grid, blocks=blocks)


def _aspect_ok(h: int, w: int, max_aspect: float) -> bool:
    return h <= max_aspect * w and w <= max_aspect * h


def apply_mask(embedded: Tensor, plan: MaskPlan | np.ndarray, mask_embedding: Tensor) -> Tensor:
    """Replace the masked rows of a d x D (or B x d x D) embedding.

    ``plan`` is a MaskPlan or a boolean array shaped like the leading axes.
    """
    d = embedded.shape[-2]
    if isinstance(plan, MaskPlan):
        if plan.masked and (max(plan.masked) >= d or min(plan.masked) < 0):
            raise IndexError(f"mask index out of range for {d} rows")
        cond = plan.as_bool(d)
    else:
        cond = np.asarray(plan, dtype=bool)
        if cond.shape != embedded.shape[:-1]:
            raise DimensionError(f"mask shape {cond.shape} does not match {embedded.shape[:-1]}")
    if not cond.any():
        return embedded
    return where(cond[..., None], mask_embedding, embedded)
