"""Mask geometry: patchification, IoU, NMS, candidate matching, background sampling.

Masks are boolean arrays shaped (T, H, W). An objectness grid is a float
array shaped (T, N) with N = (H / patch) * (W / patch), patches enumerated
in row-major order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from .numerics import DegenerateInputError

_MASK_HEADER = struct.Struct("<III")


def as_mask(mask) -> np.ndarray:
    """Coerce to a boolean (T, H, W) array; a 2-d input is treated as one frame."""
    m = np.asarray(mask)
    if m.ndim == 2:
        m = m[None]
    if m.ndim != 3:
        raise ValueError(f"mask must be (T, H, W), got shape {m.shape}")
    if min(m.shape) < 1:
        raise ValueError(f"mask extents must be >= 1, got {m.shape}")
    return m.astype(bool, copy=False)


def rect_mask(shape: tuple[int, int, int], top: int, left: int, height: int, width: int) -> np.ndarray:
    """Boolean mask with an axis-aligned rectangle set in every frame (clipped to extents)."""
    m = np.zeros(shape, dtype=bool)
    m[:, max(top, 0) : max(top + height, 0), max(left, 0) : max(left + width, 0)] = True
    return m


def patchify_mask(mask, patch_size: int) -> np.ndarray:
    """Fraction of each patch covered by the mask, shape (T, N)."""
    m = as_mask(mask)
    t, h, w = m.shape
    if patch_size < 1 or h % patch_size or w % patch_size:
        raise ValueError(f"extents {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    blocks = m.reshape(t, gh, patch_size, gw, patch_size)
    counts = blocks.sum(axis=(2, 4), dtype=np.int64)
    return counts.reshape(t, gh * gw) / float(patch_size * patch_size)


def binarize(grid, theta: float) -> np.ndarray:
    """1.0 where score >= theta, else 0.0."""
    return (np.asarray(grid, dtype=np.float64) >= theta).astype(np.float64)


def mask_iou(a, b) -> float:
    a = as_mask(a)
    b = as_mask(b)
    if a.shape != b.shape:
        raise ValueError(f"mask extents differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def iou_matrix(masks_a: Sequence, masks_b: Sequence) -> np.ndarray:
    """Pairwise IoU between two lists of equally shaped masks."""
    if not masks_a or not masks_b:
        return np.zeros((len(masks_a), len(masks_b)))
    fa = np.stack([as_mask(m).ravel() for m in masks_a]).astype(np.int64)
    fb = np.stack([as_mask(m).ravel() for m in masks_b]).astype(np.int64)
    if fa.shape[1] != fb.shape[1]:
        raise ValueError("mask extents differ")
    inter = fa @ fb.T
    union = fa.sum(1)[:, None] + fb.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return out


def nms(masks: Sequence, iou_threshold: float = 0.5, cap: int = 2) -> list[int]:
    """Greedy suppression in input order, truncated to the first ``cap`` survivors.

    There are no confidence scores, so earlier masks take precedence.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    kept: list[int] = []
    ious = iou_matrix(list(masks), list(masks))
    for i in range(len(masks)):
        if all(ious[i, j] < iou_threshold for j in kept):
            kept.append(i)
    return kept[:cap]


@dataclass
class CandidatePool:
    candidates: list[np.ndarray]
    positive_indices: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.candidates = [as_mask(c) for c in self.candidates]
        self.positive_indices = tuple(sorted(set(int(i) for i in self.positive_indices)))
        if not self.positive_indices:
            raise ValueError("candidate pool needs at least one positive")
        if any(i < 0 or i >= len(self.candidates) for i in self.positive_indices):
            raise ValueError("positive index out of range")
        shapes = {c.shape for c in self.candidates}
        if len(shapes) != 1:
            raise ValueError(f"candidates have mixed extents: {shapes}")

    def __len__(self):
        return len(self.candidates)


def match_candidates(candidates: Sequence, gts: Sequence, min_iou: float = 0.5) -> CandidatePool:
    """Mark the best-overlapping candidate of each ground truth as positive.

    A ground truth with no candidate reaching ``min_iou`` is appended to the
    pool and marked positive itself. Ties go to the lowest candidate index.
    """
    if not gts:
        raise ValueError("need at least one ground-truth mask")
    pool = [as_mask(c) for c in candidates]
    n_orig = len(pool)
    ious = iou_matrix(pool, list(gts)) if n_orig else np.zeros((0, len(gts)))
    positives = []
    for g, gt in enumerate(gts):
        if n_orig:
            best = int(np.argmax(ious[:, g]))  # argmax takes the first maximum
            if ious[best, g] >= min_iou:
                positives.append(best)
                continue
        pool.append(as_mask(gt))
        positives.append(len(pool) - 1)
    return CandidatePool(pool, tuple(positives))


def background_indices(grid, theta: float) -> np.ndarray:
    """(frame, patch) pairs whose objectness is below theta, row-major order."""
    grid = np.asarray(grid, dtype=np.float64)
    return np.argwhere(grid < theta)


def sample_background(grid, theta: float, beta: float, rng_seed) -> list[tuple[int, int]]:
    """Uniformly draw ceil(beta% of the background patches) distinct (frame, patch) pairs.

    ``rng_seed`` may be an int, a SeedSequence, or a numpy Generator.
    """
    bg = background_indices(grid, theta)
    if len(bg) == 0:
        raise DegenerateInputError("no background patches to sample from")
    if not 0 < beta <= 100:
        raise ValueError("beta must be in (0, 100]")
    count = min(len(bg), math.ceil(beta / 100.0 * len(bg)))
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    picked = np.sort(rng.choice(len(bg), size=count, replace=False))
    return [(int(bg[k, 0]), int(bg[k, 1])) for k in picked]


# -- binary record format: <u32 T, u32 H, u32 W> then T*H*W bytes of 0/1 --

def write_mask(fh: BinaryIO, mask) -> None:
    m = as_mask(mask)
    fh.write(_MASK_HEADER.pack(*m.shape))
    fh.write(m.astype(np.uint8).tobytes(order="C"))


def read_mask(fh: BinaryIO) -> np.ndarray:
    offset = fh.tell()
    head = fh.read(_MASK_HEADER.size)
    if len(head) != _MASK_HEADER.size:
        raise ValueError(f"truncated mask header at byte {offset}")
    t, h, w = _MASK_HEADER.unpack(head)
    n = t * h * w
    body = fh.read(n)
    if len(body) != n:
        raise ValueError(f"truncated mask body at byte {offset + _MASK_HEADER.size}")
    bits = np.frombuffer(body, dtype=np.uint8)
    if np.any(bits > 1):
        raise ValueError(f"mask bytes must be 0 or 1 (record at byte {offset})")
    return bits.reshape(t, h, w).astype(bool)
