"""Coarse change masks and mask-guided token filtering."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from mvcc.errors import DegenerateMemoryError, DimensionError
from mvcc.numerics import Tensor, as_tensor, concat, gather_rows, keep


def _check_divisible(mask: np.ndarray, h: int, w: int) -> tuple[int, int]:
    H, W = mask.shape
    if h < 1 or w < 1 or H % h or W % w:
        raise DimensionError(f"mask {H}x{W} cannot be reduced to {h}x{w}")
    return H // h, W // w


def downsample_nearest(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Sample the source pixel nearest each coarse cell centre."""
    mask = np.asarray(mask)
    sy, sx = _check_divisible(mask, h, w)
    rows = np.floor((np.arange(h) + 0.5) * sy).astype(int)
    cols = np.floor((np.arange(w) + 0.5) * sx).astype(int)
    return (mask[np.ix_(rows, cols)] != 0).astype(np.uint8)


def downsample_any(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """A coarse cell is set when any pixel of its block is set."""
    mask = np.asarray(mask)
    sy, sx = _check_divisible(mask, h, w)
    return (mask.reshape(h, sy, w, sx) != 0).any(axis=(1, 3)).astype(np.uint8)


DOWNSAMPLERS = {"nearest": downsample_nearest, "any": downsample_any}


def coarse_mask(mask: np.ndarray, grid: int, method: str = "nearest") -> np.ndarray:
    """Reduce a full-resolution mask to grid x grid; masks already at grid size pass through."""
    mask = np.asarray(mask)
    if mask.shape == (grid, grid):
        return (mask != 0).astype(np.uint8)
    return DOWNSAMPLERS[method](mask, grid, grid)


def filter_tokens(F1, F2, mask: np.ndarray, mode: str = "zero") -> Tensor:
    """Build the decoder memory ``[F1 (.) m ; F2 (.) m]`` for one pair.

    ``F1``/``F2`` are (hw, c) token grids and ``mask`` the coarse mask (h x w or
    flattened). ``zero`` keeps the sequence length and zeroes unchanged
    tokens; ``drop`` removes them.
    """
    F1, F2 = as_tensor(F1), as_tensor(F2)
    flat = np.asarray(mask).reshape(-1) != 0
    if flat.size != F1.shape[0] or F1.shape != F2.shape:
        raise DimensionError(f"mask of {flat.size} cells does not match token grids {F1.shape} / {F2.shape}")
    memory, valid = build_memory(_batch(F1), _batch(F2), flat[None], mode)
    return memory.reshape(memory.shape[1:])


def _batch(x: Tensor) -> Tensor:
    return x.reshape((1,) + x.shape)


def build_memory(F1: Tensor, F2: Tensor, masks: np.ndarray, mode: str = "zero") -> tuple[Tensor, np.ndarray | None]:
    """Batched filtering: F1/F2 are (B, hw, d), ``masks`` is (B, hw) or (B, h, w).

    Returns the memory and, in drop mode, a (B, L) validity array for rows
    padded up to the longest kept sequence in the batch.
    """
    b, n, _ = F1.shape
    flat = np.asarray(masks).reshape(b, -1) != 0
    if flat.shape[1] != n:
        raise DimensionError(f"mask of {flat.shape[1]} cells does not match {n} tokens per frame")
    both = np.concatenate([flat, flat], axis=1)
    tokens = concat([F1, F2], axis=1)
    if mode == "zero":
        return keep(tokens, both[:, :, None]), None
    if mode != "drop":
        raise ValueError(f"unknown mask mode {mode!r}")
    counts = both.sum(axis=1)
    if (counts == 0).any():
        raise DegenerateMemoryError("drop mode with an all-zero change mask leaves no tokens")
    length = int(counts.max())
    idx = np.zeros((b, length), dtype=np.intp)
    valid = np.zeros((b, length), dtype=bool)
    for i in range(b):
        kept = np.flatnonzero(both[i])
        idx[i, : kept.size] = kept
        valid[i, : kept.size] = True
    memory = keep(gather_rows(tokens, idx), valid[:, :, None])
    return memory, valid


def diff_cd_baseline(image_a: np.ndarray, image_b: np.ndarray, threshold: float = 0.2, min_blob: int = 8) -> np.ndarray:
    """Unsupervised change mask: thresholded mean channel difference, small blobs removed."""
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    diff = np.abs(a - b).mean(axis=-1) if a.ndim == 3 else np.abs(a - b)
    raw = diff > threshold
    labels, count = ndimage.label(raw)
    if count == 0:
        return raw.astype(np.uint8)
    sizes = np.bincount(labels.ravel())
    keep_label = sizes >= min_blob
    keep_label[0] = False
    return keep_label[labels].astype(np.uint8)


def mask_iou(pred: np.ndarray, truth: np.ndarray) -> float:
    """Intersection over union; two empty masks agree perfectly."""
    p, t = np.asarray(pred) != 0, np.asarray(truth) != 0
    union = np.logical_or(p, t).sum()
    return 1.0 if union == 0 else float(np.logical_and(p, t).sum() / union)
