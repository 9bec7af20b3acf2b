"""Mask and mode-distribution value types shared by the whole package.

Masks are plain numpy arrays: a binary mask is a ``bool`` array of shape
``(H, W)`` and a soft mask is a ``float64`` array of the same shape with
values in ``[0, 1]``.  Stacks of masks carry a leading axis.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

WEIGHT_TOL = 1e-9


def as_binary_mask(a) -> np.ndarray:
    """Validate ``a`` as a binary mask (or stack of masks) and return a bool array."""
    arr = np.asarray(a)
    if arr.ndim < 2 or arr.size == 0:
        raise ValueError(f"expected a non-empty (..., H, W) mask, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("binary mask values must be 0 or 1")
    return arr.astype(bool)


def as_soft_mask(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim < 2 or arr.size == 0:
        raise ValueError(f"expected a non-empty (..., H, W) mask, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("soft mask values must lie in [0, 1]")
    return arr


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def iou(a, b) -> float:
    """Intersection over union of two binary masks.

    Two empty masks are identical and score 1.0.
    """
    a = as_binary_mask(a)
    b = as_binary_mask(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def pairwise_iou(a, b) -> np.ndarray:
    """IoU between every mask of stack ``a`` (N, H, W) and stack ``b`` (M, H, W)."""
    a = as_binary_mask(a)
    b = as_binary_mask(b)
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"mask shapes differ: {a.shape[1:]} vs {b.shape[1:]}")
    fa = a.reshape(len(a), -1).astype(np.int64)
    fb = b.reshape(len(b), -1).astype(np.int64)
    inter = fa @ fb.T
    union = fa.sum(1)[:, None] + fb.sum(1)[None, :] - inter
    out = np.ones(inter.shape, dtype=np.float64)
    nz = union > 0
    out[nz] = inter[nz] / union[nz]
    return out


def binarize(m, threshold: float = 0.5) -> np.ndarray:
    """Threshold a soft mask; values ``>= threshold`` become 1."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return np.asarray(m, dtype=np.float64) >= threshold


@dataclass(frozen=True, eq=False)
class ModeSet:
    """Discrete distribution over unique binary masks.

    ``counts`` records how many raw outcomes were merged into each mode; it is
    what the duplicate-aware metrics (plain HM IoU, HM IoU multi) consume.
    """

    masks: np.ndarray
    weights: np.ndarray
    counts: Optional[np.ndarray] = None

    def __post_init__(self):
        masks = as_binary_mask(self.masks)
        if masks.ndim != 3:
            raise ValueError("ModeSet.masks must have shape (K, H, W)")
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(weights) != len(masks):
            raise ValueError("ModeSet needs one weight per mask")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ValueError("ModeSet weights must be finite and non-negative")
        if abs(weights.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError(f"ModeSet weights sum to {weights.sum():.12g}, expected 1")
        flat = masks.reshape(len(masks), -1)
        if len({row.tobytes() for row in flat}) != len(masks):
            raise ValueError("ModeSet masks must be unique; merge duplicates first")
        counts = np.ones(len(masks), dtype=np.int64) if self.counts is None else np.asarray(self.counts, dtype=np.int64)
        if counts.shape != weights.shape or np.any(counts < 1):
            raise ValueError("ModeSet counts must be positive, one per mask")
        object.__setattr__(self, "masks", _frozen(masks))
        object.__setattr__(self, "weights", _frozen(weights))
        object.__setattr__(self, "counts", _frozen(counts))

    def __len__(self):
        return len(self.masks)

    @property
    def shape(self):
        return self.masks.shape[1:]

    def expanded(self) -> np.ndarray:
        """Masks repeated by multiplicity, i.e. the raw list with duplicates."""
        return np.repeat(self.masks, self.counts, axis=0)

    def __eq__(self, other):
        if not isinstance(other, ModeSet):
            return NotImplemented
        return (
            np.array_equal(self.masks, other.masks)
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.counts, other.counts)
        )


def merge_duplicates(masks, weights, counts=None) -> ModeSet:
    """Collapse identical masks, summing their weights (first occurrence order)."""
    masks = as_binary_mask(masks)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(masks) != len(weights):
        raise ValueError("need one weight per mask")
    counts = np.ones(len(masks), dtype=np.int64) if counts is None else np.asarray(counts, dtype=np.int64)
    groups: dict[bytes, int] = {}
    keep, w_out, n_out = [], [], []
    for i, m in enumerate(masks):
        key = m.tobytes()
        if key in groups:
            g = groups[key]
            w_out[g] += weights[i]
            n_out[g] += counts[i]
        else:
            groups[key] = len(keep)
            keep.append(i)
            w_out.append(weights[i])
            n_out.append(counts[i])
    return ModeSet(masks[keep], np.array(w_out), np.array(n_out))


@dataclass(frozen=True, eq=False)
class FlipStructure:
    """Class-flip structure: disjoint templates toggled by Bernoulli flips.

    ``alpha[j, i]`` is 1 when template ``i`` is switched on in mode ``j``.
    """

    templates: np.ndarray
    flip_probs: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        t = as_binary_mask(self.templates)
        if t.ndim != 3:
            raise ValueError("templates must have shape (C, H, W)")
        p = np.asarray(self.flip_probs, dtype=np.float64).reshape(-1)
        a = np.asarray(self.alpha, dtype=np.int64)
        if len(p) != len(t) or a.ndim != 2 or a.shape[1] != len(t):
            raise ValueError("flip structure dimensions are inconsistent")
        if np.any((p < 0) | (p > 1)):
            raise ValueError("flip probabilities must lie in [0, 1]")
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("alpha entries must be 0 or 1")
        if np.any(t.sum(0) > 1):
            raise ValueError("templates must be pairwise disjoint")
        object.__setattr__(self, "templates", _frozen(t))
        object.__setattr__(self, "flip_probs", _frozen(p))
        object.__setattr__(self, "alpha", _frozen(a))

    def compose(self, alpha_row) -> np.ndarray:
        alpha_row = np.asarray(alpha_row, dtype=bool)
        return np.any(self.templates[alpha_row], axis=0) if alpha_row.any() else np.zeros(self.templates.shape[1:], bool)

    def __eq__(self, other):
        if not isinstance(other, FlipStructure):
            return NotImplemented
        return (
            np.array_equal(self.templates, other.templates)
            and np.array_equal(self.flip_probs, other.flip_probs)
            and np.array_equal(self.alpha, other.alpha)
        )


@dataclass(frozen=True, eq=False)
class DatasetItem:
    input: np.ndarray  # (C, H, W)
    modes: ModeSet
    flip: Optional[FlipStructure] = None

    def __post_init__(self):
        x = np.asarray(self.input, dtype=np.float64)
        if x.ndim != 3:
            raise ValueError("input must have shape (C, H, W)")
        if x.shape[1:] != self.modes.shape:
            raise ValueError(f"input spatial shape {x.shape[1:]} does not match masks {self.modes.shape}")
        if self.flip is not None:
            if len(self.flip.alpha) != len(self.modes):
                raise ValueError("flip structure needs one alpha row per mode")
            for j, row in enumerate(self.flip.alpha):
                if not np.array_equal(self.flip.compose(row), self.modes.masks[j]):
                    raise ValueError(f"mode {j} is not the union of its flipped-on templates")
        object.__setattr__(self, "input", _frozen(x))

    @property
    def shape(self):
        return self.modes.shape

    def __eq__(self, other):
        if not isinstance(other, DatasetItem):
            return NotImplemented
        return np.array_equal(self.input, other.input) and self.modes == other.modes and self.flip == other.flip


@dataclass(frozen=True, eq=False)
class ProposalSet:
    """Soft proposal masks (K, H, W) and their selection scores (K,)."""

    proposals: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        p = as_soft_mask(self.proposals)
        s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if p.ndim != 3 or len(s) != len(p):
            raise ValueError("ProposalSet needs (K, H, W) proposals and K scores")
        if np.any((s < 0) | (s > 1)) or not np.all(np.isfinite(s)):
            raise ValueError("selection scores must lie in [0, 1]")
        object.__setattr__(self, "proposals", _frozen(p))
        object.__setattr__(self, "scores", _frozen(s))

    def __len__(self):
        return len(self.scores)

    def binary(self, threshold: float = 0.5) -> np.ndarray:
        return binarize(self.proposals, threshold)

