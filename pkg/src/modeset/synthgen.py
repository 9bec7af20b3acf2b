"""Synthetic ambiguous-segmentation datasets with known mode distributions.

Two families are provided:

* directional spread: a seed pixel on a grid with scattered obstacles; each
  direction produces a 90 degree wedge flood fill from the seed that stops at
  obstacles and borders.  Blocked directions collapse to duplicate masks.
* class flip: disjoint rectangular class regions, each independently switched
  on with its own Bernoulli probability; the modes are all flip combinations.

Datasets persist as JSON lines, one item per line, masks run-length encoded.
"""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage, optimize

from .core import WEIGHT_TOL, DatasetItem, FlipStructure, ModeSet, merge_duplicates
from .structest import mode_prob

log = logging.getLogger(__name__)

FORMAT_VERSION = "v1"
PRIOR_ENDPOINTS = (0.004, 0.502)


class DatasetFormatError(ValueError):
    """Raised for malformed or invalid dataset files."""


def skewed_prior(n: int, endpoints=PRIOR_ENDPOINTS) -> np.ndarray:
    """Increasing prior with fixed endpoints and geometric interior summing to 1."""
    lo, hi = endpoints
    if n == 1:
        return np.ones(1)
    if n == 2:
        return np.array([lo, 1.0 - lo])
    rest = 1.0 - lo - hi
    ks = np.arange(1, n - 1)

    def excess(q):
        return lo * np.sum(q**ks) - rest

    q = optimize.brentq(excess, 1e-9, 1e3, xtol=1e-15)
    w = np.concatenate([[lo], lo * q**ks, [hi]])
    w[-1] = 1.0 - w[:-1].sum()
    return w


@dataclass
class DirectionalConfig:
    grid_size: tuple[int, int] = (16, 16)
    num_directions: int = 8
    prior_weights: Optional[Sequence[float]] = None
    obstacle_density: float = 0.05
    num_items: int = 100
    rng_seed: int = 0
    # seeds are drawn at least this many pixels away from the border
    seed_margin: int = 5
    max_retries: int = 100

    def __post_init__(self):
        self.grid_size = tuple(int(s) for s in self.grid_size)
        if len(self.grid_size) != 2 or min(self.grid_size) < 1:
            raise ValueError("grid_size must be two positive integers")
        if self.num_directions < 1:
            raise ValueError("num_directions must be positive")
        if self.prior_weights is None:
            self.prior_weights = skewed_prior(self.num_directions).tolist()
        w = np.asarray(self.prior_weights, dtype=np.float64)
        if len(w) != self.num_directions:
            raise ValueError("prior_weights needs one entry per direction")
        if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError("prior_weights must lie on the simplex")
        if not 0.0 <= self.obstacle_density < 1.0:
            raise ValueError("obstacle_density must lie in [0, 1)")
        if self.num_items < 0:
            raise ValueError("num_items must be non-negative")
        h, w_ = self.grid_size
        if 2 * self.seed_margin >= min(h, w_):
            raise ValueError("seed_margin leaves no room for the seed")


@dataclass
class ClassFlipConfig:
    grid_size: tuple[int, int] = (16, 16)
    num_classes: int = 4
    flip_probs: Sequence[float] = (0.05, 0.25, 0.75, 0.95)
    num_items: int = 100
    rng_seed: int = 0
    # probability that a class is absent from an item (its template is empty)
    empty_prob: float = 0.0
    min_side: int = 2
    max_side: int = 7
    max_retries: int = 1000

    def __post_init__(self):
        self.grid_size = tuple(int(s) for s in self.grid_size)
        self.flip_probs = tuple(float(p) for p in self.flip_probs)
        if len(self.flip_probs) != self.num_classes:
            raise ValueError("flip_probs needs one entry per class")
        if any(not 0.0 < p < 1.0 for p in self.flip_probs):
            raise ValueError("flip probabilities must lie in (0, 1)")
        if not 0.0 <= self.empty_prob < 1.0:
            raise ValueError("empty_prob must lie in [0, 1)")
        if self.num_items < 0:
            raise ValueError("num_items must be non-negative")


def _child_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


# ---------------------------------------------------------------------------
# directional spread


def wedge_mask(shape, seed, angle: float, half_width: float = np.pi / 4) -> np.ndarray:
    """Pixels whose bearing from ``seed`` is within ``half_width`` of ``angle``.

    Bearings are measured counter-clockwise from east with rows growing
    downwards; the seed itself is always included.
    """
    h, w = shape
    rr, cc = np.mgrid[0:h, 0:w]
    dy = -(rr - seed[0])
    dx = cc - seed[1]
    bearing = np.arctan2(dy, dx)
    diff = np.abs((bearing - angle + np.pi) % (2 * np.pi) - np.pi)
    inside = diff <= half_width + 1e-9
    inside[seed] = True
    return inside


def directional_modes(seed, obstacles: np.ndarray, num_directions: int) -> np.ndarray:
    """One flood-fill mask per direction, shape (num_directions, H, W)."""
    obstacles = np.asarray(obstacles, dtype=bool)
    if obstacles[seed]:
        raise ValueError("seed sits on an obstacle")
    out = np.zeros((num_directions,) + obstacles.shape, dtype=bool)
    for k in range(num_directions):
        allowed = wedge_mask(obstacles.shape, seed, 2 * np.pi * k / num_directions) & ~obstacles
        labels, _ = ndimage.label(allowed)
        out[k] = labels == labels[seed]
    return out


def make_directional_item(seed, obstacles, prior_weights) -> DatasetItem:
    obstacles = np.asarray(obstacles, dtype=bool)
    masks = directional_modes(seed, obstacles, len(prior_weights))
    x = np.zeros((2,) + obstacles.shape)
    x[0][seed] = 1.0
    x[1] = obstacles
    return DatasetItem(x, merge_duplicates(masks, prior_weights))


def gen_directional(cfg: DirectionalConfig) -> list[DatasetItem]:
    h, w = cfg.grid_size
    m = cfg.seed_margin
    items = []
    for i in range(cfg.num_items):
        rng = _child_rng(cfg.rng_seed, i)
        obstacles = rng.random((h, w)) < cfg.obstacle_density
        for _ in range(cfg.max_retries):
            seed = (int(rng.integers(m, h - m)), int(rng.integers(m, w - m)))
            if not obstacles[seed]:
                break
        else:
            raise RuntimeError(f"item {i}: could not place a seed off obstacles after {cfg.max_retries} tries")
        items.append(make_directional_item(seed, obstacles, cfg.prior_weights))
    return items


# ---------------------------------------------------------------------------
# class flip


def _place_rectangles(rng, shape, n, min_side, max_side, max_retries):
    h, w = shape
    for _ in range(max_retries):
        occupied = np.zeros(shape, dtype=bool)
        rects, areas = [], set()
        for _ in range(n):
            rh = int(rng.integers(min_side, max_side + 1))
            rw = int(rng.integers(min_side, max_side + 1))
            if rh > h or rw > w or rh * rw in areas:
                break
            r0 = int(rng.integers(0, h - rh + 1))
            c0 = int(rng.integers(0, w - rw + 1))
            # one pixel of clearance keeps regions well separated
            halo = occupied[max(r0 - 1, 0) : r0 + rh + 1, max(c0 - 1, 0) : c0 + rw + 1]
            if halo.any():
                break
            occupied[r0 : r0 + rh, c0 : c0 + rw] = True
            rects.append((r0, c0, rh, rw))
            areas.add(rh * rw)
        if len(rects) == n:
            return rects
    raise RuntimeError(f"could not place {n} disjoint regions after {max_retries} tries")


def make_classflip_item(templates, flip_probs) -> DatasetItem:
    templates = np.asarray(templates, dtype=bool)
    c = len(templates)
    alpha = np.array(list(itertools.product((0, 1), repeat=c)), dtype=np.int64)
    masks = np.array([np.any(templates[row.astype(bool)], axis=0) if row.any() else np.zeros(templates.shape[1:], bool) for row in alpha])
    weights = np.array([mode_prob(row, flip_probs) for row in alpha])
    weights = weights / weights.sum()
    modes = merge_duplicates(masks, weights)
    # keep the alpha row of the first occurrence of each unique mask
    seen, rows = set(), []
    for j, m in enumerate(masks):
        key = m.tobytes()
        if key not in seen:
            seen.add(key)
            rows.append(j)
    flip = FlipStructure(templates, flip_probs, alpha[rows])
    labels = np.zeros(templates.shape[1:], dtype=np.int64)
    for i, t in enumerate(templates):
        labels[t] = i + 1
    x = np.stack([(labels == k).astype(np.float64) for k in range(c + 1)])
    return DatasetItem(x, modes, flip)


def gen_classflip(cfg: ClassFlipConfig) -> list[DatasetItem]:
    items = []
    for i in range(cfg.num_items):
        rng = _child_rng(cfg.rng_seed, i)
        try:
            rects = _place_rectangles(rng, cfg.grid_size, cfg.num_classes, cfg.min_side, cfg.max_side, cfg.max_retries)
        except RuntimeError as e:
            raise RuntimeError(f"item {i}: {e}") from None
        templates = np.zeros((cfg.num_classes,) + cfg.grid_size, dtype=bool)
        for k, (r0, c0, rh, rw) in enumerate(rects):
            if rng.random() >= cfg.empty_prob:
                templates[k, r0 : r0 + rh, c0 : c0 + rw] = True
        items.append(make_classflip_item(templates, cfg.flip_probs))
    return items


def sample_single_label(item: DatasetItem, rng: np.random.Generator) -> np.ndarray:
    """Draw one mode mask with probability equal to its weight."""
    k = rng.choice(len(item.modes), p=item.modes.weights)
    return item.modes.masks[k]


# ---------------------------------------------------------------------------
# persistence


def rle_encode(mask: np.ndarray) -> str:
    """Row-major run lengths, alternating and starting with a run of zeros."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return ",".join(str(r) for r in runs)


def rle_decode(text: str, shape) -> np.ndarray:
    runs = [int(r) for r in text.split(",")] if text else []
    if any(r < 0 for r in runs) or sum(runs) != int(np.prod(shape)):
        raise ValueError(f"run lengths do not cover a {shape} mask")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(shape)


def item_to_dict(item: DatasetItem) -> dict:
    d = {
        "v": FORMAT_VERSION,
        "shape": list(item.shape),
        "input": item.input.tolist(),
        "modes": [
            {"rle": rle_encode(m), "w": float(w), "n": int(n)}
            for m, w, n in zip(item.modes.masks, item.modes.weights, item.modes.counts)
        ],
    }
    if item.flip is not None:
        d["flip"] = {
            "templates": [rle_encode(t) for t in item.flip.templates],
            "p": item.flip.flip_probs.tolist(),
            "alpha": item.flip.alpha.tolist(),
        }
    return d


def item_from_dict(d: dict) -> DatasetItem:
    if d.get("v") != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {d.get('v')!r}")
    shape = tuple(d["shape"])
    masks = np.array([rle_decode(m["rle"], shape) for m in d["modes"]])
    weights = np.array([m["w"] for m in d["modes"]], dtype=np.float64)
    counts = np.array([m.get("n", 1) for m in d["modes"]], dtype=np.int64)
    if len(masks) == 0:
        raise ValueError("item has no modes")
    if abs(weights.sum() - 1.0) > WEIGHT_TOL:
        raise ValueError(f"mode weights sum to {weights.sum():.12g}, expected 1")
    flip = None
    if "flip" in d:
        f = d["flip"]
        flip = FlipStructure(np.array([rle_decode(t, shape) for t in f["templates"]]), f["p"], f["alpha"])
    return DatasetItem(np.array(d["input"], dtype=np.float64), ModeSet(masks, weights, counts), flip)


def save_dataset(items: Sequence[DatasetItem], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item_to_dict(item), separators=(",", ":")))
            fh.write("\n")


def load_dataset(path) -> list[DatasetItem]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            index = len(items)
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"line {lineno}: invalid JSON ({e.msg})") from None
            try:
                items.append(item_from_dict(d))
            except (KeyError, TypeError, ValueError) as e:
                raise DatasetFormatError(f"line {lineno} (item {index}): {e}") from None
    return items
