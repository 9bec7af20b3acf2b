"""Rectangular optimal assignment and the mask distances used to build costs."""
from __future__ import annotations

from typing import Literal

import numpy as np
import torch

from .core import ProposalSet, as_binary_mask

DistanceKind = Literal["one_minus_iou", "mse", "dice", "dice_focal"]
DISTANCE_KINDS = ("one_minus_iou", "mse", "dice", "dice_focal")

DICE_EPS = 1e-6
FOCAL_GAMMA = 2.0
PROB_CLAMP = 1e-7


def _hungarian(cost: np.ndarray):
    """Shortest augmenting path Kuhn-Munkres on a square matrix.

    Returns ``(row_to_col, u, v)`` where ``u``/``v`` are optimal dual
    potentials: ``cost[i, j] - u[i] - v[j] >= 0`` with equality on the
    returned assignment.
    """
    n = cost.shape[0]
    # 1-based bookkeeping; index 0 of columns is the virtual root
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    a = np.zeros((n + 1, n + 1))
    a[1:, 1:] = cost
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used
            free[0] = False
            cur = a[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    row_to_col[owner[1:] - 1] = np.arange(n)
    return row_to_col, u[1:], v[1:]


def _lex_smallest(tight: np.ndarray, match: np.ndarray, n_real: int) -> np.ndarray:
    """Lexicographically smallest perfect matching inside the tight-edge graph.

    ``match`` must already be a perfect matching using only tight edges.
    Rows are fixed one at a time; a smaller column is taken whenever an
    alternating path frees it without touching fixed rows.
    """
    n = len(match)
    match = match.copy()
    col_owner = np.empty(n, dtype=np.int64)
    col_owner[match] = np.arange(n)
    locked_rows = np.zeros(n, dtype=bool)
    locked_cols = np.zeros(n, dtype=bool)

    def find_path(row, target, seen):
        # alternating path from `row` that ends by taking column `target`
        for c in np.flatnonzero(tight[row]):
            if locked_cols[c] or seen[c] or c == match[row]:
                continue
            if c == target:
                return [(row, c)]
            seen[c] = True
            r2 = col_owner[c]
            if locked_rows[r2]:
                continue
            rest = find_path(r2, target, seen)
            if rest is not None:
                return [(row, c)] + rest
        return None

    for i in range(n_real):
        current = match[i]
        for j in np.flatnonzero(tight[i, :current]):
            if locked_cols[j]:
                continue
            r = col_owner[j]
            seen = np.zeros(n, dtype=bool)
            seen[j] = True
            locked_rows[i] = True
            path = find_path(r, current, seen)
            locked_rows[i] = False
            if path is None:
                continue
            for row, c in [(i, j)] + path:
                match[row] = c
                col_owner[c] = row
            break
        locked_rows[i] = True
        locked_cols[match[i]] = True
    return match


def solve_assignment(cost) -> tuple[np.ndarray, float]:
    """Minimum-cost assignment of every row to a distinct column.

    ``cost`` has shape (rows, cols) with rows <= cols.  Among all optimal
    assignments the lexicographically smallest column vector is returned.
    The total is summed in row order.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    rows, cols = c.shape
    if rows > cols:
        raise ValueError(f"need rows <= cols, got {rows}x{cols}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix entries must be finite")
    if rows == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    square = np.zeros((cols, cols))
    square[:rows] = c
    match, u, v = _hungarian(square)
    reduced = square - u[:, None] - v[None, :]
    tol = 1e-11 * max(1.0, float(np.abs(c).max()))
    tight = reduced <= tol
    tight[np.arange(cols), match] = True
    match = _lex_smallest(tight, match, rows)
    assignment = match[:rows]
    total = float(sum(c[i, assignment[i]] for i in range(rows)))
    return assignment, total


# ---------------------------------------------------------------------------
# mask distances (torch, differentiable in the prediction)


def _clamp(p):
    return p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)


def distance(kind: str, t: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """Mask distance reduced over the last (pixel) axis; leading axes broadcast."""
    if kind == "one_minus_iou":
        inter = (t * p).sum(-1)
        union = (t + p - t * p).sum(-1)
        empty = union == 0
        soft = inter / torch.where(empty, torch.ones_like(union), union)
        return 1.0 - torch.where(empty, torch.ones_like(soft), soft)
    if kind == "mse":
        return ((t - p) ** 2).mean(-1)
    if kind == "dice":
        return _dice(t, p)
    if kind == "dice_focal":
        return 0.5 * _dice(t, p) + 0.5 * _focal(t, p)
    raise ValueError(f"unknown distance kind {kind!r}; expected one of {DISTANCE_KINDS}")


def pairwise_distance(kind: str, targets: torch.Tensor, preds: torch.Tensor) -> torch.Tensor:
    """Distance between every target (..., N, D) and prediction (..., M, D) -> (..., N, M)."""
    return distance(kind, targets[..., :, None, :], preds[..., None, :, :])


def _dice(t, p):
    return 1.0 - 2.0 * (t * p).sum(-1) / (t.sum(-1) + p.sum(-1) + DICE_EPS)


def _focal(t, p):
    p_t = _clamp(t * p + (1.0 - t) * (1.0 - p))
    return (-((1.0 - p_t) ** FOCAL_GAMMA) * torch.log(p_t)).mean(-1)


def mask_distance(kind: str, target, pred) -> float:
    """Distance between one binary target mask and one soft prediction."""
    target = np.asarray(target)
    pred = np.asarray(pred, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValueError(f"mask shapes differ: {target.shape} vs {pred.shape}")
    t = torch.tensor(as_binary_mask(target).reshape(1, -1), dtype=torch.float64)
    p = torch.tensor(pred.reshape(1, -1), dtype=torch.float64)
    return float(pairwise_distance(kind, t, p)[0, 0])


def cost_matrix(kind: str, gt, preds) -> np.ndarray:
    """Numpy cost matrix between gt masks (N, H, W) and soft predictions (M, H, W)."""
    gt = as_binary_mask(gt)
    preds = np.asarray(preds, dtype=np.float64)
    if gt.shape[1:] != preds.shape[1:]:
        raise ValueError(f"mask shapes differ: {gt.shape[1:]} vs {preds.shape[1:]}")
    t = torch.tensor(gt.reshape(len(gt), -1), dtype=torch.float64)
    p = torch.tensor(preds.reshape(len(preds), -1), dtype=torch.float64)
    with torch.no_grad():
        return pairwise_distance(kind, t, p).numpy()


def match_modes(gt, proposals: ProposalSet, kind: str = "one_minus_iou") -> np.ndarray:
    """Optimal partial permutation from gt masks to proposal indices."""
    gt = as_binary_mask(gt)
    if len(gt) > len(proposals):
        raise ValueError(f"{len(gt)} gt masks but only {len(proposals)} proposals")
    assignment, _ = solve_assignment(cost_matrix(kind, gt, proposals.proposals))
    return assignment
