"""Reduce a proposal set to candidate modes by score thresholding and de-duplication."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ProposalSet, iou


@dataclass(frozen=True)
class FilterConfig:
    score_threshold: float = 0.5
    dedup_iou: float = 0.95
    use_scores: bool = True
    use_dedup: bool = True

    def __post_init__(self):
        if not 0.0 < self.score_threshold < 1.0:
            raise ValueError("score_threshold must lie in (0, 1)")
        if not 0.0 < self.dedup_iou <= 1.0:
            raise ValueError("dedup_iou must lie in (0, 1]")


def filter_proposals(ps: ProposalSet, cfg: FilterConfig) -> tuple[list[int], np.ndarray]:
    """Indices and binarized masks of the proposals that survive filtering.

    Scores must exceed the threshold strictly.  De-duplication walks the
    survivors by descending score (lower index first on ties) and keeps a
    mask only if its IoU with every kept mask is below ``dedup_iou``.  The
    returned indices are in score order when de-duplication is on and in
    index order otherwise.
    """
    idx = np.arange(len(ps))
    if cfg.use_scores:
        idx = idx[ps.scores[idx] > cfg.score_threshold]
    masks = ps.binary()
    if cfg.use_dedup:
        order = sorted(idx.tolist(), key=lambda k: (-ps.scores[k], k))
        kept: list[int] = []
        for k in order:
            if all(iou(masks[k], masks[j]) < cfg.dedup_iou for j in kept):
                kept.append(k)
    else:
        kept = idx.tolist()
    return kept, masks[kept] if kept else np.zeros((0,) + masks.shape[1:], dtype=bool)
