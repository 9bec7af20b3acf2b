"""Evaluation metrics: Hungarian-matched IoU variants, selection F1, Brier skill."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import ModeSet, ProposalSet, as_binary_mask, pairwise_iou
from .matching import solve_assignment

BSS_EPS = 1e-8


def _matched_ious(gt: np.ndarray, proposals: np.ndarray) -> np.ndarray:
    """IoU of each gt mask with its optimally matched proposal (0 if unmatched)."""
    out = np.zeros(len(gt))
    if len(gt) == 0 or len(proposals) == 0:
        return out
    ious = pairwise_iou(gt, proposals)
    if len(gt) <= len(proposals):
        cols, _ = solve_assignment(1.0 - ious)
        out[:] = ious[np.arange(len(gt)), cols]
    else:
        # fewer proposals than gt masks: match proposals to gt, the rest score 0
        rows, _ = solve_assignment(1.0 - ious.T)
        out[rows] = ious[rows, np.arange(len(proposals))]
    return out


def _as_stack(masks) -> np.ndarray:
    masks = np.asarray(masks)
    if masks.ndim == 3 and len(masks) == 0:
        return masks.astype(bool)
    return as_binary_mask(masks)


def _unique_with_counts(masks: np.ndarray):
    keys: dict[bytes, int] = {}
    uniq, counts = [], []
    for m in masks:
        k = m.tobytes()
        if k in keys:
            counts[keys[k]] += 1
        else:
            keys[k] = len(uniq)
            uniq.append(m)
            counts.append(1)
    return np.array(uniq), np.array(counts, dtype=np.float64)


def hm_iou_star(gt, proposals) -> float:
    """Mean matched IoU over the unique gt masks.

    ``gt`` is a ModeSet or a stack of masks (duplicates are dropped).
    Proposals beyond the matched ones are ignored; gt masks left without a
    proposal score 0.
    """
    masks = gt.masks if isinstance(gt, ModeSet) else _unique_with_counts(_as_stack(gt))[0]
    return float(_matched_ious(masks, _as_stack(proposals)).mean())


def hm_iou(gt_with_duplicates, proposals) -> float:
    """Mean matched IoU where every gt annotation, duplicates included, needs its own proposal."""
    gt = gt_with_duplicates.expanded() if isinstance(gt_with_duplicates, ModeSet) else _as_stack(gt_with_duplicates)
    return float(_matched_ious(gt, _as_stack(proposals)).mean())


def hm_iou_multi(gt_with_duplicates, proposals) -> float:
    """Matched IoU over unique gt masks, averaged with each mask's multiplicity."""
    if isinstance(gt_with_duplicates, ModeSet):
        uniq, counts = gt_with_duplicates.masks, gt_with_duplicates.counts.astype(np.float64)
    else:
        uniq, counts = _unique_with_counts(_as_stack(gt_with_duplicates))
    ious = _matched_ious(uniq, _as_stack(proposals))
    return float(ious @ counts / counts.sum())


def selection_labels(gt: ModeSet, ps: ProposalSet) -> np.ndarray:
    """1 for proposals matched (by IoU cost) to a unique gt mask, else 0."""
    labels = np.zeros(len(ps), dtype=np.int64)
    binary = ps.binary()
    ious = pairwise_iou(gt.masks, binary)
    if len(gt) <= len(ps):
        cols, _ = solve_assignment(1.0 - ious)
        labels[cols] = 1
    else:
        labels[:] = 1
    return labels


def selection_counts(gt: ModeSet, ps: ProposalSet, threshold: float = 0.5) -> tuple[int, int, int]:
    labels = selection_labels(gt, ps)
    pred = ps.scores > threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    return tp, fp, fn


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def selection_f1(items: Sequence[tuple[ModeSet, ProposalSet]], threshold: float = 0.5) -> float:
    """Micro-averaged F1 of ``score > threshold`` against matched/unmatched labels."""
    tp = fp = fn = 0
    for gt, ps in items:
        a, b, c = selection_counts(gt, ps, threshold)
        tp, fp, fn = tp + a, fp + b, fn + c
    return f1_from_counts(tp, fp, fn)


def brier(w_hat, w_true) -> float:
    w_hat = np.asarray(w_hat, dtype=np.float64)
    w_true = np.asarray(w_true, dtype=np.float64)
    if w_hat.shape != w_true.shape:
        raise ValueError("weight vectors must be aligned")
    return float(np.mean((w_hat - w_true) ** 2))


def bss(w_hat, w_true, eps: float = BSS_EPS) -> float:
    """Brier skill score against the uniform forecast; 1 is perfect."""
    w_true = np.asarray(w_true, dtype=np.float64)
    uniform = np.full_like(w_true, 1.0 / len(w_true))
    return 1.0 - brier(w_hat, w_true) / (brier(uniform, w_true) + eps)


def align_to_reference(masks, values, reference) -> tuple[np.ndarray, np.ndarray]:
    """Carry per-mask ``values`` onto ``reference`` masks by IoU matching.

    Returns the aligned vector (0 where a reference mask has no partner) and
    a boolean vector marking which input masks were matched.
    """
    masks = _as_stack(masks)
    values = np.asarray(values, dtype=np.float64)
    reference = _as_stack(reference)
    if len(masks) != len(values):
        raise ValueError("need one value per mask")
    aligned = np.zeros(len(reference))
    matched = np.zeros(len(masks), dtype=bool)
    if len(masks) == 0 or len(reference) == 0:
        return aligned, matched
    ious = pairwise_iou(reference, masks)
    if len(reference) <= len(masks):
        cols, _ = solve_assignment(1.0 - ious)
        aligned[:] = values[cols]
        matched[cols] = True
    else:
        rows, _ = solve_assignment(1.0 - ious.T)
        aligned[rows] = values
        matched[:] = True
    return aligned, matched


def align_weights(candidates, w_hat, gt: ModeSet) -> tuple[np.ndarray, float]:
    """Move candidate weights onto gt modes via IoU matching.

    Each gt mode receives the weight of its matched candidate, or 0 when it
    has none.  The vector is not renormalised; the weight of unmatched
    candidates is returned as leaked mass.
    """
    w_hat = np.asarray(w_hat, dtype=np.float64)
    aligned, matched = align_to_reference(candidates, w_hat, gt.masks)
    return aligned, float(w_hat[~matched].sum())


@dataclass
class EvalReport:
    hm_iou: float
    hm_iou_star: float
    hm_iou_multi: float
    selection_f1: float
    mean_kept_proposals: float
    bss: Optional[float] = None
    per_item: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate_item(gt: ModeSet, ps: ProposalSet, kept: Optional[Sequence[int]] = None) -> dict:
    """Per-item record; ``kept`` restricts the proposals scored by the IoU metrics."""
    binary = ps.binary()
    if kept is not None:
        binary = binary[list(kept)] if len(kept) else np.zeros((0,) + binary.shape[1:], bool)
    tp, fp, fn = selection_counts(gt, ps)
    return {
        "hm_iou": hm_iou(gt, binary),
        "hm_iou_star": hm_iou_star(gt, binary),
        "hm_iou_multi": hm_iou_multi(gt, binary),
        "num_modes": len(gt),
        "kept": int(len(binary)),
        "tp": tp,
        "fp": fp,
        "fn": fn,
    }


def summarize(records: Sequence[dict], bss_value: Optional[float] = None) -> EvalReport:
    tp = sum(r["tp"] for r in records)
    fp = sum(r["fp"] for r in records)
    fn = sum(r["fn"] for r in records)

    def mean(key):
        return float(np.mean([r[key] for r in records])) if records else float("nan")

    return EvalReport(
        hm_iou=mean("hm_iou"),
        hm_iou_star=mean("hm_iou_star"),
        hm_iou_multi=mean("hm_iou_multi"),
        selection_f1=f1_from_counts(tp, fp, fn),
        mean_kept_proposals=mean("kept"),
        bss=bss_value,
        per_item=list(records),
    )


SUMMARY_COLUMNS = ("scenario", "filter_scores", "filter_duplicates", "selection_f1", "hm_iou_star", "proposals")


def summary_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()
