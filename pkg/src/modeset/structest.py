"""Structure-aware probability estimation for class-flip mode families.

When modes are unions of disjoint class templates switched on by independent
Bernoulli flips, mode weights factor into per-class terms.  Plain weight
estimation is then under-determined, but the per-class flip probabilities
are not: they are recovered here from any weight estimate and the flip
pattern of each candidate.
"""
from __future__ import annotations

from typing import Sequence, Union

import numpy as np

from .core import as_binary_mask


def mode_prob(alpha_row, p) -> float:
    """Probability of the mode with flip pattern ``alpha_row`` under flip probs ``p``."""
    a = np.asarray(alpha_row, dtype=np.int64).reshape(-1)
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if a.shape != p.shape:
        raise ValueError("alpha_row and p must have the same length")
    return float(np.prod(np.where(a == 1, p, 1.0 - p)))


def flip_nll(p, w_hat, alpha) -> float:
    """Weighted negative log-likelihood of flip probs ``p`` given mode weights."""
    p = np.asarray(p, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.int64)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ll = np.where(alpha == 1, np.log(p), np.log1p(-p))
        terms = np.where(w_hat[:, None] > 0, w_hat[:, None] * ll, 0.0)
    return float(-terms.sum())


def estimate_flip_probs(w_hat, alpha) -> np.ndarray:
    """Flip probabilities minimising the weighted Bernoulli negative log-likelihood.

    The objective separates by class and each term is minimised by the
    weighted frequency with which that class is switched on.
    """
    w_hat = np.asarray(w_hat, dtype=np.float64).reshape(-1)
    alpha = np.asarray(alpha, dtype=np.int64)
    if alpha.ndim != 2 or alpha.shape[0] != len(w_hat):
        raise ValueError("alpha must have one row per weight")
    if np.any(w_hat < 0):
        raise ValueError("weights must be non-negative")
    total = w_hat.sum()
    if total <= 0:
        raise ValueError("weights must have positive mass")
    return np.clip(w_hat @ alpha / total, 0.0, 1.0)


def estimate_alphas(proposal, template, threshold: float = 0.5) -> int:
    """1 when more than ``threshold`` of the template's pixels are on in the proposal."""
    proposal = as_binary_mask(proposal)
    template = as_binary_mask(template)
    if proposal.shape != template.shape:
        raise ValueError(f"mask shapes differ: {proposal.shape} vs {template.shape}")
    area = np.count_nonzero(template)
    if area == 0:
        raise ValueError("template is empty")
    return int(np.count_nonzero(proposal & template) / area > threshold)


def alpha_matrix(proposals, templates, threshold: float = 0.5) -> np.ndarray:
    """Estimated flip pattern (N, C) of every proposal against every template."""
    return np.array(
        [[estimate_alphas(p, t, threshold) for t in templates] for p in proposals],
        dtype=np.int64,
    ).reshape(len(proposals), len(templates))


def otsu_threshold(values, nbins: int = 256) -> float:
    """Threshold maximising between-class variance of a histogram over the value range.

    Values strictly above the threshold form the upper class.  When several
    adjacent splits tie (empty bins between clusters) the midpoint of the
    tied range is returned.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    lo, hi = float(v.min()), float(v.max())
    if not hi > lo:
        raise ValueError("otsu threshold needs at least two distinct values")
    counts, edges = np.histogram(v, bins=nbins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(counts)[:-1].astype(np.float64)
    w1 = v.size - w0
    s0 = np.cumsum(counts * centers)[:-1]
    s1 = (counts * centers).sum() - s0
    valid = (w0 > 0) & (w1 > 0)
    between = np.zeros_like(w0)
    between[valid] = w0[valid] * w1[valid] * (s0[valid] / w0[valid] - s1[valid] / w1[valid]) ** 2
    best = between.max()
    tied = np.flatnonzero(valid & (between >= best * (1 - 1e-12)))
    # split k separates bins [0..k] from [k+1..]; its cut sits at edges[k+1]
    return float(0.5 * (edges[tied[0] + 1] + edges[tied[-1] + 1]))


ThresholdMode = Union[str, Sequence[float]]


def principal_components(vectors: np.ndarray, k: int) -> np.ndarray:
    """Top-``k`` unit principal directions (k, D) via the small Gram matrix."""
    x = np.asarray(vectors, dtype=np.float64)
    x = x - x.mean(0)
    gram = x @ x.T
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1][:k]
    scale = float(evals.max()) if evals.size else 0.0
    if scale <= 1e-12:
        raise ValueError("proposals are all identical; covariance is degenerate")
    comps = []
    for idx in order:
        lam = evals[idx]
        if lam <= 1e-12 * scale:
            comps.append(np.zeros(x.shape[1]))
        else:
            comps.append(x.T @ evecs[:, idx] / np.sqrt(lam))
    return np.array(comps)


def estimate_templates_pca(proposals, num_classes: int, threshold_mode: ThresholdMode = "otsu") -> np.ndarray:
    """Class templates recovered from a set of flip proposals.

    Each of the top principal components is taken in absolute value and
    thresholded (Otsu, or one manual threshold per component).  Pixels on
    in several thresholded components go to the component with the largest
    absolute loading, so the returned templates are disjoint.
    """
    props = as_binary_mask(proposals)
    if len(props) < num_classes + 1:
        raise ValueError(f"need at least {num_classes + 1} proposals, got {len(props)}")
    shape = props.shape[1:]
    comps = np.abs(principal_components(props.reshape(len(props), -1), num_classes))
    if isinstance(threshold_mode, str):
        if threshold_mode != "otsu":
            raise ValueError(f"unknown threshold mode {threshold_mode!r}")
        thresholds = [otsu_threshold(c) if c.max() > c.min() else np.inf for c in comps]
    else:
        thresholds = [float(t) for t in threshold_mode]
        if len(thresholds) != num_classes:
            raise ValueError("manual thresholds need one value per component")
    on = np.array([c > t for c, t in zip(comps, thresholds)])
    owner = np.argmax(np.where(on, comps, -np.inf), axis=0)
    templates = np.zeros((num_classes, comps.shape[1]), dtype=bool)
    covered = on.any(0)
    templates[owner[covered], np.flatnonzero(covered)] = True
    return templates.reshape((num_classes,) + shape)


def structure_aware_probs(candidates, w_hat, templates, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Flip probabilities from weights over candidates and (estimated) templates.

    Empty templates cannot be tested for overlap; their class is reported
    with probability 0 and its alpha column is all zeros.
    """
    templates = as_binary_mask(templates)
    nonempty = templates.reshape(len(templates), -1).any(1)
    alpha = np.zeros((len(candidates), len(templates)), dtype=np.int64)
    if nonempty.any():
        alpha[:, nonempty] = alpha_matrix(candidates, templates[nonempty], threshold)
    return estimate_flip_probs(w_hat, alpha), alpha
