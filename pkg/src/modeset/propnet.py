"""Deterministic mode-proposal network: forward pass, set losses and training.

The network is a small dense model.  A shared trunk maps the flattened input
to features; ``K`` independent dense heads each emit one soft mask, and a
selection head emits one score per proposal.  Training matches ground-truth
modes to proposals (Hungarian matching on the mask loss, treated as a
constant) and adds a selection loss: plain BCE when every mode is labelled,
or a non-negative positive-unlabelled risk when only one sampled mode is.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .core import DatasetItem, ProposalSet, as_binary_mask
from .matching import DISTANCE_KINDS, PROB_CLAMP, distance, pairwise_distance, solve_assignment
from .metrics import hm_iou_star
from .synthgen import sample_single_label

log = logging.getLogger(__name__)

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"MSCKPT"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass
class TrainConfig:
    scenario: str = "full"  # "full" or "single"
    loss_kind: str = "dice_focal"
    lam: float = 1e-2
    eta_p: float = 0.5
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    num_proposals: int = 16
    rng_seed: int = 0
    hidden: int = 256
    selection_hidden: int = 64
    val_fraction: float = 0.2
    track_hm_iou: bool = True

    def __post_init__(self):
        if self.scenario not in ("full", "single"):
            raise ValueError(f"scenario must be 'full' or 'single', got {self.scenario!r}")
        if self.loss_kind not in DISTANCE_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if not 0.0 <= self.eta_p < 1.0:
            raise ValueError("eta_p must lie in [0, 1)")
        if self.learning_rate <= 0 or self.epochs < 0 or self.batch_size < 1 or self.num_proposals < 1:
            raise ValueError("learning_rate, batch_size and num_proposals must be positive, epochs non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


PARAM_NAMES = ("w1", "b1", "w2", "b2", "head_w", "head_b", "sel_w1", "sel_b1", "sel_w2", "sel_b2")
SELECTION_PARAMS = ("sel_w1", "sel_b1", "sel_w2", "sel_b2")


@dataclass
class ModelParams:
    """All network tensors.  ``head_w`` is (hidden, K, H*W) so the heads run as one matmul."""

    w1: torch.Tensor
    b1: torch.Tensor
    w2: torch.Tensor
    b2: torch.Tensor
    head_w: torch.Tensor
    head_b: torch.Tensor
    sel_w1: torch.Tensor
    sel_b1: torch.Tensor
    sel_w2: torch.Tensor
    sel_b2: torch.Tensor
    mask_shape: tuple

    @property
    def num_proposals(self) -> int:
        return self.head_w.shape[1]

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    def tensors(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def clone(self, requires_grad: bool = False) -> "ModelParams":
        ts = {k: v.detach().clone().requires_grad_(requires_grad) for k, v in self.tensors().items()}
        return ModelParams(**ts, mask_shape=tuple(self.mask_shape))

    def permute_heads(self, order: Sequence[int]) -> "ModelParams":
        """Same network with proposal heads (and their score outputs) reordered."""
        order = list(order)
        p = self.clone()
        p.head_w = p.head_w[:, order].contiguous()
        p.head_b = p.head_b[order].contiguous()
        p.sel_w2 = p.sel_w2[:, order].contiguous()
        p.sel_b2 = p.sel_b2[order].contiguous()
        return p

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in self.tensors().values())


def init_params(
    in_dim: int,
    mask_shape,
    num_proposals: int,
    rng: np.random.Generator,
    hidden: int = 256,
    selection_hidden: int = 64,
) -> ModelParams:
    """Uniform fan-in initialisation; heads share one draw scaled by U(0.975, 1.025) per weight."""
    hw = int(np.prod(mask_shape))

    def unif(fan_in, shape):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    w1, b1 = unif(in_dim, (in_dim, hidden)), unif(in_dim, hidden)
    w2, b2 = unif(hidden, (hidden, hidden)), unif(hidden, hidden)
    base_w, base_b = unif(hidden, (hidden, 1, hw)), unif(hidden, (1, hw))
    head_w = base_w * rng.uniform(0.975, 1.025, size=(hidden, num_proposals, hw))
    head_b = base_b * rng.uniform(0.975, 1.025, size=(num_proposals, hw))
    s1, sb1 = unif(hidden, (hidden, selection_hidden)), unif(hidden, selection_hidden)
    s2, sb2 = unif(selection_hidden, (selection_hidden, num_proposals)), unif(selection_hidden, num_proposals)
    arrays = dict(w1=w1, b1=b1, w2=w2, b2=b2, head_w=head_w, head_b=head_b, sel_w1=s1, sel_b1=sb1, sel_w2=s2, sel_b2=sb2)
    return ModelParams(**{k: torch.tensor(v, dtype=DTYPE) for k, v in arrays.items()}, mask_shape=tuple(int(s) for s in mask_shape))


def zero_params(in_dim, mask_shape, num_proposals, hidden=256, selection_hidden=64) -> ModelParams:
    p = init_params(in_dim, mask_shape, num_proposals, np.random.default_rng(0), hidden, selection_hidden)
    return ModelParams(**{k: torch.zeros_like(v) for k, v in p.tensors().items()}, mask_shape=p.mask_shape)


def forward_batch(params: ModelParams, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Proposals (B, K, H*W) and scores (B, K) for flattened inputs ``x`` (B, in_dim)."""
    if x.shape[-1] != params.in_dim:
        raise ValueError(f"input has {x.shape[-1]} features, network expects {params.in_dim}")
    h = torch.relu(x @ params.w1 + params.b1)
    h = torch.relu(h @ params.w2 + params.b2)
    k, hw = params.head_b.shape
    logits = (h @ params.head_w.reshape(h.shape[-1], k * hw)).reshape(-1, k, hw) + params.head_b
    s = torch.relu(h @ params.sel_w1 + params.sel_b1)
    scores = torch.sigmoid(s @ params.sel_w2 + params.sel_b2)
    return torch.sigmoid(logits), scores


def _inputs(xs) -> torch.Tensor:
    arr = np.stack([np.asarray(x, dtype=np.float64).reshape(-1) for x in xs])
    return torch.as_tensor(arr, dtype=DTYPE)


def forward(params: ModelParams, x) -> ProposalSet:
    """Run one input (C, H, W) through the network."""
    with torch.no_grad():
        props, scores = forward_batch(params, _inputs([x]))
    k = params.num_proposals
    return ProposalSet(props[0].numpy().reshape((k,) + tuple(params.mask_shape)), scores[0].numpy())


def forward_many(params: ModelParams, xs, batch_size: int = 256) -> list[ProposalSet]:
    out = []
    k = params.num_proposals
    for start in range(0, len(xs), batch_size):
        with torch.no_grad():
            props, scores = forward_batch(params, _inputs(xs[start : start + batch_size]))
        for p, s in zip(props.numpy(), scores.numpy()):
            out.append(ProposalSet(p.reshape((k,) + tuple(params.mask_shape)), s))
    return out


# ---------------------------------------------------------------------------
# losses


def bce(target: float, d: torch.Tensor) -> torch.Tensor:
    d = d.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -torch.log(d) if target == 1 else -torch.log1p(-d)


def _bce_targets(targets: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    d = d.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(targets * torch.log(d) + (1.0 - targets) * torch.log1p(-d))


def _flat_gt(masks) -> torch.Tensor:
    m = as_binary_mask(masks)
    return torch.tensor(m.reshape(len(m), -1), dtype=DTYPE)


def match_full(props: torch.Tensor, gt: torch.Tensor, kind: str) -> np.ndarray:
    with torch.no_grad():
        cost = pairwise_distance(kind, gt, props).numpy()
    return solve_assignment(cost)[0]


def fully_labeled_loss(props: torch.Tensor, scores: torch.Tensor, gt: torch.Tensor, kind: str, lam: float):
    """Matched mask loss plus BCE selection loss for one item.

    ``props`` (K, D), ``scores`` (K,), ``gt`` (Kx, D).  Returns
    ``(total, mask_part, select_part)`` as scalar tensors.
    """
    k, kx = props.shape[0], gt.shape[0]
    if kx > k:
        raise ValueError(f"{kx} modes but only {k} proposals")
    assignment = torch.as_tensor(match_full(props, gt, kind))
    mask_part = distance(kind, gt, props[assignment]).mean()
    targets = torch.zeros(k, dtype=props.dtype)
    targets[assignment] = 1.0
    select_part = _bce_targets(targets, scores).sum() / k
    return mask_part + lam * select_part, mask_part, select_part


def _batch_full_loss(props, scores, gts: Sequence[torch.Tensor], kind, lam):
    """Mean of per-item fully-labelled losses; matchings computed for the whole batch."""
    b, k, _ = props.shape
    with torch.no_grad():
        kmax = max(len(g) for g in gts)
        padded = torch.zeros((b, kmax, props.shape[-1]), dtype=props.dtype)
        for i, g in enumerate(gts):
            padded[i, : len(g)] = g
        costs = pairwise_distance(kind, padded, props).numpy()
    item_idx, prop_idx, counts = [], [], []
    targets = torch.zeros((b, k), dtype=props.dtype)
    for i, g in enumerate(gts):
        if len(g) > k:
            raise ValueError(f"{len(g)} modes but only {k} proposals")
        cols, _ = solve_assignment(costs[i, : len(g)])
        item_idx.extend([i] * len(g))
        prop_idx.extend(cols.tolist())
        counts.append(len(g))
        targets[i, cols] = 1.0
    all_gt = torch.cat(list(gts))
    per_pair = distance(kind, all_gt, props[item_idx, prop_idx])
    counts_t = torch.as_tensor(counts, dtype=props.dtype)
    per_item_mask = torch.zeros(b, dtype=props.dtype).index_add(0, torch.as_tensor(item_idx), per_pair) / counts_t
    per_item_sel = _bce_targets(targets, scores).sum(1) / k
    mask_part = per_item_mask.mean()
    select_part = per_item_sel.mean()
    return mask_part + lam * select_part, mask_part, select_part


def pu_loss(props: torch.Tensor, scores: torch.Tensor, labels: torch.Tensor, kind: str, lam: float, eta_p: float):
    """Single-label loss over a batch with a non-negative PU selection term.

    ``props`` (B, K, D), ``scores`` (B, K), ``labels`` (B, D).  The proposal
    closest to each label is the positive; every other proposal is
    unlabelled.  Returns ``(total, mask_part, select_part)``.
    """
    b, k, _ = props.shape
    if k < 2:
        raise ValueError("the PU selection loss needs at least two proposals")
    with torch.no_grad():
        best = torch.argmin(distance(kind, labels[:, None, :], props), dim=1)
    rows = torch.arange(b)
    mask_part = distance(kind, labels, props[rows, best]).mean()
    d_pos = scores[rows, best]
    lp1 = bce(1, d_pos).mean()
    lp0 = bce(0, d_pos).mean()
    unlabeled = torch.ones((b, k), dtype=torch.bool)
    unlabeled[rows, best] = False
    lu = bce(0, scores[unlabeled]).sum() / (b * (k - 1))
    select_part = eta_p * lp1 + torch.clamp(lu - eta_p * lp0, min=0.0)
    return mask_part + lam * select_part, mask_part, select_part


def loss_fully(params: ModelParams, item: DatasetItem, cfg: TrainConfig):
    props, scores = forward_batch(params, _inputs([item.input]))
    return fully_labeled_loss(props[0], scores[0], _flat_gt(item.modes.masks), cfg.loss_kind, cfg.lam)


def loss_single_pu(params: ModelParams, batch: Sequence[tuple], cfg: TrainConfig):
    """PU loss for ``batch`` of ``(input, label_mask)`` pairs."""
    if not batch:
        raise ValueError("batch is empty")
    props, scores = forward_batch(params, _inputs([x for x, _ in batch]))
    labels = _flat_gt(np.stack([as_binary_mask(y) for _, y in batch]))
    return pu_loss(props, scores, labels, cfg.loss_kind, cfg.lam, cfg.eta_p)


def gradient(params, loss_closure: Callable) -> dict[str, torch.Tensor]:
    """Reverse-mode gradient of ``loss_closure(params)`` for every parameter tensor.

    ``params`` is a ModelParams or a dict of tensors.  Parameters the loss
    does not touch get zero gradients.
    """
    if isinstance(params, ModelParams):
        live = params.clone(requires_grad=True)
        named = live.tensors()
    else:
        named = {k: torch.as_tensor(v, dtype=DTYPE).detach().clone().requires_grad_(True) for k, v in params.items()}
        live = named
    loss = loss_closure(live)
    grads = torch.autograd.grad(loss, list(named.values()), allow_unused=True)
    return {k: torch.zeros_like(v) if g is None else g for (k, v), g in zip(named.items(), grads)}


# ---------------------------------------------------------------------------
# training


def split_indices(n: int, val_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_val = int(round(val_fraction * n))
    if n - n_val < 1:
        n_val = n - 1
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def validation_split(n: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Train/validation indices fixed by ``cfg.rng_seed`` alone; tiny datasets validate on the training items."""
    train_idx, val_idx = split_indices(n, cfg.val_fraction, np.random.default_rng([cfg.rng_seed, 0x5EED]))
    return train_idx, (val_idx if len(val_idx) else train_idx)


def _evaluate(params, items, labels, cfg) -> tuple[float, Optional[float]]:
    """Validation loss (and HM IoU* if tracked) in fixed index order."""
    total, weight = 0.0, 0
    hm = []
    with torch.no_grad():
        for start in range(0, len(items), 256):
            chunk = items[start : start + 256]
            x = _inputs([it.input for it in chunk])
            props, scores = forward_batch(params, x)
            if cfg.scenario == "full":
                loss, _, _ = _batch_full_loss(props, scores, [_flat_gt(it.modes.masks) for it in chunk], cfg.loss_kind, cfg.lam)
            else:
                y = _flat_gt(np.stack(labels[start : start + 256]))
                loss, _, _ = pu_loss(props, scores, y, cfg.loss_kind, cfg.lam, cfg.eta_p)
            total += float(loss) * len(chunk)
            weight += len(chunk)
            if cfg.track_hm_iou:
                binary = (props >= 0.5).numpy().reshape((len(chunk), params.num_proposals) + tuple(params.mask_shape))
                hm.extend(hm_iou_star(it.modes, b) for it, b in zip(chunk, binary))
    return total / weight, (float(np.mean(hm)) if hm else None)


def train(dataset: Sequence[DatasetItem], cfg: TrainConfig, rng: Optional[np.random.Generator] = None):
    """Minibatch Adam training; returns the parameters with the best validation loss.

    A ``val_fraction`` share of items is held out (see ``validation_split``).  In the single-label
    scenario each training item gets a freshly sampled mode every epoch,
    while validation items keep one label drawn up front.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    shape = dataset[0].shape
    in_shape = dataset[0].input.shape
    if any(it.shape != shape or it.input.shape != in_shape for it in dataset):
        raise ValueError("all items must share input and mask dimensions")
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    params = init_params(int(np.prod(in_shape)), shape, cfg.num_proposals, rng, cfg.hidden, cfg.selection_hidden)
    train_idx, val_idx = validation_split(len(dataset), cfg)
    val_items = [dataset[i] for i in val_idx]
    val_labels = [sample_single_label(it, rng).reshape(-1) for it in val_items] if cfg.scenario == "single" else None

    live = params.clone(requires_grad=True)
    opt = torch.optim.Adam(list(live.tensors().values()), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    best = params.clone()
    best_val, best_epoch = math.inf, 0
    history = []
    x_all = _inputs([it.input for it in dataset])
    gt_all = [_flat_gt(it.modes.masks) for it in dataset]

    for epoch in range(1, cfg.epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        sums = np.zeros(3)
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            props, scores = forward_batch(live, x_all[idx])
            if not (torch.isfinite(props).all() and torch.isfinite(scores).all()):
                raise TrainingError(f"non-finite network output at epoch {epoch}, batch starting {start}")
            if cfg.scenario == "full":
                total, mask_part, select_part = _batch_full_loss(props, scores, [gt_all[i] for i in idx], cfg.loss_kind, cfg.lam)
            else:
                labels = _flat_gt(np.stack([sample_single_label(dataset[i], rng) for i in idx]))
                total, mask_part, select_part = pu_loss(props, scores, labels, cfg.loss_kind, cfg.lam, cfg.eta_p)
            if not torch.isfinite(total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}: mask={float(mask_part)}, select={float(select_part)}")
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += len(idx) * np.array([float(total.detach()), float(mask_part.detach()), float(select_part.detach())])
        val_loss, val_hm = _evaluate(live, val_items, val_labels, cfg)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        rec = dict(zip(("loss", "mask", "select"), (sums / len(order)).tolist()))
        rec.update(epoch=epoch, val_loss=val_loss, val_hm_iou_star=val_hm)
        history.append(rec)
        log.debug("epoch %d loss %.5f val %.5f hm* %s", epoch, rec["loss"], val_loss, val_hm)
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best = live.clone()
    if cfg.epochs:
        log.info("best validation loss %.5f at epoch %d", best_val, best_epoch)
    return best, history


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, cfg: Optional[TrainConfig] = None, meta: Optional[dict] = None) -> None:
    """Write a versioned binary checkpoint: magic, header JSON, raw little-endian float64 tensors."""
    tensors = params.tensors()
    header = {
        "version": CHECKPOINT_VERSION,
        "mask_shape": list(params.mask_shape),
        "tensors": [[name, list(t.shape)] for name, t in tensors.items()],
        "train_config": asdict(cfg) if cfg is not None else None,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for t in tensors.values():
            fh.write(t.detach().numpy().astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, Optional[TrainConfig], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<IQ", data, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off += struct.calcsize("<IQ")
    header = json.loads(data[off : off + hlen])
    off += hlen
    ts = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
        ts[name] = torch.tensor(arr.astype(np.float64), dtype=DTYPE)
        off += 8 * n
    if off != len(data):
        raise ValueError("checkpoint has trailing bytes")
    cfg = TrainConfig(**header["train_config"]) if header["train_config"] else None
    return ModelParams(**ts, mask_shape=tuple(header["mask_shape"])), cfg, header["meta"]
