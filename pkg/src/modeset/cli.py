"""Command-line experiments: gen, train, eval, decompose and the full pipeline.

Every command reads one JSON experiment config and writes its artifacts into
an output directory.  Reports contain no timestamps, so reruns with the same
config produce byte-identical files.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .core import DatasetItem
from .filtering import FilterConfig, filter_proposals
from .flowdecomp import MixtureField, SolverError, estimate_weights
from .metrics import align_to_reference, align_weights, bss, evaluate_item, summarize, summary_csv
from .propnet import TrainConfig, TrainingError, forward_many, load_checkpoint, save_checkpoint, train, validation_split
from .structest import estimate_templates_pca, structure_aware_probs
from .synthgen import ClassFlipConfig, DatasetFormatError, DirectionalConfig, gen_classflip, gen_directional, load_dataset, save_dataset

log = logging.getLogger("modeset")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
STAGES = ("gen", "train", "eval", "decompose")

DATASET_FILE = "dataset.jsonl"
CHECKPOINT_FILE = "checkpoint.bin"
HISTORY_FILE = "history.json"
MANIFEST_FILE = "manifest.json"

EVAL_LABEL = "proposal filtering by selection score and de-duplication"
DECOMP_LABEL = "mode probabilities from the t=0 velocity of the exact mixture field"
TRAIN_LABEL = "proposal network training"


class ConfigError(ValueError):
    """Bad config or input; maps to exit code 2."""


class NumericalError(RuntimeError):
    """Unrecoverable numerical failure; maps to exit code 3."""


@dataclass
class DecompConfig:
    n_samples: int = 64
    candidates: str = "gt"  # "gt" or "proposals"
    use_filtered: bool = True
    use_dedup: bool = True
    templates: str = "gt"  # class-flip only: "gt" or "pca"

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if self.candidates not in ("gt", "proposals"):
            raise ValueError("candidates must be 'gt' or 'proposals'")
        if self.templates not in ("gt", "pca"):
            raise ValueError("templates must be 'gt' or 'pca'")


@dataclass
class ExperimentConfig:
    dataset: object  # DirectionalConfig, ClassFlipConfig or a Path to a dataset file
    train: TrainConfig
    filter: FilterConfig
    decomp: DecompConfig
    output_dir: Path
    seed: int = 0
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def config_hash(self) -> str:
        # where results are written is not part of the experiment
        body = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return hashlib.sha256(canonical_json(body).encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _build(cls, d: dict, what: str, **defaults):
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    args = {k: v for k, v in defaults.items() if k in known}
    args.update(d)
    for key in ("grid_size",):
        if key in args and isinstance(args[key], list):
            args[key] = tuple(args[key])
    for key in ("flip_probs", "prior_weights"):
        if isinstance(args.get(key), list):
            args[key] = tuple(args[key])
    try:
        return cls(**args)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from exc


def parse_config(raw: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    """Validate a config dict.  ``seed`` seeds both data generation and training unless they set their own."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    unknown = set(raw) - {"schema_version", "seed", "dataset", "train", "filter", "decomp", "output_dir"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")

    ds = dict(raw.get("dataset", {"kind": "directional"}))
    if "path" in ds:
        path = Path(ds["path"])
        dataset = path if path.is_absolute() else base_dir / path
    else:
        kind = ds.pop("kind", "directional")
        if kind == "directional":
            dataset = _build(DirectionalConfig, ds, "dataset", rng_seed=seed)
        elif kind == "classflip":
            dataset = _build(ClassFlipConfig, ds, "dataset", rng_seed=seed)
        else:
            raise ConfigError(f"unknown dataset kind {kind!r}")
    out = Path(raw.get("output_dir", "runs/default"))
    return ExperimentConfig(
        dataset=dataset,
        train=_build(TrainConfig, raw.get("train", {}), "train", rng_seed=seed),
        filter=_build(FilterConfig, raw.get("filter", {}), "filter"),
        decomp=_build(DecompConfig, raw.get("decomp", {}), "decomp"),
        output_dir=out if out.is_absolute() else base_dir / out,
        seed=seed,
        raw=raw,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    # relative paths are resolved against the working directory
    return parse_config(raw)


# ---------------------------------------------------------------------------
# file helpers


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def read_manifest(out: Path) -> dict:
    p = out / MANIFEST_FILE
    if not p.exists():
        return {}
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError:
        log.warning("ignoring unreadable manifest %s", p)
        return {}


def record_stage(cfg: ExperimentConfig, stage: str, files: Sequence[str]) -> None:
    out = cfg.output_dir
    manifest = read_manifest(out)
    if manifest.get("config_hash") != cfg.config_hash:
        manifest = {"stages": {}}
    manifest.update(schema_version=SCHEMA_VERSION, seed=cfg.seed, config_hash=cfg.config_hash)
    manifest.setdefault("stages", {})[stage] = {"files": {f: file_digest(out / f) for f in files}}
    write_json(out / MANIFEST_FILE, manifest)


def stage_is_current(cfg: ExperimentConfig, stage: str) -> bool:
    manifest = read_manifest(cfg.output_dir)
    if manifest.get("config_hash") != cfg.config_hash:
        return False
    entry = manifest.get("stages", {}).get(stage)
    if not entry:
        return False
    for name, digest in entry["files"].items():
        p = cfg.output_dir / name
        if not p.exists() or file_digest(p) != digest:
            return False
    return True


def dataset_path(cfg: ExperimentConfig) -> Path:
    return cfg.dataset if isinstance(cfg.dataset, Path) else cfg.output_dir / DATASET_FILE


def read_dataset(cfg: ExperimentConfig) -> list[DatasetItem]:
    path = dataset_path(cfg)
    if not path.exists():
        raise ConfigError(f"dataset not found: {path} (run 'gen' first)")
    try:
        return load_dataset(path)
    except DatasetFormatError as exc:
        raise ConfigError(str(exc)) from exc


def read_checkpoint(path: Path):
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path} (run 'train' first)")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc


def pool_map(fn: Callable, items: Sequence, jobs: int) -> list:
    """Ordered map over a thread pool (results in input order)."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: ExperimentConfig, jobs: int = 1) -> Path:
    if isinstance(cfg.dataset, Path):
        raise ConfigError("config points at an existing dataset file; nothing to generate")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(cfg.dataset, DirectionalConfig):
        items = gen_directional(cfg.dataset)
    else:
        items = gen_classflip(cfg.dataset)
    if not items:
        log.warning("num_items is 0; writing an empty dataset")
    path = cfg.output_dir / DATASET_FILE
    save_dataset(items, path)
    record_stage(cfg, "gen", [DATASET_FILE])
    log.info("wrote %d items to %s", len(items), path)
    return path


def cmd_train(cfg: ExperimentConfig, jobs: int = 1) -> Path:
    items = read_dataset(cfg)
    if not items:
        raise ConfigError("cannot train on an empty dataset")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    try:
        params, history = train(items, cfg.train)
    except TrainingError as exc:
        raise NumericalError(str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    path = cfg.output_dir / CHECKPOINT_FILE
    save_checkpoint(path, params, cfg.train, meta={"config_hash": cfg.config_hash})
    best = min(history, key=lambda r: r["val_loss"]) if history else None
    write_json(cfg.output_dir / HISTORY_FILE, {"label": TRAIN_LABEL, "best_epoch": best["epoch"] if best else 0, "epochs": history})
    record_stage(cfg, "train", [CHECKPOINT_FILE, HISTORY_FILE])
    if best:
        log.info("best epoch %d: val loss %.5f, val HM IoU* %s", best["epoch"], best["val_loss"], best["val_hm_iou_star"])
    return path


FILTER_GRID = ((False, False), (True, False), (False, True), (True, True))


def _eval_items(cfg: ExperimentConfig, items: list[DatasetItem]) -> tuple[list[int], list[DatasetItem]]:
    _, val_idx = validation_split(len(items), cfg.train)
    return val_idx.tolist(), [items[i] for i in val_idx]


def _model_proposals(cfg: ExperimentConfig, items, checkpoint: Optional[Path] = None):
    params, _, _ = read_checkpoint(checkpoint or cfg.output_dir / CHECKPOINT_FILE)
    if items and (tuple(items[0].input.shape) != _expected_input_shape(params) or tuple(items[0].shape) != tuple(params.mask_shape)):
        raise ConfigError(
            f"checkpoint expects masks {tuple(params.mask_shape)} and {params.in_dim} input features, "
            f"dataset has masks {items[0].shape} and input {items[0].input.shape}"
        )
    return forward_many(params, [it.input for it in items])


def _expected_input_shape(params):
    channels = params.in_dim // int(np.prod(params.mask_shape))
    return (channels,) + tuple(params.mask_shape)


def cmd_eval(cfg: ExperimentConfig, jobs: int = 1, checkpoint: Optional[Path] = None) -> dict:
    """Metrics on held-out items for every combination of the two filters."""
    items = read_dataset(cfg)
    idx, val = _eval_items(cfg, items)
    proposals = _model_proposals(cfg, val, checkpoint)
    rows, reports = [], {}
    for use_scores, use_dedup in FILTER_GRID:
        fcfg = FilterConfig(cfg.filter.score_threshold, cfg.filter.dedup_iou, use_scores, use_dedup)

        def one(pair):
            it, ps = pair
            kept, _ = filter_proposals(ps, fcfg)
            return evaluate_item(it.modes, ps, kept)

        records = pool_map(one, list(zip(val, proposals)), jobs)
        for i, r in zip(idx, records):
            r["item"] = i
        report = summarize(records)
        key = f"scores={'on' if use_scores else 'off'},dedup={'on' if use_dedup else 'off'}"
        reports[key] = report.to_dict()
        rows.append(
            {
                "scenario": cfg.train.scenario,
                "filter_scores": use_scores,
                "filter_duplicates": use_dedup,
                "selection_f1": report.selection_f1,
                "hm_iou_star": report.hm_iou_star,
                "proposals": report.mean_kept_proposals,
            }
        )
    result = {
        "label": EVAL_LABEL,
        "scenario": cfg.train.scenario,
        "num_items": len(val),
        "mean_true_modes": float(np.mean([len(it.modes) for it in val])) if val else float("nan"),
        "summary": rows,
        "reports": reports,
    }
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    write_json(cfg.output_dir / "eval.json", result)
    (cfg.output_dir / "eval.csv").write_text(summary_csv(rows))
    record_stage(cfg, "eval", ["eval.json", "eval.csv"])
    return result


DECOMP_COLUMNS = ("item", "status", "num_candidates", "bss", "leaked_mass", "residual", "condition", "ill_conditioned", "iterations", "flip_bss")


def decompose_item(item: DatasetItem, candidates: np.ndarray, n: int, rng: np.random.Generator, templates: str = "gt") -> dict:
    """Estimate candidate weights against the item's exact mixture field and score them."""
    rec = {"num_candidates": int(len(candidates))}
    if len(candidates) == 0:
        rec.update(status="no_candidates", bss=None)
        return rec
    try:
        est = estimate_weights(MixtureField(item.modes), candidates, n=n, rng=rng)
    except SolverError as exc:
        rec.update(status="solver_failed", error=str(exc), bss=None)
        return rec
    aligned, leaked = align_weights(candidates, est.weights, item.modes)
    rec.update(
        status="ok",
        weights=est.weights.tolist(),
        aligned=aligned.tolist(),
        bss=bss(aligned, item.modes.weights),
        leaked_mass=leaked,
        residual=est.residual,
        condition=est.condition if np.isfinite(est.condition) else None,
        ill_conditioned=est.ill_conditioned,
        iterations=est.iterations,
    )
    if item.flip is not None:
        if templates == "gt":
            tmpl = item.flip.templates
        else:
            tmpl = estimate_templates_pca(candidates, len(item.flip.flip_probs))
        p_hat, _ = structure_aware_probs(candidates, est.weights, tmpl)
        # estimated templates come in arbitrary order; score them against the matching true class
        p_hat, _ = align_to_reference(tmpl, p_hat, item.flip.templates)
        rec.update(flip_probs=p_hat.tolist(), flip_bss=bss(p_hat, item.flip.flip_probs))
    return rec


def cmd_decompose(cfg: ExperimentConfig, jobs: int = 1, checkpoint: Optional[Path] = None) -> dict:
    items = read_dataset(cfg)
    dc = cfg.decomp
    if dc.candidates == "gt":
        idx = list(range(len(items)))
        cand_sets = [it.modes.masks for it in items]
    else:
        idx, sel = _eval_items(cfg, items)
        items = sel
        fcfg = FilterConfig(cfg.filter.score_threshold, cfg.filter.dedup_iou, dc.use_filtered, dc.use_dedup)
        cand_sets = [filter_proposals(ps, fcfg)[1] for ps in _model_proposals(cfg, items, checkpoint)]

    def one(k):
        rng = np.random.default_rng([cfg.seed, idx[k]])
        try:
            rec = decompose_item(items[k], cand_sets[k], dc.n_samples, rng, dc.templates)
        except ValueError as exc:
            rec = {"status": "failed", "error": str(exc), "bss": None, "num_candidates": int(len(cand_sets[k]))}
        rec["item"] = idx[k]
        return rec

    records = pool_map(one, list(range(len(items))), jobs)
    ok = [r for r in records if r["status"] == "ok"]
    flagged = len(records) - len(ok)
    ill = sum(bool(r.get("ill_conditioned")) for r in ok)
    if flagged:
        log.warning("%d of %d items excluded from the mean (no estimate)", flagged, len(records))
    if ill:
        log.warning("%d items have an ill-conditioned decomposition (condition > 1e8)", ill)
    flip = [r["flip_bss"] for r in ok if "flip_bss" in r]
    result = {
        "label": DECOMP_LABEL,
        "candidates": dc.candidates,
        "filters": {"scores": dc.use_filtered, "dedup": dc.use_dedup} if dc.candidates == "proposals" else None,
        "n_samples": dc.n_samples,
        "num_items": len(records),
        "num_excluded": flagged,
        "num_ill_conditioned": ill,
        "mean_bss": float(np.mean([r["bss"] for r in ok])) if ok else None,
        "mean_leaked_mass": float(np.mean([r["leaked_mass"] for r in ok])) if ok else None,
        "mean_flip_bss": float(np.mean(flip)) if flip else None,
        "items": records,
    }
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    write_json(cfg.output_dir / "decomp.json", result)
    (cfg.output_dir / "decomp.csv").write_text(_decomp_csv(records))
    record_stage(cfg, "decompose", ["decomp.json", "decomp.csv"])
    return result


def _decomp_csv(records) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=DECOMP_COLUMNS, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in records:
        w.writerow(r)
    return buf.getvalue()


STAGE_FUNCS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "decompose": cmd_decompose}


def cmd_pipeline(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    """gen, train, eval, decompose; stages recorded as current in the manifest are skipped."""
    stages = list(STAGES)
    if isinstance(cfg.dataset, Path):
        stages.remove("gen")
    ran = []
    for stage in stages:
        if stage_is_current(cfg, stage) and not ran:
            log.info("stage %s is up to date, skipping", stage)
            continue
        log.info("running stage %s", stage)
        STAGE_FUNCS[stage](cfg, jobs)
        ran.append(stage)
    return {"ran": ran, "manifest": read_manifest(cfg.output_dir)}


# ---------------------------------------------------------------------------
# entry point


def _setup_logging() -> None:
    level = os.environ.get("LOG_LEVEL", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modeset", description="Mode-proposal experiments on synthetic ambiguous segmentation data.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen", "train", "eval", "decompose", "pipeline"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="experiment config (JSON)")
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker threads for per-item work")
        p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        if name in ("eval", "decompose"):
            p.add_argument("--checkpoint", type=Path, help="checkpoint file (default: <out>/checkpoint.bin)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.out is not None:
            cfg.output_dir = args.out
        if args.jobs < 1:
            raise ConfigError("--jobs must be positive")
        if args.command == "pipeline":
            cmd_pipeline(cfg, args.jobs)
        elif args.command in ("eval", "decompose"):
            STAGE_FUNCS[args.command](cfg, args.jobs, checkpoint=args.checkpoint)
        else:
            STAGE_FUNCS[args.command](cfg, args.jobs)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
