"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL verdict that is printed in the pytest
terminal summary (see conftest.py).  Run just this file with
``pytest tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
"""
import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from modeset import cli
from modeset.core import ModeSet, ProposalSet, iou, merge_duplicates
from modeset.filtering import FilterConfig, filter_proposals
from modeset.flowdecomp import MixtureField, decomposition_system, estimate_weights, mixture_velocity, velocity_at_zero
from modeset.matching import solve_assignment
from modeset.metrics import (
    align_to_reference, align_weights, bss, hm_iou, hm_iou_multi, hm_iou_star, selection_f1,
)
from modeset.propnet import TrainConfig, forward_many, loss_fully, loss_single_pu, train, validation_split
from modeset.structest import estimate_flip_probs, estimate_templates_pca, structure_aware_probs
from modeset.synthgen import ClassFlipConfig, DirectionalConfig, gen_classflip, gen_directional

sys.path.insert(0, str(Path(__file__).parent))
from oracles import brute_assignment, brute_matched_mean, simplex_grid  # noqa: E402
from test_propnet import _fd_check, small_item, small_params  # noqa: E402

RESULTS: list[str] = []


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. assignment oracle


def test_01_assignment_matches_exhaustive_enumeration():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        rows = int(rng.integers(1, 5))
        cols = int(rng.integers(rows, 7))
        c = rng.random((rows, cols))
        if rng.random() < 0.3:
            c = np.round(c * 3)  # exercise ties
        best, _ = brute_assignment(c)
        _, total = solve_assignment(c)
        mismatches += total != best
    elapsed = time.perf_counter() - start
    verdict(1, mismatches == 0 and elapsed < 10, f"{mismatches} mismatches in 1000 matrices, {elapsed:.2f}s (< 10s)")


# ---------------------------------------------------------------------------
# 2. gradient check


def test_02_gradients_match_central_differences():
    start = time.perf_counter()
    worst = 0.0
    kinds = ("one_minus_iou", "mse", "dice", "dice_focal")
    for i in range(10):
        params = small_params(1000 + i, k=3, hidden=6, sel=3)
        item = small_item(1000 + i)
        kind = kinds[i % 4]
        cfg = TrainConfig(loss_kind=kind, lam=0.5)
        worst = max(worst, _fd_check(params, lambda q: loss_fully(q, item, cfg)[0]))
        batch = [(item.input, item.modes.masks[0]), (small_item(2000 + i).input, item.modes.masks[1])]
        pcfg = TrainConfig(scenario="single", loss_kind=kind, lam=0.5)
        worst = max(worst, _fd_check(params, lambda q: loss_single_pu(q, batch, pcfg)[0]))
    elapsed = time.perf_counter() - start
    verdict(2, worst <= 1e-3 and elapsed < 30, f"max relative error {worst:.2e} (<= 1e-3) over 10 instances x 2 losses, {elapsed:.1f}s (< 30s)")


# ---------------------------------------------------------------------------
# 3. velocity identity and continuity


def test_03_velocity_identity_and_continuity():
    rng = np.random.default_rng(303)
    worst_id, worst_cont = 0.0, 0.0
    for _ in range(50):
        k = int(rng.integers(1, 6))
        while True:
            masks = rng.random((k, 4, 4)) > 0.5
            if len({m.tobytes() for m in masks}) == k:
                break
        w = rng.random(k) + 0.05
        ms = ModeSet(masks, w / w.sum())
        y0 = rng.standard_normal(16)
        v0 = mixture_velocity(y0, 0.0, ms)
        worst_id = max(worst_id, np.abs(v0 - velocity_at_zero(y0, ms)).max())
        worst_cont = max(worst_cont, np.abs(mixture_velocity(y0, 1e-4, ms) - v0).max())
    ok = worst_id <= 1e-12 and worst_cont <= 1e-3
    verdict(3, ok, f"identity error {worst_id:.1e} (<= 1e-12), t=1e-4 deviation {worst_cont:.1e} (<= 1e-3) on 50 mode sets")


# ---------------------------------------------------------------------------
# 4. exact-oracle decomposition on directional data


def test_04_exact_oracle_decomposition():
    items = gen_directional(DirectionalConfig(num_items=100, rng_seed=404))
    start = time.perf_counter()
    scores, errors = [], []
    for i, it in enumerate(items):
        est = estimate_weights(MixtureField(it.modes), it.modes.masks, n=64, rng=np.random.default_rng(i))
        aligned, _ = align_weights(it.modes.masks, est.weights, it.modes)
        scores.append(bss(aligned, it.modes.weights))
        errors.append(np.abs(aligned - it.modes.weights).max())
    elapsed = time.perf_counter() - start
    ok = np.mean(scores) >= 0.99 and max(errors) <= 1e-3 and elapsed < 60
    verdict(4, ok, f"mean BSS {np.mean(scores):.6f} (>= 0.99), max weight error {max(errors):.1e} (<= 1e-3), {elapsed:.1f}s (< 60s)")


# ---------------------------------------------------------------------------
# 5. solver vs grid oracle


def test_05_solver_beats_simplex_grid():
    rng = np.random.default_rng(505)
    worst_gap = -np.inf
    for k in (2, 3):
        for _ in range(50):
            modes = rng.random((3, 4, 4)) > 0.5
            while len({m.tobytes() for m in modes}) < 3:
                modes = rng.random((3, 4, 4)) > 0.5
            w = rng.random(3) + 0.05
            ms = ModeSet(modes, w / w.sum())
            # candidates are generally not the true modes, so the optimum is a genuine compromise
            cands = rng.random((k, 4, 4)) > 0.5
            if rng.random() < 0.5:
                cands[0] = modes[0]
            est = estimate_weights(MixtureField(ms), cands, n=64, rng=np.random.default_rng(0))
            G, b, s = decomposition_system(MixtureField(ms), cands, None, 64, np.random.default_rng(0))
            obj = lambda x: float(x @ G @ x - 2 * b @ x + s)
            grid_best = min(obj(g) for g in simplex_grid(k, 0.01))
            worst_gap = max(worst_gap, obj(est.weights) - grid_best)
    verdict(5, worst_gap <= 1e-8, f"max (solver - grid) objective {worst_gap:.2e} (<= 1e-8) over 100 instances")


# ---------------------------------------------------------------------------
# 6-8. training on directional data

TRAIN_SEEDS = (0, 1, 2)
DATA_CFG = DirectionalConfig(num_items=800, rng_seed=0)
BASE_TRAIN = dict(loss_kind="dice_focal", lam=1e-2, learning_rate=1e-3, epochs=100, batch_size=32, num_proposals=16)


@pytest.fixture(scope="module")
def directional_runs():
    data = gen_directional(DATA_CFG)
    runs = {}
    for scenario in ("full", "single"):
        for seed in TRAIN_SEEDS:
            cfg = TrainConfig(scenario=scenario, rng_seed=seed, **BASE_TRAIN)
            start = time.perf_counter()
            params, history = train(data, cfg)
            elapsed = time.perf_counter() - start
            _, val_idx = validation_split(len(data), cfg)
            val = [data[i] for i in val_idx]
            proposals = forward_many(params, [it.input for it in val])
            hm = float(np.mean([hm_iou_star(it.modes, ps.binary()) for it, ps in zip(val, proposals)]))
            runs[scenario, seed] = dict(params=params, history=history, val=val, proposals=proposals, hm=hm, seconds=elapsed)
    return runs


@pytest.mark.slow
def test_06_full_training_reaches_hm_iou(directional_runs):
    run = directional_runs["full", 0]
    others = ", ".join(f"seed {s}: {directional_runs['full', s]['hm']:.3f}" for s in TRAIN_SEEDS[1:])
    ok = run["hm"] >= 0.85 and run["seconds"] <= 600
    verdict(6, ok, f"validation HM IoU* {run['hm']:.4f} (>= 0.85) in {run['seconds']:.0f}s (<= 600s); {others}")


@pytest.mark.slow
def test_07_single_label_gap(directional_runs):
    full = np.mean([directional_runs["full", s]["hm"] for s in TRAIN_SEEDS])
    single = np.mean([directional_runs["single", s]["hm"] for s in TRAIN_SEEDS])
    gap = abs(full - single)
    verdict(7, gap <= 0.05, f"mean HM IoU* full {full:.4f}, single {single:.4f}, gap {gap:.4f} (<= 0.05) over seeds {TRAIN_SEEDS}")


@pytest.mark.slow
def test_08_selection_filtering(directional_runs):
    run = directional_runs["full", 0]
    val, proposals = run["val"], run["proposals"]
    f1 = selection_f1(list(zip([it.modes for it in val], proposals)))
    scores_only = FilterConfig(use_scores=True, use_dedup=False)
    kept = [filter_proposals(ps, scores_only) for ps in proposals]
    mean_kept = np.mean([len(k) for k, _ in kept])
    true_modes = np.mean([len(it.modes) for it in val])
    hm_all = run["hm"]
    hm_kept = float(np.mean([hm_iou_star(it.modes, masks) for it, (_, masks) in zip(val, kept)]))
    drop = hm_all - hm_kept
    ok = f1 >= 0.9 and abs(mean_kept - true_modes) <= 1 and drop <= 0.05
    verdict(
        8, ok,
        f"selection F1 {f1:.4f} (>= 0.9); kept {mean_kept:.2f} vs true {true_modes:.2f} modes (within 1); "
        f"HM IoU* {hm_all:.4f} -> {hm_kept:.4f}, drop {drop:.4f} (<= 0.05)",
    )


# ---------------------------------------------------------------------------
# 9. de-duplication before decomposition


def _drop_pixel(mask, rng):
    out = mask.copy()
    on = np.flatnonzero(out)
    out.flat[on[rng.integers(len(on))]] = False
    return out


def test_09_dedup_improves_decomposition():
    rng = np.random.default_rng(909)
    # a larger grid keeps wedge modes big enough for one-pixel variants to stay above IoU 0.95
    items = gen_directional(DirectionalConfig(grid_size=(32, 32), seed_margin=10, num_items=50, rng_seed=909))
    wins, min_dup_iou, n_items = 0, 1.0, 0
    with_dedup, without = [], []
    for i, it in enumerate(items):
        masks, scores = [], []
        for m in it.modes.masks:
            a = _drop_pixel(m, rng)
            b = _drop_pixel(m, rng)
            if m.sum() >= 40 and iou(a, b) >= 0.95 and not np.array_equal(a, b):
                masks += [a, b]
                scores += [0.9, 0.8]
                min_dup_iou = min(min_dup_iou, iou(a, b))
            else:
                masks.append(m)
                scores.append(0.9)
        if len(masks) == len(it.modes):
            continue
        n_items += 1
        ps = ProposalSet(np.array(masks, dtype=float), scores)
        field = MixtureField(it.modes)
        result = []
        for use_dedup in (True, False):
            _, cands = filter_proposals(ps, FilterConfig(use_dedup=use_dedup))
            est = estimate_weights(field, cands, n=64, rng=np.random.default_rng(i))
            aligned, _ = align_weights(cands, est.weights, it.modes)
            result.append(bss(aligned, it.modes.weights))
        with_dedup.append(result[0])
        without.append(result[1])
        wins += result[0] > result[1]
    frac = wins / n_items
    verdict(
        9, frac >= 0.9 and min_dup_iou >= 0.95,
        f"dedup wins on {wins}/{n_items} items ({frac:.0%}, >= 90%); mean BSS {np.mean(with_dedup):.3f} with vs "
        f"{np.mean(without):.3f} without; duplicate IoU >= {min_dup_iou:.3f}",
    )


# ---------------------------------------------------------------------------
# 10. class-flip recovery


def test_10_classflip_recovery():
    p_true = np.array((0.05, 0.25, 0.75, 0.95))
    items = gen_classflip(ClassFlipConfig(flip_probs=tuple(p_true), num_items=30, rng_seed=1010))
    exact_err, oracle_err, flip_scores = 0.0, 0.0, []
    for i, it in enumerate(items):
        exact_err = max(exact_err, np.abs(estimate_flip_probs(it.modes.weights, it.flip.alpha) - p_true).max())
        est = estimate_weights(MixtureField(it.modes), it.modes.masks, n=64, rng=np.random.default_rng(i))
        p_hat, _ = structure_aware_probs(it.modes.masks, est.weights, it.flip.templates)
        oracle_err = max(oracle_err, np.abs(p_hat - p_true).max())
        templates = estimate_templates_pca(it.modes.masks, 4, "otsu")
        p_pca, _ = structure_aware_probs(it.modes.masks, est.weights, templates)
        p_pca, _ = align_to_reference(templates, p_pca, it.flip.templates)
        flip_scores.append(bss(p_pca, p_true))
    ok = exact_err <= 1e-9 and oracle_err <= 0.02 and np.mean(flip_scores) >= 0.9
    verdict(
        10, ok,
        f"exact weights error {exact_err:.1e} (<= 1e-9); oracle weights + true templates error {oracle_err:.1e} (<= 0.02); "
        f"PCA + Otsu Bernoulli BSS {np.mean(flip_scores):.4f} (>= 0.9)",
    )


# ---------------------------------------------------------------------------
# 11. metric oracles


def test_11_metric_oracles():
    rng = np.random.default_rng(1111)
    worst = 0.0
    for _ in range(300):
        n_raw = int(rng.integers(1, 5))
        raw = rng.random((n_raw, 2, 3)) > 0.5
        props = rng.random((int(rng.integers(1, 7)), 2, 3)) > 0.5
        gt = merge_duplicates(raw, np.full(n_raw, 1 / n_raw))
        worst = max(
            worst,
            abs(hm_iou(raw, props) - brute_matched_mean(raw, props)),
            abs(hm_iou_star(gt, props) - brute_matched_mean(gt.masks, props)),
            abs(hm_iou_multi(gt, props) - brute_matched_mean(gt.masks, props, gt.counts)),
        )
    cases = [
        (bss([0.7, 0.3], [0.8, 0.2]), 1 - 0.01 / (0.09 + 1e-8)),
        (bss([0.8, 0.2], [0.8, 0.2]), 1.0),
        (bss([0.5, 0.5], [0.8, 0.2]), 1 - 0.09 / (0.09 + 1e-8)),
        (bss([0.9, 0.1], [0.5, 0.5]), 1 - 0.16 / 1e-8),
    ]
    bss_err = max(abs(a - b) / max(1.0, abs(b)) for a, b in cases)
    reported = bss([0.05, 0.142, 0.762, 0.910], [0.05, 0.25, 0.75, 0.95])
    ok = worst <= 1e-12 and bss_err <= 1e-12 and abs(reported - 0.983) < 5e-4
    verdict(11, ok, f"HM variants vs brute force max error {worst:.1e}; BSS hand cases max error {bss_err:.1e}; reported flip BSS {reported:.4f} (0.983)")


# ---------------------------------------------------------------------------
# 12. pipeline determinism


def test_12_pipeline_is_deterministic(tmp_path):
    raw = {
        "schema_version": 1,
        "seed": 12,
        "dataset": {"kind": "directional", "num_items": 60},
        "train": {"epochs": 3, "batch_size": 16, "num_proposals": 16, "hidden": 64, "selection_hidden": 16},
        "decomp": {"n_samples": 16, "candidates": "proposals"},
    }
    outputs = []
    for name in ("a", "b"):
        raw["output_dir"] = str(tmp_path / name)
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(raw))
        assert cli.main(["pipeline", "--config", str(path), "--jobs", "2"]) == 0
        outputs.append({f: (tmp_path / name / f).read_bytes() for f in ("eval.json", "decomp.json")})
    same = outputs[0] == outputs[1]
    verdict(12, same, "eval.json and decomp.json byte-identical across reruns" if same else "reports differ between reruns")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
