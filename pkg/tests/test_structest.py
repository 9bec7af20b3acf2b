import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from modeset.core import iou
from modeset.flowdecomp import MixtureField, estimate_weights
from modeset.metrics import align_to_reference, bss
from modeset.structest import (
    estimate_alphas, estimate_flip_probs, estimate_templates_pca, flip_nll, mode_prob, otsu_threshold,
    structure_aware_probs,
)
from modeset.synthgen import ClassFlipConfig, gen_classflip, make_classflip_item
from oracles import rect

P = (0.05, 0.25, 0.75, 0.95)


def test_mode_prob_examples():
    assert mode_prob([1, 1, 1, 1], P) == pytest.approx(0.00890625, abs=1e-15)
    assert mode_prob([0, 0, 0, 0], P) == pytest.approx(np.prod(1 - np.array(P)), abs=1e-15)
    with pytest.raises(ValueError):
        mode_prob([1, 0], P)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=5))
def test_mode_prob_partition(p):
    total = sum(mode_prob(row, p) for row in itertools.product((0, 1), repeat=len(p)))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_flip_probs_from_exact_weights():
    alpha = np.array(list(itertools.product((0, 1), repeat=4)))
    w = np.array([mode_prob(r, P) for r in alpha])
    np.testing.assert_allclose(estimate_flip_probs(w, alpha), P, atol=1e-12)


def test_flip_probs_trivial_cases():
    np.testing.assert_array_equal(estimate_flip_probs([1.0, 0.0], [[1, 0], [0, 1]]), [1, 0])
    assert estimate_flip_probs([0.3, 0.7], [[1], [0]])[0] == pytest.approx(0.3)


@settings(max_examples=25, deadline=None)
@given(st.data())
def test_closed_form_matches_numeric_minimum(data):
    c = data.draw(st.integers(1, 3))
    alpha = np.array(list(itertools.product((0, 1), repeat=c)))
    raw = np.array(data.draw(st.lists(st.floats(0.05, 1), min_size=len(alpha), max_size=len(alpha))))
    w = raw / raw.sum()
    closed = estimate_flip_probs(w, alpha)
    res = minimize(lambda p: flip_nll(p, w, alpha), np.full(c, 0.5), bounds=[(1e-9, 1 - 1e-9)] * c, method="L-BFGS-B", options={"ftol": 1e-15, "gtol": 1e-12})
    np.testing.assert_allclose(res.x, closed, atol=1e-6)
    assert flip_nll(closed, w, alpha) <= res.fun + 1e-12


def test_estimate_alphas_examples():
    t = rect((4, 5), 0, 0, 2, 5)  # 10 px
    assert estimate_alphas(t | rect((4, 5), 3, 0, 1, 5), t) == 1
    assert estimate_alphas(rect((4, 5), 3, 0, 1, 5), t) == 0
    six = np.zeros((4, 5), bool)
    six.flat[:6] = True
    assert estimate_alphas(six, t) == 1
    five = np.zeros((4, 5), bool)
    five.flat[:5] = True
    assert estimate_alphas(five, t) == 0
    with pytest.raises(ValueError):
        estimate_alphas(t, np.zeros((4, 5), bool))


def test_otsu_two_clusters_and_translation():
    v = np.array([0.0] * 50 + [1.0] * 50)
    t = otsu_threshold(v)
    assert 0 < t < 1
    assert otsu_threshold(v + 3.0) == pytest.approx(t + 3.0, abs=1e-12)
    with pytest.raises(ValueError):
        otsu_threshold([2.0, 2.0])


def test_otsu_merges_small_clusters():
    v = np.array([0.0] * 90 + [0.5] * 5 + [1.0] * 5)
    assert otsu_threshold(v) < 0.5


def test_otsu_matches_exhaustive_split_search():
    rng = np.random.default_rng(0)
    v = np.concatenate([rng.normal(0, 0.1, 200), rng.normal(2, 0.3, 100)])
    t = otsu_threshold(v)
    counts, edges = np.histogram(v, 256, range=(v.min(), v.max()))
    centers = (edges[:-1] + edges[1:]) / 2
    best = max(range(255), key=lambda k: counts[: k + 1].sum() * counts[k + 1 :].sum()
               * (np.average(centers[: k + 1], weights=counts[: k + 1] + 1e-300)
                  - np.average(centers[k + 1 :], weights=counts[k + 1 :] + 1e-300)) ** 2)
    assert np.array_equal(v > t, v > edges[best + 1])


def _flip_modes(templates):
    return make_classflip_item(templates, [0.5] * len(templates)).modes.masks


def test_pca_recovers_rectangles():
    shape = (12, 12)
    templates = np.array([rect(shape, 0, 0, 2, 3), rect(shape, 4, 4, 3, 3), rect(shape, 9, 0, 2, 5), rect(shape, 0, 8, 4, 4)])
    est = estimate_templates_pca(_flip_modes(templates), 4)
    for t in templates:
        assert max(iou(t, e) for e in est) >= 0.99
    assert np.all(est.sum(0) <= 1)


def test_pca_single_class_two_point():
    t = rect((5, 5), 1, 1, 2, 3)
    est = estimate_templates_pca(np.array([np.zeros((5, 5), bool), t]), 1)
    np.testing.assert_array_equal(est[0], t)


def test_pca_otsu_and_manual_agree_on_bimodal_component():
    shape = (10, 10)
    templates = np.array([rect(shape, 0, 0, 3, 3), rect(shape, 5, 5, 4, 4)])
    props = _flip_modes(templates)
    auto = estimate_templates_pca(props, 2, "otsu")
    manual = estimate_templates_pca(props, 2, [0.05, 0.05])
    np.testing.assert_array_equal(auto, manual)


def test_pca_errors():
    m = rect((4, 4), 0, 0, 2, 2)
    with pytest.raises(ValueError):
        estimate_templates_pca(np.array([m, m, m]), 2)
    with pytest.raises(ValueError):
        estimate_templates_pca(np.array([m, m]), 2)


def test_pipeline_identity_with_true_templates():
    for it in gen_classflip(ClassFlipConfig(num_items=10, rng_seed=3)):
        p_hat, alpha = structure_aware_probs(it.modes.masks, it.modes.weights, it.flip.templates)
        np.testing.assert_array_equal(alpha, it.flip.alpha)
        np.testing.assert_allclose(p_hat, P, atol=1e-9)


def test_oracle_weights_and_pca_templates_end_to_end():
    scores = []
    for i, it in enumerate(gen_classflip(ClassFlipConfig(num_items=5, rng_seed=7))):
        est = estimate_weights(MixtureField(it.modes), it.modes.masks, n=64, rng=np.random.default_rng(i))
        templates = estimate_templates_pca(it.modes.masks, 4)
        p_hat, _ = structure_aware_probs(it.modes.masks, est.weights, templates)
        p_hat, _ = align_to_reference(templates, p_hat, it.flip.templates)
        scores.append(bss(p_hat, P))
    assert np.mean(scores) >= 0.9
