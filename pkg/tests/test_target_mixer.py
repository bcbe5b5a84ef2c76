from collections import Counter

import numpy as np
import pytest

from mixtrain.box_geometry import Box, iou_matrix
from mixtrain.synthetic_data import LabeledBox
from mixtrain.target_mixer import iou_match, merge, merge_hybrid, merge_loc_noise, merge_missing_labels
from oracles import distinct_ious, exhaustive_matching, scene_like_instance


def gt(coords, cat=0):
    return LabeledBox(Box(*coords), cat)


def ps(coords, score=0.95, cat=0):
    return LabeledBox(Box(*coords), cat, "pseudo", score)


def test_match_disjoint_and_identical():
    a = [gt([0, 0, 10, 10]), gt([20, 20, 30, 30])]
    b = [ps([40, 40, 50, 50]), ps([50, 0, 60, 10])]
    assert iou_match(b, a) == []
    same = [ps(t.box.as_list()) for t in a]
    assert iou_match(same, a) == [(0, 0, 1.0), (1, 1, 1.0)]


def test_pseudo_takes_its_best_gt():
    p = ps([0, 0, 10, 10])
    g1 = gt([0, 0, 10, 6])  # IoU 0.6
    g2 = gt([0, 0, 10, 8])  # IoU 0.8
    assert iou_match([p], [g1, g2]) == [(0, 1, pytest.approx(0.8))]


def test_match_threshold_is_inclusive():
    # IoU exactly 0.5
    assert len(iou_match([ps([0, 0, 10, 10])], [gt([0, 0, 10, 5])])) == 1


def test_missing_labels_example():
    g = [gt([0, 0, 10, 10])]
    p = [ps([0, 0, 10, 10], 0.95), ps([50, 50, 60, 60], 0.92)]
    r = merge_missing_labels(g, p)
    assert r.targets == g + [p[1]]
    assert (r.n_added, r.n_replaced) == (1, 0)
    assert merge_missing_labels([], p).targets == p
    assert merge_missing_labels(g, []).targets == g


def test_loc_noise_example():
    g = [gt([0, 0, 10, 10], cat=1)]
    p = [ps([1, 1, 11, 11], 0.93, cat=1)]
    assert iou_match(p, g)[0][2] == pytest.approx(81 / 119)
    r = merge_loc_noise(g, p)
    assert [t.box for t in r.targets] == [Box(1, 1, 11, 11)]
    assert r.targets[0].category == 1 and r.targets[0].provenance == "pseudo"
    assert (r.n_added, r.n_replaced) == (0, 1)


def test_loc_noise_class_guard():
    g = [gt([0, 0, 10, 10], cat=1)]
    r = merge_loc_noise(g, [ps([1, 1, 11, 11], 0.93, cat=2)])
    assert r.targets == g and r.n_replaced == 0


def test_hybrid_union_example():
    g = [gt([0, 0, 10, 10], cat=1)]
    p = [ps([1, 1, 11, 11], 0.93, cat=1), ps([50, 50, 60, 60], 0.92, cat=0)]
    r = merge_hybrid(g, p)
    expect_replace = merge_loc_noise(g, p[:1]).targets
    expect_add = merge_missing_labels(g, p[1:]).targets[1:]
    assert r.targets == expect_replace + expect_add
    assert (r.n_added, r.n_replaced) == (1, 1)
    assert merge_hybrid(g, []).targets == g


def test_hybrid_equals_missing_without_matches():
    g = [gt([0, 0, 10, 10]), gt([30, 30, 40, 40])]
    p = [ps([5, 5, 15, 15]), ps([50, 50, 60, 60])]
    h, m = merge_hybrid(g, p), merge_missing_labels(g, p)
    assert h.targets == m.targets and h.n_added == m.n_added and h.n_replaced == 0


def test_merge_dispatch():
    g = [gt([0, 0, 10, 10])]
    p = [ps([50, 50, 60, 60])]
    assert merge(g, p, "off").targets == g
    assert merge(g, p, "missing").n_added == 1
    with pytest.raises(ValueError):
        merge(g, p, "mystery")


def _random_instances(n, seed=0):
    rng = np.random.default_rng(seed)
    return [scene_like_instance(rng) for _ in range(n)]


def test_cardinality_identities():
    for pseudo, human in _random_instances(500):
        miss = merge_missing_labels(human, pseudo)
        assert miss.targets[: len(human)] == human
        assert len(miss.targets) == len(human) + miss.n_added
        assert all(t.provenance == "pseudo" for t in miss.targets[len(human):])

        loc = merge_loc_noise(human, pseudo)
        assert len(loc.targets) == len(human)
        assert Counter(t.category for t in loc.targets) == Counter(t.category for t in human)

        hyb = merge_hybrid(human, pseudo)
        assert len(hyb.targets) == len(human) + hyb.n_added


def test_strategies_deterministic_and_idempotent():
    for pseudo, human in _random_instances(200, seed=1):
        for strategy in ("missing", "loc_noise", "hybrid"):
            first = merge(human, pseudo, strategy)
            assert merge(human, pseudo, strategy) == first
            additions = [t for t in first.targets[len(human):] if t.provenance == "pseudo"]
            again = merge(first.targets, additions, strategy)
            assert again.n_added == 0
            assert [t.box for t in again.targets] == [t.box for t in first.targets]


def test_matching_is_one_to_one_and_above_threshold():
    for pseudo, human in _random_instances(300, seed=2):
        m = iou_match(pseudo, human)
        assert len({p for p, _, _ in m}) == len(m) == len({g for _, g, _ in m})
        assert all(v >= 0.5 for _, _, v in m)


def test_greedy_equals_exhaustive_on_scene_like_instances():
    rng = np.random.default_rng(3)
    trials = 0
    while trials < 300:
        pseudo, human = scene_like_instance(rng)
        ious = iou_matrix(np.array([t.box.as_list() for t in pseudo]), np.array([t.box.as_list() for t in human]))
        if not distinct_ious(ious):
            continue
        trials += 1
        assert {(p, g) for p, g, _ in iou_match(pseudo, human)} == exhaustive_matching(ious)


def test_greedy_commits_to_best_pair_in_dense_clusters():
    # heavily overlapping boxes on both sides: greedy keeps the single best
    # pair even though a three-pair matching has more total IoU
    rng = np.random.default_rng(1)
    base = np.array([20, 20, 36, 36.0])
    for _ in range(1000):
        pseudo = [ps(list(base + rng.normal(0, 1.5, 4))) for _ in range(3)]
        human = [gt(list(base + rng.normal(0, 1.5, 4))) for _ in range(3)]
        ious = iou_matrix(np.array([t.box.as_list() for t in pseudo]), np.array([t.box.as_list() for t in human]))
        greedy = iou_match(pseudo, human)
        if {(p, g) for p, g, _ in greedy} != exhaustive_matching(ious):
            p0, g0, v0 = greedy[0]
            assert v0 == ious.max() and (p0, g0) == np.unravel_index(ious.argmax(), ious.shape)
            return
    pytest.fail("expected a dense instance where greedy and exhaustive differ")
