import numpy as np
import pytest

from mixtrain import detector, ema_teacher
from mixtrain.detector import DetectorConfig, assign_labels, backward, detection_loss, forward, init_params, num_params, sgd_step
from mixtrain.ema_teacher import EmaState, ema_update, init_teacher, inspect, predict_pseudo_boxes, score_targets
from mixtrain.synthetic_data import LabeledBox, SceneConfig, render_scene

CFG = DetectorConfig()


def test_momentum_one_freezes_teacher():
    s = init_teacher(np.arange(5.0), momentum=1.0)
    s2 = ema_update(s, np.full(5, 100.0))
    np.testing.assert_array_equal(s2.params, np.arange(5.0))
    assert s2.update_count == 1


def test_momentum_zero_copies_student():
    s = init_teacher(np.zeros(4), momentum=0.0)
    student = np.array([1.0, -2.0, 3.5, 0.25])
    np.testing.assert_array_equal(ema_update(s, student).params, student)


def test_update_is_pure():
    s = init_teacher(np.zeros(3))
    ema_update(s, np.ones(3))
    assert np.all(s.params == 0) and s.update_count == 0


def test_closed_form_after_many_updates():
    m, k = 0.999, 1000
    theta0 = np.random.default_rng(0).normal(size=50)
    student = np.random.default_rng(1).normal(size=50)
    s = init_teacher(theta0, m)
    for _ in range(k):
        s = ema_update(s, student)
    closed = m**k * theta0 + (1 - m**k) * student
    assert np.max(np.abs(s.params - closed)) < 1e-9
    assert s.update_count == k

    s = init_teacher(np.zeros(1), m)
    for _ in range(k):
        s = ema_update(s, np.ones(1))
    assert s.params[0] == pytest.approx(0.6323, abs=1e-4)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        ema_update(init_teacher(np.zeros(3)), np.zeros(4))
    with pytest.raises(ValueError):
        EmaState(np.zeros(2), momentum=1.5)


def _zero_teacher():
    return init_teacher(np.zeros(num_params(CFG)))


def test_untrained_teacher_outputs():
    state = _zero_teacher()
    s = render_scene(3)
    assert predict_pseudo_boxes(state, s.image, CFG) == []
    scores = score_targets(state, s.image, s.targets, CFG)
    np.testing.assert_allclose(scores, 0.25)
    assert len(score_targets(state, s.image, [], CFG)) == 0


def test_one_forward_for_boxes_and_scores(monkeypatch):
    calls = []
    real = detector.forward

    def counting(*args, **kwargs):
        calls.append(1)
        return real(*args, **kwargs)

    monkeypatch.setattr(ema_teacher.detector, "forward", counting)
    state = init_teacher(init_params(CFG, seed=4))
    s = render_scene(21)
    predict_pseudo_boxes(state, s.image, CFG)
    score_targets(state, s.image, s.targets, CFG)
    assert len(calls) == 1
    # a different image needs a fresh forward
    score_targets(state, render_scene(22).image, [], CFG)
    assert len(calls) == 2
    # so does an updated teacher
    state2 = ema_update(state, state.params + 1e-3)
    predict_pseudo_boxes(state2, render_scene(22).image, CFG)
    assert len(calls) == 3


def test_sgd_step_leaves_teacher_bitwise_unchanged():
    theta = init_params(CFG, seed=0)
    teacher = init_teacher(theta)
    snapshot = teacher.params.tobytes()
    grad = np.random.default_rng(0).normal(size=theta.shape)
    new_theta, _ = sgd_step(theta, grad, np.zeros_like(theta), lr=0.1, momentum=0.9)
    assert teacher.params.tobytes() == snapshot
    assert not np.array_equal(new_theta, teacher.params)


@pytest.fixture(scope="module")
def overfit_teacher():
    """A detector trained on a single one-object image until it is confident."""
    cfg = DetectorConfig(features=16)
    sample = render_scene(5, SceneConfig(shapes_per_image=(1, 1), size_range=(14.0, 18.0)))
    theta = init_params(cfg, seed=0, background_prior=0.99)
    velocity = np.zeros_like(theta)
    image = sample.image[None]
    for _ in range(400):
        fp = forward(theta, image, cfg)
        a = assign_labels(fp.anchors, sample.targets)
        _, terms = detection_loss(fp[0], a, sample.targets)
        grad = backward(theta, fp, terms.dlogits[None], terms.ddeltas[None])
        norm = np.linalg.norm(grad)
        if norm > 10:
            grad *= 10 / norm
        theta, velocity = sgd_step(theta, grad, velocity, lr=0.005, momentum=0.9)
    # teacher equal to the converged student
    return init_teacher(theta), sample, cfg


def test_overfit_teacher_yields_single_pseudo_box(overfit_teacher):
    state, sample, cfg = overfit_teacher
    boxes = predict_pseudo_boxes(state, sample.image, cfg)
    assert len(boxes) == 1
    (p,) = boxes
    (t,) = sample.targets
    assert p.provenance == "pseudo" and p.score > 0.9
    assert p.category == t.category
    from mixtrain.box_geometry import iou

    assert iou(p.box, t.box) > 0.5


def test_pseudo_box_scores_agree_with_target_scores(overfit_teacher):
    state, sample, cfg = overfit_teacher
    view = inspect(state, sample.image, cfg)
    boxes = view.pseudo_boxes()
    assert boxes
    assert all(b.score > 0.9 for b in boxes)
    as_targets = [LabeledBox(b.box, b.category) for b in boxes]
    assert np.all(view.scores(as_targets) >= 0.9)


def test_scale_jitter_maps_boxes_back(overfit_teacher):
    state, sample, cfg = overfit_teacher
    view = inspect(state, sample.image, cfg, scale=1.0)
    assert view.scale == 1.0
    for scale in (0.8, 1.25):
        for b in inspect(state, sample.image, cfg, scale=scale).pseudo_boxes(0.5):
            assert 0 <= b.box.x_min < b.box.x_max <= 64
            assert 0 <= b.box.y_min < b.box.y_max <= 64
