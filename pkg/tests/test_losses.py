import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from conftest import central_diff, rel_err

from changeguide import tensor as T
from changeguide.losses import ConfusionMatrix, LossConfig, cd_loss, confusion, dice_loss, metrics, weighted_bce
from changeguide.nn import Parameter


def value(fn, P, target, cfg=LossConfig()):
    return fn(np.asarray(P, dtype=float), np.asarray(target, dtype=float), cfg).item()


def test_bce_hand_values():
    assert abs(value(weighted_bce, [0.5], [0.0]) - 0.693147180559945) < 1e-9
    assert abs(value(weighted_bce, [0.5], [1.0]) - 6.238324625039508) < 1e-9
    assert value(weighted_bce, [1.0, 0.0], [1.0, 0.0]) < 1e-5


def test_bce_unit_weight_is_plain_bce(rng):
    P, t = rng.uniform(0.01, 0.99, size=(3, 5)), (rng.random((3, 5)) < 0.4).astype(float)
    plain = -np.mean(t * np.log(P) + (1 - t) * np.log(1 - P))
    assert abs(value(weighted_bce, P, t, LossConfig(fg_weight=1.0)) - plain) < 1e-12


def test_bce_clamps_saturated_probabilities():
    assert np.isfinite(value(weighted_bce, [0.0, 1.0], [1.0, 0.0]))


def test_dice_hand_values():
    n = 100
    assert value(dice_loss, np.ones(n), np.ones(n)) == 0.0
    assert value(dice_loss, np.zeros(n), np.zeros(n)) == 0.0
    assert abs(value(dice_loss, np.ones(n), np.zeros(n)) - (1 - 1e-6 / (100 + 1e-6))) < 1e-9


def test_cd_loss_is_sum(rng):
    P, t = rng.uniform(0, 1, size=(4, 4)), (rng.random((4, 4)) < 0.5).astype(float)
    assert value(cd_loss, P, t) == pytest.approx(value(weighted_bce, P, t) + value(dice_loss, P, t), abs=1e-12)


def test_cd_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    for _ in range(25):
        P0 = rng.uniform(0.05, 0.95, size=(1, 1, 4, 4))
        t = (rng.random((1, 1, 4, 4)) < 0.4).astype(float)
        P = Parameter(P0)
        T.backward(cd_loss(P, t))
        fd = central_diff(lambda x: cd_loss(x, t).item(), P0.copy())
        assert rel_err(P.grad, fd) < 1e-4


def test_cd_loss_descends():
    rng = np.random.default_rng(1)
    logits = Parameter(rng.normal(size=(4, 4)))
    t = (rng.random((4, 4)) < 0.5).astype(float)
    losses = []
    for _ in range(21):
        loss = cd_loss(T.sigmoid(logits), t)
        losses.append(loss.item())
        T.backward(loss)
        logits.data = logits.data - 0.05 * logits.grad
        logits.zero_grad()
    assert all(b < a for a, b in zip(losses, losses[1:]))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.floats(0, 1)), arrays(np.bool_, (3, 3)))
def test_dice_in_unit_interval(P, t):
    d = value(dice_loss, P, t.astype(float))
    assert 0.0 <= d <= 1.0


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        weighted_bce(np.ones((2, 2)), np.ones(4))


def brute_confusion(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fp, fn, tn)


def test_confusion_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        pred = rng.random((8, 8)) < rng.random()
        gt = rng.random((8, 8)) < rng.random()
        cm = confusion(pred, gt)
        assert cm == brute_confusion(pred, gt)
        m = metrics(cm)
        assert abs(m["f1"] - 2 * m["iou"] / (1 + m["iou"])) < 1e-12


def test_confusion_extremes(rng):
    gt = rng.random((8, 8)) < 0.5
    same, inv = confusion(gt, gt), confusion(~gt, gt)
    assert same.fp == same.fn == 0 and inv.tp == inv.tn == 0
    assert all(v == 1.0 for v in metrics(same).values())


def test_metrics_hand_values():
    m = metrics(ConfusionMatrix(50, 10, 10, 30))
    for k in ("precision", "recall", "f1"):
        assert m[k] == pytest.approx(5 / 6, abs=1e-12)
    assert m["iou"] == pytest.approx(50 / 70, abs=1e-12)
    assert m["oa"] == pytest.approx(0.8, abs=1e-12)


def test_metric_conventions():
    assert metrics(ConfusionMatrix(0, 0, 0, 10)) == {"precision": 1.0, "recall": 1.0, "f1": 1.0, "iou": 1.0, "oa": 1.0}
    m = metrics(ConfusionMatrix(0, 4, 0, 6))
    assert (m["precision"], m["recall"], m["f1"], m["iou"]) == (0.0, 0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        metrics(ConfusionMatrix())


def test_confusion_addition_is_micro_average(rng):
    pairs = [(rng.random((4, 4)) < 0.3, rng.random((4, 4)) < 0.3) for _ in range(5)]
    total = sum((confusion(p, g) for p, g in pairs), ConfusionMatrix())
    stacked = confusion(np.stack([p for p, _ in pairs]), np.stack([g for _, g in pairs]))
    assert total == stacked
