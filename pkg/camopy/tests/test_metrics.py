"""
Tests for the evaluation measures and the evaluation report
"""
import math

import numpy as np
import pandas as pd
import pytest

from camopy.custom_exceptions import DataException, ShapeMismatchException
from camopy.metrics import (
    METRIC_NAMES,
    EvalReport,
    e_measure,
    evaluate_dataset,
    evaluate_pair,
    f_beta_w,
    mae,
    s_measure,
)
from camopy.tests.reference_metrics import reference_scores


def _random_pair(rng, shape=(20, 24)):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = rng.uniform(4, h - 4), rng.uniform(4, w - 4)
    ry, rx = rng.uniform(2, h / 3), rng.uniform(2, w / 3)
    gt = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
    noise = rng.uniform(0, 1, shape)
    pred = np.clip(0.6 * gt + 0.4 * noise + rng.normal(0, 0.1, shape), 0, 1)
    return pred, gt


@pytest.fixture(scope="module")
def pairs(rng):
    return [_random_pair(rng) for _ in range(20)]


def test_measures_match_reference_toolbox(pairs):
    for pred, gt in pairs:
        expected = reference_scores(pred, gt)
        assert s_measure(pred, gt) == pytest.approx(expected["S_alpha"], abs=1e-6)
        assert e_measure(pred, gt) == pytest.approx(expected["E_phi"], abs=1e-6)
        assert f_beta_w(pred, gt) == pytest.approx(expected["F_beta_w"], abs=1e-6)


def test_e_measure_uses_eight_bit_levels(rng):
    """Predictions closer than one quantization step score identically"""
    pred, gt = _random_pair(rng)
    q = (np.floor(pred * 255).clip(0, 254) + 0.25) / 255
    assert e_measure(q + 0.1 / 255, gt) == e_measure(q, gt)


def test_mae_matches_reference(pairs):
    for pred, gt in pairs:
        expected = math.fsum(abs(p - g) for p, g in zip(pred.ravel(), gt.ravel())) / gt.size
        assert mae(pred, gt) == pytest.approx(expected, abs=1e-12)


def test_degenerate_ground_truths():
    pred = np.full((6, 6), 0.25)
    empty, full = np.zeros((6, 6)), np.ones((6, 6))
    assert s_measure(pred, empty) == pytest.approx(0.75)
    assert s_measure(pred, full) == pytest.approx(0.25)
    assert f_beta_w(pred, empty) == 0.0
    for gt in (empty, full):
        expected = reference_scores(pred, gt)
        assert e_measure(pred, gt) == pytest.approx(expected["E_phi"], abs=1e-12)
        assert s_measure(pred, gt) == pytest.approx(expected["S_alpha"], abs=1e-12)


def _centered_square(size=64):
    gt = np.zeros((size, size))
    gt[size // 4 : 3 * size // 4, size // 4 : 3 * size // 4] = 1
    return gt


# Closed-form values on centered squares. With N pixels every binarization
# above level 0 contributes N (perfect) or 0 (complement), the level-0
# binarization N / 4, and each sum is divided by N - 1.
GOLDEN = [
    ("perfect", 64, lambda gt: gt.copy(), 1.0, 4084 / 4095, 1.0, 0.0),
    ("complement", 64, lambda gt: 1 - gt, 0.0, 4 / 4095, 0.0, 1.0),
    ("constant", 32, lambda gt: np.full(gt.shape, 0.5), 0.4, 256 / 1023, None, 0.5),
]


@pytest.mark.parametrize(
    "size, make_pred, s_alpha, e_phi, f_beta, error",
    [case[1:] for case in GOLDEN],
    ids=[case[0] for case in GOLDEN],
)
def test_golden_values(size, make_pred, s_alpha, e_phi, f_beta, error):
    gt = _centered_square(size)
    scores = evaluate_pair(make_pred(gt), gt)
    assert scores["S_alpha"] == pytest.approx(s_alpha, abs=1e-6)
    assert scores["E_phi"] == pytest.approx(e_phi, abs=1e-6)
    if f_beta is not None:
        assert scores["F_beta_w"] == pytest.approx(f_beta, abs=1e-6)
    assert scores["MAE"] == error
    assert scores == pytest.approx(reference_scores(make_pred(gt), gt) | {"MAE": error}, abs=1e-6)


def test_complement_prediction_scores_low():
    gt = _centered_square()
    scores = evaluate_pair(1 - gt, gt)
    for name in ("S_alpha", "E_phi", "F_beta_w"):
        assert scores[name] <= 0.25, name


def test_scores_are_bounded(pairs):
    for pred, gt in pairs:
        for name, value in evaluate_pair(pred, gt).items():
            assert 0.0 <= value <= 1.0, name


def test_flip_invariance(rng):
    """Mirroring prediction and ground truth together leaves the scores
    unchanged; the prediction is constant on the object so that ties in the
    nearest-foreground lookup cannot matter"""
    h, w = 24, 30
    yy, xx = np.mgrid[0:h, 0:w]
    gt = (((yy - 8) / 5) ** 2 + ((xx - 9) / 7) ** 2 <= 1) | ((yy > 14) & (xx > 18) & (xx < 26))
    pred = np.where(gt, 0.8, rng.uniform(0, 0.5, (h, w)))
    for axis in (0, 1):
        fp, fg = np.flip(pred, axis), np.flip(gt, axis)
        assert e_measure(fp, fg) == pytest.approx(e_measure(pred, gt), abs=1e-12)
        assert f_beta_w(fp, fg) == pytest.approx(f_beta_w(pred, gt), abs=1e-12)
        assert mae(fp, fg) == pytest.approx(mae(pred, gt), abs=1e-12)


def test_mae_triangle_inequality(rng):
    for _ in range(10):
        a, gt = _random_pair(rng)
        b = rng.uniform(0, 1, gt.shape)
        assert mae(a, gt) <= float(np.mean(np.abs(a - b))) + mae(b, gt) + 1e-12


def test_f_beta_w_decreases_with_noise(rng):
    gt = _centered_square(32).astype(bool)
    order = rng.permutation(gt.size)
    values = []
    for fraction in (0.0, 0.05, 0.1, 0.2, 0.4):
        pred = gt.astype(np.float64).ravel()
        flipped = order[: int(fraction * gt.size)]
        pred[flipped] = 1 - pred[flipped]
        values.append(f_beta_w(pred.reshape(gt.shape), gt))
    assert values[0] == pytest.approx(1.0, abs=1e-6)
    assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))
    assert values[-1] < values[0]


def test_shape_mismatch():
    with pytest.raises(ShapeMismatchException):
        s_measure(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ShapeMismatchException):
        mae(np.zeros(16), np.zeros(16))


def test_report_round_trip(tmp_path, pairs):
    report = evaluate_dataset(
        [(f"{i:05d}", pred, gt) for i, (pred, gt) in enumerate(pairs[:3])]
    )
    assert list(report.scores.columns) == list(METRIC_NAMES)
    report.write(tmp_path)
    loaded = EvalReport.read(tmp_path)
    assert list(loaded.scores.index) == ["00000", "00001", "00002"]
    pd.testing.assert_frame_equal(loaded.scores, report.scores, check_names=False)
    assert loaded.summary() == report.summary()


def test_report_means_ignore_order(pairs):
    rows = [(f"{i}", p, g) for i, (p, g) in enumerate(pairs)]
    forward = evaluate_dataset(rows).means
    backward = evaluate_dataset(rows[::-1]).means
    assert forward.to_dict() == backward.to_dict()


def test_threaded_evaluation_matches_serial(pairs):
    rows = [(f"{i}", p, g) for i, (p, g) in enumerate(pairs[:6])]
    serial = evaluate_dataset(rows)
    threaded = evaluate_dataset(rows, max_workers=3)
    pd.testing.assert_frame_equal(serial.scores, threaded.scores)


def test_missing_ground_truth_is_skipped(pairs):
    pred, gt = pairs[0]
    with pytest.warns(UserWarning, match="Skipping b"):
        report = evaluate_dataset([("a", pred, gt), ("b", pred, None)])
    assert report.skipped == 1
    assert list(report.scores.index) == ["a"]
    assert report.summary()["count"] == 1


def test_nothing_to_evaluate():
    with pytest.raises(DataException, match="Nothing to evaluate"):
        with pytest.warns(UserWarning):
            evaluate_dataset([("a", None, None)])
