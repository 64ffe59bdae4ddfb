import json

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from dcgct import NumericalError, ShapeError
from metrics import auc, evaluate, format_action_table, mpjpe, p_mpjpe, pck, procrustes_align


def _rotation(seed):
    return Rotation.random(random_state=seed).as_matrix()


def test_mpjpe_hand_example():
    gt = np.zeros((1, 2, 3))
    pred = gt.copy()
    pred[0, 0] = [3.0, 4.0, 0.0]
    assert mpjpe(pred, gt) == pytest.approx(2.5)
    assert mpjpe(gt, gt) == 0.0


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        mpjpe(np.zeros((2, 17, 3)), np.zeros((2, 16, 3)))


def test_alignment_inverts_similarity(rng):
    gt = rng.normal(0, 300, size=(17, 3))
    pred = 2.0 * gt @ _rotation(1).T + np.array([50.0, -20.0, 900.0])
    assert_allclose(procrustes_align(pred, gt), gt, atol=1e-6)
    assert p_mpjpe(pred, gt) < 1e-6


def test_p_mpjpe_ignores_extra_rigid_motion(rng):
    gt = rng.normal(0, 300, size=(4, 17, 3))
    pred = gt + rng.normal(0, 30, size=gt.shape)
    moved = pred @ _rotation(2).T + np.array([100.0, 0.0, -40.0])
    assert p_mpjpe(moved, gt) == pytest.approx(p_mpjpe(pred, gt), abs=1e-6)


def test_rigid_alignment_is_optimal(rng):
    gt = rng.normal(0, 300, size=(17, 3))
    pred = gt @ _rotation(3).T + rng.normal(0, 40, size=gt.shape)
    aligned = procrustes_align(pred, gt, scale=False)
    aligned_sse = np.sum((aligned - gt) ** 2)
    assert aligned_sse <= np.sum((pred - gt) ** 2)

    x = pred - pred.mean(axis=0)
    y = gt - gt.mean(axis=0)

    def sse(rotvec):
        return np.sum((x @ Rotation.from_rotvec(rotvec).as_matrix().T - y) ** 2)

    best = min((minimize(sse, start, method="BFGS") for start in rng.normal(0, 1.5, size=(6, 3))),
               key=lambda r: r.fun)
    assert aligned_sse <= best.fun * (1.0 + 1e-6)
    assert aligned_sse == pytest.approx(best.fun, rel=1e-6)


def test_reflection_is_not_used(rng):
    gt = rng.normal(0, 300, size=(17, 3))
    mirrored = gt * np.array([-1.0, 1.0, 1.0])
    aligned = procrustes_align(mirrored, gt)
    x = aligned - aligned.mean(axis=0)
    m = mirrored - mirrored.mean(axis=0)
    r, _ = np.linalg.lstsq(m, x, rcond=None)[:2]
    assert np.linalg.det(r) > 0


def test_degenerate_ground_truth():
    with pytest.raises(NumericalError):
        procrustes_align(np.ones((17, 3)), np.zeros((17, 3)))


def test_pck_threshold_is_strict():
    gt = np.zeros((1, 4, 3))
    pred = gt.copy()
    pred[0, :, 0] = [0.0, 149.0, 150.0, 151.0]
    assert pck(pred, gt) == pytest.approx(50.0)


def test_auc_bounds():
    gt = np.zeros((2, 17, 3))
    assert auc(gt, gt) == 100.0
    far = gt + 1000.0
    assert auc(far, gt) == 0.0
    half = gt.copy()
    half[..., 0] = 77.5
    # 15 of the 30 thresholds (80..150) lie above the error
    assert auc(half, gt) == pytest.approx(50.0)


def test_evaluate_breakdown(rng):
    gt = rng.normal(0, 300, size=(6, 17, 3))
    pred = gt + rng.normal(0, 20, size=gt.shape)
    actions = ["walk", "walk", "sit", "sit", "sit", "eat"]
    report = evaluate(pred, gt, actions, protocol="2")
    assert set(report.per_action) == {"walk", "sit", "eat"}
    assert report.per_action["sit"]["sample_count"] == 3
    assert len(report.per_joint_mpjpe_mm) == 17
    data = json.loads(report.to_json())
    assert "p_mpjpe_mm" in data
    assert {"mpjpe_mm", "pck_percent", "auc_percent", "sample_count"} <= set(data)
    table = format_action_table(report)
    assert "walk" in table and "P-MPJPE" in table


def test_protocol_one_omits_alignment(rng):
    gt = rng.normal(0, 300, size=(3, 17, 3))
    report = evaluate(gt, gt, protocol="1")
    assert "p_mpjpe_mm" not in report.to_dict()
    assert report.mpjpe_mm == 0.0
    assert report.pck_percent == 100.0
