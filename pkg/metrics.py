"""
Metrics Module - MPJPE, Procrustes-aligned P-MPJPE, PCK and AUC
"""
import json
import logging
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence

import numpy as np

from dcgct import PCK_THRESHOLD_MM, AUC_THRESHOLDS_MM, ShapeError, NumericalError

log = logging.getLogger("dcgct.metrics")


def _check_pair(pred: np.ndarray, gt: np.ndarray):
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    if pred.shape[-1] != 3:
        raise ShapeError(f"poses must end in 3 coordinates, got {pred.shape}")
    return pred, gt


def joint_errors(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Euclidean error per (sample, joint)"""
    pred, gt = _check_pair(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Protocol #1: mean per-joint Euclidean distance, no alignment"""
    return float(np.mean(joint_errors(pred, gt)))


def procrustes_align(pred: np.ndarray, gt: np.ndarray, scale: bool = True) -> np.ndarray:
    """
    Align one pose to the ground truth with the least-squares similarity transform

    Args:
        pred: [N, 3] predicted joints
        gt: [N, 3] ground-truth joints
        scale: Include uniform scale (off: rotation + translation only)

    Returns:
        s·R·(pred - centroid) + gt centroid, [N, 3]
    """
    pred, gt = _check_pair(pred, gt)
    if pred.ndim != 2 or pred.shape[0] < 3:
        raise ShapeError(f"procrustes_align expects [N>=3, 3], got {pred.shape}")
    mu_pred = pred.mean(axis=0)
    mu_gt = gt.mean(axis=0)
    x = pred - mu_pred
    y = gt - mu_gt
    if np.sum(y ** 2) < 1e-12:
        raise NumericalError("degenerate ground truth: all joints coincide")

    h = x.T @ y
    u, s, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    correction = np.diag([1.0, 1.0, d])
    r = vt.T @ correction @ u.T

    norm_x = np.sum(x ** 2)
    factor = 1.0
    if scale and norm_x > 0:
        factor = np.sum(s * np.diag(correction)) / norm_x
    return factor * x @ r.T + mu_gt


def p_mpjpe(pred: np.ndarray, gt: np.ndarray, scale: bool = True) -> float:
    """Protocol #2: MPJPE after per-sample Procrustes alignment"""
    pred, gt = _check_pair(pred, gt)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    aligned = np.stack([procrustes_align(p, g, scale) for p, g in zip(pred, gt)])
    return mpjpe(aligned, gt)


def pck(pred: np.ndarray, gt: np.ndarray, threshold_mm: float = PCK_THRESHOLD_MM) -> float:
    """Percentage of (sample, joint) pairs with error strictly below threshold"""
    if threshold_mm <= 0:
        raise ShapeError("pck threshold must be > 0")
    return float(100.0 * np.mean(joint_errors(pred, gt) < threshold_mm))


def auc(pred: np.ndarray, gt: np.ndarray, thresholds_mm: Sequence[float] = AUC_THRESHOLDS_MM) -> float:
    """Mean PCK over a threshold grid (default 5, 10, ..., 150 mm)"""
    errors = joint_errors(pred, gt)
    return float(np.mean([100.0 * np.mean(errors < t) for t in thresholds_mm]))


@dataclass
class MetricReport:
    mpjpe_mm: float
    p_mpjpe_mm: Optional[float]
    pck_percent: float
    auc_percent: float
    sample_count: int
    per_action: Dict[str, Dict[str, float]] = field(default_factory=dict)
    per_joint_mpjpe_mm: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        data = asdict(self)
        if self.p_mpjpe_mm is None:
            del data["p_mpjpe_mm"]
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def evaluate(pred: np.ndarray, gt: np.ndarray, actions: Optional[Sequence[str]] = None,
             protocol: str = "all", scale: bool = True,
             thresholds_mm: Sequence[float] = AUC_THRESHOLDS_MM) -> MetricReport:
    """
    Build a MetricReport over a prediction set

    Args:
        pred, gt: [B, N, 3] millimeters
        actions: Optional per-sample action labels for the breakdown
        protocol: "1" (no P-MPJPE), "2" or "all"
        scale: Similarity (True) or rigid alignment for P-MPJPE
        thresholds_mm: AUC grid
    """
    pred, gt = _check_pair(pred, gt)
    with_pa = protocol in ("2", "all")

    def summarize(p, g):
        row = {
            "mpjpe_mm": mpjpe(p, g),
            "pck_percent": pck(p, g),
            "auc_percent": auc(p, g, thresholds_mm),
            "sample_count": int(len(p)),
        }
        if with_pa:
            row["p_mpjpe_mm"] = p_mpjpe(p, g, scale)
        return row

    overall = summarize(pred, gt)
    per_action = {}
    if actions is not None:
        labels = np.asarray(actions)
        for action in sorted(set(actions)):
            mask = labels == action
            per_action[action] = summarize(pred[mask], gt[mask])

    return MetricReport(
        mpjpe_mm=overall["mpjpe_mm"],
        p_mpjpe_mm=overall.get("p_mpjpe_mm"),
        pck_percent=overall["pck_percent"],
        auc_percent=overall["auc_percent"],
        sample_count=overall["sample_count"],
        per_action=per_action,
        per_joint_mpjpe_mm=joint_errors(pred, gt).mean(axis=0).tolist(),
    )


def format_action_table(report: MetricReport) -> str:
    """Plain-text table: one column per action plus Avg, one row per metric"""
    actions = sorted(report.per_action)
    columns = actions + ["Avg"]
    rows = [("MPJPE", "mpjpe_mm", report.mpjpe_mm)]
    if report.p_mpjpe_mm is not None:
        rows.append(("P-MPJPE", "p_mpjpe_mm", report.p_mpjpe_mm))
    rows += [("PCK", "pck_percent", report.pck_percent), ("AUC", "auc_percent", report.auc_percent)]

    width = max([8] + [len(a) for a in columns]) + 1
    lines = ["Protocol".ljust(10) + "".join(c.rjust(width) for c in columns)]
    for label, key, avg in rows:
        cells = [f"{report.per_action[a][key]:.1f}" for a in actions] + [f"{avg:.1f}"]
        lines.append(label.ljust(10) + "".join(c.rjust(width) for c in cells))
    return "\n".join(lines)
