"""Pose error metrics (millimetres) and the evaluation report."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

PCK_THRESHOLD = 150.0
AUC_THRESHOLDS = np.arange(5.0, 150.0 + 1e-9, 5.0)


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ValueError(f"pose shapes differ or are not (..., J, 3): {pred.shape} vs {gt.shape}")
    if pred.size == 0:
        raise ValueError("empty pose input")
    return pred, gt


def joint_errors(pred, gt) -> np.ndarray:
    pred, gt = _check(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt) -> float:
    """Mean per-joint Euclidean error, averaged over joints and poses."""
    return float(np.mean(joint_errors(pred, gt)))


def procrustes_align(pred, gt, scale: bool = True) -> np.ndarray:
    """Align one (J, 3) pose to ``gt`` by rotation, translation and (optionally) uniform scale."""
    pred, gt = _check(pred, gt)
    mu_p, mu_g = pred.mean(0), gt.mean(0)
    p, g = pred - mu_p, gt - mu_g
    norm_g = np.sqrt(np.sum(g * g))
    if norm_g < 1e-12:
        raise ValueError("ground-truth pose is degenerate (all joints coincide)")
    norm_p = np.sqrt(np.sum(p * p))
    if norm_p < 1e-12:
        return np.broadcast_to(mu_g, gt.shape).copy()
    u, s, vt = np.linalg.svd(g.T @ p)
    d = np.sign(np.linalg.det(u @ vt))
    s[-1] *= d
    u[:, -1] *= d
    rot = u @ vt  # maps centred pred onto centred gt
    c = s.sum() / (norm_p ** 2) if scale else 1.0
    return c * p @ rot.T + mu_g


def p_mpjpe(pred, gt, scale: bool = True) -> float:
    """MPJPE after per-pose Procrustes alignment."""
    pred, gt = _check(pred, gt)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    aligned = np.array([procrustes_align(p, g, scale) for p, g in zip(pred, gt)])
    return mpjpe(aligned, gt)


def pck(pred, gt, threshold: float = PCK_THRESHOLD) -> float:
    """Percentage of joints with error strictly below ``threshold`` mm."""
    return float(100.0 * np.mean(joint_errors(pred, gt) < threshold))


def auc(pred, gt, thresholds=AUC_THRESHOLDS) -> float:
    """Mean PCK over the threshold sweep (a percentage)."""
    err = joint_errors(pred, gt)
    return float(np.mean([100.0 * np.mean(err < t) for t in thresholds]))


def per_sample(pred, gt, scale: bool = True) -> dict:
    """All four metrics for each pose of a (n, J, 3) batch."""
    pred, gt = _check(pred, gt)
    err = joint_errors(pred, gt)
    aligned = np.array([procrustes_align(p, g, scale) for p, g in zip(pred, gt)])
    return {
        "mpjpe": err.mean(-1),
        "p_mpjpe": joint_errors(aligned, gt).mean(-1),
        "pck": 100.0 * np.mean(err < PCK_THRESHOLD, axis=-1),
        "auc": np.mean([100.0 * np.mean(err < t, axis=-1) for t in AUC_THRESHOLDS], axis=0),
    }


@dataclass
class EvalReport:
    mpjpe: float
    p_mpjpe: float
    pck: float
    auc: float
    count: int
    per_sample: dict = field(default_factory=dict)
    pck_threshold: float = PCK_THRESHOLD
    auc_thresholds: list = field(default_factory=lambda: AUC_THRESHOLDS.tolist())
    rigid_only: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_sample"] = {k: np.asarray(v).tolist() for k, v in self.per_sample.items()}
        return d


def evaluate(pred, gt, rigid_only: bool = False) -> EvalReport:
    """Aggregates are means of the per-sample values, so they agree by construction."""
    pred, gt = _check(pred, gt)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    ps = per_sample(pred, gt, scale=not rigid_only)
    agg = {k: float(np.mean(v)) for k, v in ps.items()}
    return EvalReport(agg["mpjpe"], agg["p_mpjpe"], agg["pck"], agg["auc"], int(len(pred)), ps,
                      rigid_only=rigid_only)
