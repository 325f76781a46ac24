"""Pose, segmentation and classification metrics."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)

PI_6 = math.pi / 6
PI_18 = math.pi / 18


def _check_rotation(R: np.ndarray, name: str) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
        raise ValueError(f"{name} is not a rotation matrix")
    return R


def pose_error(R_pred, R_gt) -> float:
    """Geodesic distance ``||logm(R_pred^T R_gt)||_F / sqrt(2)`` in radians.

    For a rotation by angle phi the log has Frobenius norm ``sqrt(2) phi``, so
    the distance is the relative rotation angle, computed stably from the
    trace (with an antisymmetric-part correction near 0).
    """
    Rp = _check_rotation(R_pred, "R_pred")
    Rg = _check_rotation(R_gt, "R_gt")
    M = Rp.T @ Rg
    c = (np.trace(M) - 1.0) / 2.0
    s = np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]]) / 2.0
    return float(math.atan2(s, c))


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = (a | b).sum()
    return 1.0 if union == 0 else float((a & b).sum() / union)


def precision(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    n = pred.sum()
    return 1.0 if n == 0 else float((pred & gt).sum() / n)


@dataclass
class SampleResult:
    id: str
    occlusion: int
    pose_error: float
    correct_class: bool
    amodal_iou: float = math.nan
    visible_iou: float = math.nan
    visible_precision: float = math.nan


@dataclass
class MetricReport:
    n: int
    acc_pi_6: float
    acc_pi_18: float
    median_error: float
    amodal_iou: float
    visible_iou: float
    visible_precision: float
    top1: float
    missing: list = field(default_factory=list)
    by_occlusion: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        """Flat rows (overall first, then per occlusion level) for CSV output."""
        keys = ("n", "acc_pi_6", "acc_pi_18", "median_error", "amodal_iou", "visible_iou",
                "visible_precision", "top1")
        out = [{"level": "all", **{k: getattr(self, k) for k in keys}}]
        for lvl in sorted(self.by_occlusion):
            sub = self.by_occlusion[lvl]
            out.append({"level": f"L{lvl}", **{k: getattr(sub, k) for k in keys}})
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["by_occlusion"] = {k: v.to_dict() for k, v in self.by_occlusion.items()}
        return d


def _mean(xs) -> float:
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.mean(xs)) if xs else math.nan


def summarize(results: list[SampleResult], missing=(), breakdown: bool = True) -> MetricReport:
    results = sorted(results, key=lambda r: r.id)
    errs = np.array([r.pose_error for r in results])
    rep = MetricReport(
        n=len(results),
        acc_pi_6=float((errs < PI_6).mean()) if len(errs) else math.nan,
        acc_pi_18=float((errs < PI_18).mean()) if len(errs) else math.nan,
        median_error=float(np.median(errs)) if len(errs) else math.nan,
        amodal_iou=_mean([r.amodal_iou for r in results]),
        visible_iou=_mean([r.visible_iou for r in results]),
        visible_precision=_mean([r.visible_precision for r in results if r.occlusion > 0]),
        top1=float(np.mean([r.correct_class for r in results])) if results else math.nan,
        missing=sorted(missing),
    )
    if breakdown:
        for lvl in sorted({r.occlusion for r in results}):
            rep.by_occlusion[lvl] = summarize([r for r in results if r.occlusion == lvl], breakdown=False)
    return rep


def evaluate(predictions: list[dict], manifest, pred_masks=None, gt_masks=None) -> MetricReport:
    """Score prediction records against manifest records (matched by ``id``).

    ``predictions`` carry ``class`` and a ``rotation`` matrix (or pose angles
    in degrees).  ``pred_masks`` / ``gt_masks`` optionally map ids to
    ``(amodal, visible)`` boolean masks.  Records without a prediction are
    listed in ``missing`` and excluded.
    """
    from .camera import pose_to_extrinsics

    by_id = {}
    for p in predictions:
        by_id[str(p["id"])] = p
    results, missing = [], []
    for rec in manifest:
        p = by_id.get(rec.id)
        if p is None:
            missing.append(rec.id)
            continue
        if "rotation" in p:
            Rp = np.asarray(p["rotation"], dtype=np.float64)
        else:
            Rp = pose_to_extrinsics(math.radians(p["azimuth"]), math.radians(p["elevation"]),
                                    math.radians(p["theta"]), 1.0)[0]
        Rg = pose_to_extrinsics(*rec.pose)[0]
        res = SampleResult(rec.id, rec.occlusion, pose_error(Rp, Rg), p["class"] == rec.cls)
        if pred_masks is not None and gt_masks is not None and rec.id in pred_masks and rec.id in gt_masks:
            pa, pv = pred_masks[rec.id]
            ga, gv = gt_masks[rec.id]
            res.amodal_iou = iou(pa, ga)
            res.visible_iou = iou(pv, gv)
            res.visible_precision = precision(pv, gv)
        results.append(res)
    if missing:
        log.warning("%d manifest records have no prediction", len(missing))
    return summarize(results, missing)
