"""Interaction and pose metrics.

Contact precision/recall/F1 over the contact vertex set, plus two continuous
displacement metrics computed from each contact vertex's nearest-scene vector
d(v) = p* - p: the weighted mean Euclidean error between predicted and GT
vectors (reported in mm) and the weighted mean angular error (degrees).
Weights are the per-vertex mixed-Voronoi areas so dense regions do not
dominate. PA-MPJPE is the mean joint error after optimal similarity
alignment.
"""

from dataclasses import dataclass

import numpy as np

from .errors import AllDegenerate, DegenerateConfiguration, LengthMismatch

DEFAULT_CONTACT_TAU = 0.05  # meters
DEGENERATE_NORM = 1e-9


@dataclass(frozen=True)
class ContactPRF:
    precision: float
    recall: float
    f1: float
    no_predicted_positives: bool = False
    no_gt_positives: bool = False


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    v2s_mm: float
    d2s_deg: float
    pa_mpjpe_mm: float
    contact_tau_m: float = DEFAULT_CONTACT_TAU
    no_predicted_positives: bool = False
    no_gt_positives: bool = False

    def to_dict(self):
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "v2s_mm": self.v2s_mm,
            "d2s_deg": self.d2s_deg,
            "pa_mpjpe_mm": self.pa_mpjpe_mm,
            "contact_tau_m": self.contact_tau_m,
            "no_predicted_positives": self.no_predicted_positives,
            "no_gt_positives": self.no_gt_positives,
        }


def contact_displacements(mesh, model, index):
    """(C, 3) vertex-to-nearest-scene vectors and (C,) distances."""
    verts = mesh.vertices[model.contact_vertex_ids]
    nearest, _, dist, _ = index.nearest_batch(verts)
    return nearest - verts, dist


def contact_labels(mesh, model, index, tau=DEFAULT_CONTACT_TAU):
    """Boolean contact flag per contact vertex: NN distance < tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    _, dist = contact_displacements(mesh, model, index)
    return dist < tau


def contact_prf(pred_labels, gt_labels):
    """Precision / recall / F1 of predicted vs GT contact labels."""
    pred = np.asarray(pred_labels, dtype=bool)
    gt = np.asarray(gt_labels, dtype=bool)
    if pred.shape != gt.shape:
        raise LengthMismatch(f"{pred.shape} vs {gt.shape}")
    tp = int(np.sum(pred & gt))
    fp = int(np.sum(pred & ~gt))
    fn = int(np.sum(~pred & gt))
    no_pred = tp + fp == 0
    no_gt = tp + fn == 0
    precision = 0.0 if no_pred else tp / (tp + fp)
    recall = 0.0 if no_gt else tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0.0 else 2 * precision * recall / (precision + recall)
    return ContactPRF(
        precision=precision,
        recall=recall,
        f1=f1,
        no_predicted_positives=no_pred,
        no_gt_positives=no_gt,
    )


def contact_weights(model):
    """Per contact vertex mixed-Voronoi area weights (m^2)."""
    return model.vertex_areas[model.contact_vertex_ids]


def v2s(pred_disp, gt_disp, weights):
    """Weighted mean Euclidean error between displacement vectors, in mm."""
    pred = np.asarray(pred_disp, dtype=np.float64)
    gt = np.asarray(gt_disp, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if pred.shape != gt.shape or len(w) != len(pred):
        raise LengthMismatch("displacement/weight lengths disagree")
    err = np.linalg.norm(pred - gt, axis=1)
    return 1000.0 * float(np.sum(w * err) / np.sum(w))


def d2s(pred_disp, gt_disp, weights):
    """Weighted mean angular error between displacement vectors, in degrees.

    Vectors shorter than 1e-9 on either side are excluded from both the
    numerator and the weight sum.

    Raises:
        AllDegenerate: every vertex was excluded.
    """
    pred = np.asarray(pred_disp, dtype=np.float64)
    gt = np.asarray(gt_disp, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if pred.shape != gt.shape or len(w) != len(pred):
        raise LengthMismatch("displacement/weight lengths disagree")
    pn = np.linalg.norm(pred, axis=1)
    gn = np.linalg.norm(gt, axis=1)
    keep = (pn >= DEGENERATE_NORM) & (gn >= DEGENERATE_NORM)
    if not np.any(keep):
        raise AllDegenerate("all displacement vectors are (near-)zero")
    # atan2(|u x v|, u.v) instead of arccos of the normalized dot: exact 0 for
    # identical vectors and exact 180 for antipodal ones (arccos loses ~1e-7
    # degrees to rounding near cos = +-1)
    dot = np.einsum("ij,ij->i", pred[keep], gt[keep])
    cross = np.linalg.norm(np.cross(pred[keep], gt[keep]), axis=1)
    ang = np.degrees(np.arctan2(cross, dot))
    return float(np.sum(w[keep] * ang) / np.sum(w[keep]))


def pa_mpjpe(pred_joints, gt_joints):
    """Mean per-joint error after optimal similarity (Procrustes) alignment, mm.

    Raises:
        DegenerateConfiguration: fewer than 3 joints or (near-)collinear set.
    """
    x = np.asarray(pred_joints, dtype=np.float64)
    y = np.asarray(gt_joints, dtype=np.float64)
    if x.shape != y.shape:
        raise LengthMismatch(f"{x.shape} vs {y.shape}")
    n = len(x)
    if n < 3:
        raise DegenerateConfiguration("need at least 3 joints")
    mx = x.mean(axis=0)
    my = y.mean(axis=0)
    xc = x - mx
    yc = y - my
    cov = xc.T @ yc / n
    u, d, vt = np.linalg.svd(cov)
    var_x = float(np.sum(xc * xc)) / n
    if var_x < 1e-24 or d[1] < 1e-12 * max(d[0], 1e-300):
        raise DegenerateConfiguration("joint set is degenerate (collinear or a point)")
    sign = np.ones(3)
    if np.linalg.det(u @ vt) < 0:
        sign[2] = -1.0
    rot = (u * sign) @ vt
    scale = float(np.sum(d * sign)) / var_x
    aligned = scale * xc @ rot + my
    return 1000.0 * float(np.mean(np.linalg.norm(aligned - y, axis=1)))


def evaluate(
    pred_mesh,
    gt_mesh,
    model,
    pred_index,
    gt_index,
    tau=DEFAULT_CONTACT_TAU,
):
    """Full EvalReport for one human (pred vs GT, each against its scene)."""
    pred_disp, pred_dist = contact_displacements(pred_mesh, model, pred_index)
    gt_disp, gt_dist = contact_displacements(gt_mesh, model, gt_index)
    prf = contact_prf(pred_dist < tau, gt_dist < tau)
    w = contact_weights(model)
    return EvalReport(
        precision=prf.precision,
        recall=prf.recall,
        f1=prf.f1,
        v2s_mm=v2s(pred_disp, gt_disp, w),
        d2s_deg=d2s(pred_disp, gt_disp, w),
        pa_mpjpe_mm=pa_mpjpe(pred_mesh.joints, gt_mesh.joints),
        contact_tau_m=tau,
        no_predicted_positives=prf.no_predicted_positives,
        no_gt_positives=prf.no_gt_positives,
    )
