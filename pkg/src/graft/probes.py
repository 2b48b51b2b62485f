"""Geometric probes: nearest-neighbor queries anchored on the posed body.

A probe at 3D anchor p retrieves the closest scene point p*, the offset
v_s = p* - p, the scene normal n* and the anchor expressed in the body frame
(inverse global orientation about the posed root joint).

Probe layout for one human (58 anchors):
    [0:21)   body joints 1..21
    [21:26)  left-hand distal joints
    [26:31)  right-hand distal joints
    [31:58)  surface probe vertices (27)
"""

from dataclasses import dataclass

import numpy as np

from .body import N_BODY_JOINTS, N_HAND_PROBES, N_SURFACE_PROBES
from .rotation import rot6d_to_matrix

N_PROBES = N_BODY_JOINTS + 2 * N_HAND_PROBES + N_SURFACE_PROBES
SURFACE_SLICE = slice(N_BODY_JOINTS + 2 * N_HAND_PROBES, N_PROBES)


@dataclass(frozen=True)
class ProbeRecord:
    """One geometric probe; all vectors camera-frame meters except body_relative."""

    anchor: np.ndarray  # (3,)
    nearest: np.ndarray  # (3,)
    offset: np.ndarray  # (3,) nearest - anchor
    normal: np.ndarray  # (3,) unit
    body_relative: np.ndarray  # (3,)
    distance: float
    point_id: int


@dataclass(frozen=True)
class ProbeSet:
    """Batched probes for all 58 anchors of one human."""

    anchors: np.ndarray  # (P, 3)
    nearest: np.ndarray  # (P, 3)
    offsets: np.ndarray  # (P, 3)
    normals: np.ndarray  # (P, 3)
    body_relative: np.ndarray  # (P, 3)
    distances: np.ndarray  # (P,)
    point_ids: np.ndarray  # (P,)
    root_rotation: np.ndarray  # (3, 3) world rotation of the root joint
    root_joint: np.ndarray  # (3,) posed root joint

    def record(self, i):
        return ProbeRecord(
            anchor=self.anchors[i],
            nearest=self.nearest[i],
            offset=self.offsets[i],
            normal=self.normals[i],
            body_relative=self.body_relative[i],
            distance=float(self.distances[i]),
            point_id=int(self.point_ids[i]),
        )


def body_frame(anchors, root_rotation, root_joint):
    return (anchors - root_joint) @ root_rotation  # R^T x as row vectors


def probe(index, mesh, state, anchor_point):
    """Single geometric probe at anchor_point.

    The body frame is the inverse global orientation about the posed root
    joint mesh.joints[0].
    """
    root_rotation = rot6d_to_matrix(state.global_orient)
    anchor = np.asarray(anchor_point, dtype=np.float64)
    nearest, normal, distance, point_id = index.nearest(anchor)
    return ProbeRecord(
        anchor=anchor,
        nearest=nearest,
        offset=nearest - anchor,
        normal=normal,
        body_relative=body_frame(anchor[None], root_rotation, mesh.joints[0])[0],
        distance=distance,
        point_id=point_id,
    )


def anchor_points(model, mesh):
    """(58, 3) probe anchors in the fixed layout."""
    return np.concatenate(
        [
            mesh.joints[model.body_joint_ids],
            mesh.joints[model.left_distal_ids],
            mesh.joints[model.right_distal_ids],
            mesh.vertices[model.surface_probe_ids],
        ],
        axis=0,
    )


def compute_probes(index, model, mesh, root_rotation):
    """All probes for one posed human against the scene index."""
    anchors = anchor_points(model, mesh)
    nearest, normals, distances, ids = index.nearest_batch(anchors)
    root_joint = mesh.joints[0]
    return ProbeSet(
        anchors=anchors,
        nearest=nearest,
        offsets=nearest - anchors,
        normals=normals,
        body_relative=body_frame(anchors, root_rotation, root_joint),
        distances=distances,
        point_ids=ids,
        root_rotation=root_rotation,
        root_joint=root_joint,
    )


def probes_vjp(model, probes, d_offsets, d_body_relative):
    """Backpropagate probe gradients onto the mesh.

    The retrieved scene point and normal are piecewise constant in the
    anchor, so only v_s = p* - p and the body-frame coordinates carry
    gradient.

    Returns:
        (d_vertices (V,3), d_joints (J,3), d_root_rotation (3,3))
    """
    rot = probes.root_rotation
    # body_relative = (a - j0) @ R  =>  d_a += d_brel @ R^T
    d_anchors = -d_offsets + d_body_relative @ rot.T
    rel = probes.anchors - probes.root_joint
    d_rot = rel.T @ d_body_relative
    d_root = -(d_body_relative @ rot.T).sum(axis=0)

    d_vertices = np.zeros((model.n_vertices, 3))
    d_joints = np.zeros((model.n_joints, 3))
    d_joints[0] += d_root
    np.add.at(d_joints, model.body_joint_ids, d_anchors[:N_BODY_JOINTS])
    np.add.at(
        d_joints,
        model.left_distal_ids,
        d_anchors[N_BODY_JOINTS : N_BODY_JOINTS + N_HAND_PROBES],
    )
    np.add.at(
        d_joints,
        model.right_distal_ids,
        d_anchors[N_BODY_JOINTS + N_HAND_PROBES : N_BODY_JOINTS + 2 * N_HAND_PROBES],
    )
    np.add.at(d_vertices, model.surface_probe_ids, d_anchors[SURFACE_SLICE])
    return d_vertices, d_joints, d_rot


# ---------------------------------------------------------------------------
# learnable Fourier features


class FourierEncoder:
    """enc(p) = [sin(B p); cos(B p); p], output length 2 * n_freqs + 3."""

    def __init__(self, frequency_matrix):
        self.b = np.asarray(frequency_matrix, dtype=np.float64)
        if self.b.ndim != 2 or self.b.shape[1] != 3:
            raise ValueError("frequency matrix must be (n_freqs, 3)")

    @property
    def n_freqs(self):
        return self.b.shape[0]

    @property
    def out_dim(self):
        return 2 * self.n_freqs + 3

    def encode(self, p):
        """(..., 3) -> (..., 2F + 3); raw input rides in the tail slice."""
        phase = p @ self.b.T
        return np.concatenate([np.sin(phase), np.cos(phase), p], axis=-1), phase

    def encode_vjp(self, p, phase, d_out):
        """Returns (d_p, d_frequency_matrix)."""
        f = self.n_freqs
        d_sin = d_out[..., :f]
        d_cos = d_out[..., f : 2 * f]
        d_raw = d_out[..., 2 * f :]
        d_phase = np.cos(phase) * d_sin - np.sin(phase) * d_cos
        d_p = d_phase @ self.b + d_raw
        flat_phase = d_phase.reshape(-1, f)
        flat_p = p.reshape(-1, 3)
        return d_p, flat_phase.T @ flat_p
