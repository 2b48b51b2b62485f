"""Parametric articulated body: shape blendshapes + linear blend skinning.

The state is {rotations in 6D, translation, shape}. Rotation blocks cover one
root (global orientation), 21 body joints and 2 x 15 hand joints; any extra
joints in the model file (declared via joint_roles) stay frozen at identity.

All forward operations have paired VJP functions so the training rollout can
backpropagate through the mesh without an autodiff framework.
"""

from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .errors import (
    DimensionMismatch,
    MissingTensor,
    NonPositiveScale,
    RankDeficientBlendshapes,
)
from .rotation import identity_rot6d, rot6d_to_matrix, rot6d_to_matrix_vjp

N_BODY_JOINTS = 21
N_HAND_JOINTS = 15
N_SHAPE = 10
N_SURFACE_PROBES = 27
N_HAND_PROBES = 5

ROLE_ROOT = 0
ROLE_BODY = 1
ROLE_LEFT_HAND = 2
ROLE_RIGHT_HAND = 3
ROLE_FROZEN = 4

MANDATORY_MODEL_TENSORS = (
    "template_vertices",
    "shape_dirs",
    "joint_regressor",
    "parents",
    "skin_weights",
    "faces",
    "contact_vertex_ids",
    "surface_probe_ids",
)


# ---------------------------------------------------------------------------
# template geometry helpers


def mixed_voronoi_areas(vertices, faces):
    """Per-vertex mixed-Voronoi surface area of a triangle mesh (m^2).

    Non-obtuse triangles distribute the Voronoi (cotangent) areas; obtuse
    triangles give half the area to the obtuse corner and a quarter to the
    others, so the per-triangle contributions always sum to the triangle area.
    """
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    p0, p1, p2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    e0 = p2 - p1  # edge opposite vertex 0
    e1 = p0 - p2
    e2 = p1 - p0
    l0 = np.einsum("ij,ij->i", e0, e0)
    l1 = np.einsum("ij,ij->i", e1, e1)
    l2 = np.einsum("ij,ij->i", e2, e2)
    double_area = np.linalg.norm(np.cross(e2, -e1), axis=1)
    area = 0.5 * double_area
    safe = np.maximum(double_area, 1e-300)
    # cot(angle at vertex i) = dot of adjacent edges / (2 * area)
    cot0 = np.einsum("ij,ij->i", -e1, e2) / safe
    cot1 = np.einsum("ij,ij->i", -e2, e0) / safe
    cot2 = np.einsum("ij,ij->i", -e0, e1) / safe

    contrib = np.empty((len(f), 3))
    contrib[:, 0] = (l1 * cot1 + l2 * cot2) / 8.0
    contrib[:, 1] = (l2 * cot2 + l0 * cot0) / 8.0
    contrib[:, 2] = (l0 * cot0 + l1 * cot1) / 8.0

    obtuse_at = np.full(len(f), -1, dtype=np.int64)
    for i, cot in enumerate((cot0, cot1, cot2)):
        obtuse_at[cot < 0.0] = i
    is_obtuse = obtuse_at >= 0
    if np.any(is_obtuse):
        rows = np.where(is_obtuse)[0]
        contrib[rows] = area[rows, None] / 4.0
        contrib[rows, obtuse_at[rows]] = area[rows] / 2.0

    out = np.zeros(len(v))
    np.add.at(out, f.ravel(), contrib.ravel())
    return out


def farthest_point_sample(points, k, start=0):
    """Deterministic farthest-point sampling; returns k vertex indices."""
    pts = np.asarray(points, dtype=np.float64)
    chosen = [int(start)]
    dist = np.linalg.norm(pts - pts[start], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))
    return np.array(chosen, dtype=np.int64)


def compute_template_offset(template_vertices, shape_dirs):
    """Least-squares projection of the template into shape space.

    Solves (S S^T) c = S t for the flattened template t, i.e. the coefficient
    vector whose blendshape combination best reproduces the template.

    Raises:
        RankDeficientBlendshapes: Gram matrix condition number >= 1e12.
    """
    t = np.asarray(template_vertices, dtype=np.float64).reshape(-1)
    s = np.asarray(shape_dirs, dtype=np.float64).reshape(len(shape_dirs), -1)
    if s.shape[1] != t.shape[0]:
        raise DimensionMismatch("shape_dirs and template_vertices disagree")
    gram = s @ s.T
    if np.linalg.cond(gram) >= 1e12:
        raise RankDeficientBlendshapes("blendshape Gram matrix is ill-conditioned")
    return np.linalg.solve(gram, s @ t)


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class BodyModel:
    """Immutable body model; safe to share across threads."""

    template_vertices: np.ndarray  # (V, 3) meters
    shape_dirs: np.ndarray  # (10, V, 3)
    joint_regressor: np.ndarray  # (J, V)
    parents: np.ndarray  # (J,), parents[0] == -1
    skin_weights: np.ndarray  # (V, J) convex rows
    faces: np.ndarray  # (F, 3)
    contact_vertex_ids: np.ndarray  # (C,)
    surface_probe_ids: np.ndarray  # (27,)
    vertex_areas: np.ndarray  # (V,) m^2
    template_shape_offset: np.ndarray  # (10,) the cached projection c
    joint_roles: np.ndarray  # (J,) ROLE_* codes
    head_joint_id: int

    body_joint_ids: np.ndarray = field(init=False)
    left_hand_ids: np.ndarray = field(init=False)
    right_hand_ids: np.ndarray = field(init=False)
    modeled_joint_ids: np.ndarray = field(init=False)
    left_distal_ids: np.ndarray = field(init=False)
    right_distal_ids: np.ndarray = field(init=False)

    def __post_init__(self):
        roles = self.joint_roles
        body = np.where(roles == ROLE_BODY)[0]
        lh = np.where(roles == ROLE_LEFT_HAND)[0]
        rh = np.where(roles == ROLE_RIGHT_HAND)[0]
        object.__setattr__(self, "body_joint_ids", body)
        object.__setattr__(self, "left_hand_ids", lh)
        object.__setattr__(self, "right_hand_ids", rh)
        object.__setattr__(
            self, "modeled_joint_ids", np.concatenate([[0], body, lh, rh])
        )
        object.__setattr__(self, "left_distal_ids", self._distal(lh))
        object.__setattr__(self, "right_distal_ids", self._distal(rh))

    def _distal(self, hand_ids):
        has_child = np.isin(hand_ids, self.parents)
        distal = hand_ids[~has_child]
        if len(distal) != N_HAND_PROBES:
            raise DimensionMismatch(
                f"hand subtree must have exactly {N_HAND_PROBES} leaf joints, "
                f"got {len(distal)}"
            )
        return distal

    @property
    def n_vertices(self):
        return self.template_vertices.shape[0]

    @property
    def n_joints(self):
        return self.parents.shape[0]

    def validate(self):
        """Check all structural invariants; raise DimensionMismatch on failure."""
        v, j = self.n_vertices, self.n_joints
        if self.shape_dirs.shape != (N_SHAPE, v, 3):
            raise DimensionMismatch("shape_dirs shape")
        if self.joint_regressor.shape != (j, v):
            raise DimensionMismatch("joint_regressor shape")
        if self.skin_weights.shape != (v, j):
            raise DimensionMismatch("skin_weights shape")
        if self.parents[0] != -1:
            raise DimensionMismatch("joint 0 must be the root")
        if np.any(self.parents[1:] >= np.arange(1, j)) or np.any(self.parents[1:] < 0):
            raise DimensionMismatch("parents must be topologically ordered (parent < child)")
        if np.any(self.skin_weights < -1e-9):
            raise DimensionMismatch("negative skin weights")
        if np.max(np.abs(self.skin_weights.sum(axis=1) - 1.0)) > 1e-6:
            raise DimensionMismatch("skin weight rows must sum to 1")
        for ids in (self.contact_vertex_ids, self.surface_probe_ids):
            if len(np.unique(ids)) != len(ids):
                raise DimensionMismatch("duplicate vertex ids")
            if np.any(ids < 0) or np.any(ids >= v):
                raise DimensionMismatch("vertex id out of range")
        if len(self.surface_probe_ids) != N_SURFACE_PROBES:
            raise DimensionMismatch(f"expected {N_SURFACE_PROBES} surface probe ids")
        if np.any(self.vertex_areas < 0):
            raise DimensionMismatch("negative vertex areas")
        if len(self.body_joint_ids) != N_BODY_JOINTS:
            raise DimensionMismatch(f"expected {N_BODY_JOINTS} body joints")
        if not (0 <= self.head_joint_id < j):
            raise DimensionMismatch("head_joint_id out of range")
        # c must satisfy the normal equations: S (t - S^T c) ~ 0.
        s = self.shape_dirs.reshape(N_SHAPE, -1)
        t = self.template_vertices.reshape(-1)
        resid = s @ (t - s.T @ self.template_shape_offset)
        rel = np.linalg.norm(resid) / max(np.linalg.norm(s @ t), 1e-300)
        if rel > 1e-9:
            raise DimensionMismatch("template_shape_offset violates normal equations")

    @staticmethod
    def from_tensors(tensors):
        """Build and validate a model from a container's tensor dict."""
        for name in MANDATORY_MODEL_TENSORS:
            if name not in tensors:
                raise MissingTensor(name)
        parents = np.asarray(tensors["parents"], dtype=np.int64)
        j = len(parents)
        if "joint_roles" in tensors:
            roles = np.asarray(tensors["joint_roles"], dtype=np.int64)
        else:
            roles = default_joint_roles(j)
        template = np.asarray(tensors["template_vertices"], dtype=np.float64)
        shape_dirs = np.asarray(tensors["shape_dirs"], dtype=np.float64)
        if "vertex_areas" in tensors:
            areas = np.asarray(tensors["vertex_areas"], dtype=np.float64)
        else:
            areas = mixed_voronoi_areas(template, tensors["faces"])
        model = BodyModel(
            template_vertices=template,
            shape_dirs=shape_dirs,
            joint_regressor=np.asarray(tensors["joint_regressor"], dtype=np.float64),
            parents=parents,
            skin_weights=np.asarray(tensors["skin_weights"], dtype=np.float64),
            faces=np.asarray(tensors["faces"], dtype=np.int64),
            contact_vertex_ids=np.asarray(tensors["contact_vertex_ids"], dtype=np.int64),
            surface_probe_ids=np.asarray(tensors["surface_probe_ids"], dtype=np.int64),
            vertex_areas=areas,
            template_shape_offset=compute_template_offset(template, shape_dirs),
            joint_roles=roles,
            head_joint_id=int(tensors.get("head_joint_id", 0)),
        )
        model.validate()
        return model

    @staticmethod
    def load(path):
        return BodyModel.from_tensors(read_container(path))

    def to_tensors(self):
        """Tensor dict for serialization (derived fields included)."""
        return {
            "template_vertices": self.template_vertices,
            "shape_dirs": self.shape_dirs,
            "joint_regressor": self.joint_regressor,
            "parents": self.parents,
            "skin_weights": self.skin_weights,
            "faces": self.faces,
            "contact_vertex_ids": self.contact_vertex_ids,
            "surface_probe_ids": self.surface_probe_ids,
            "vertex_areas": self.vertex_areas,
            "joint_roles": self.joint_roles,
            "head_joint_id": np.array(self.head_joint_id, dtype=np.int64),
        }

    def save(self, path):
        write_container(path, self.to_tensors())


def default_joint_roles(n_joints):
    """Standard 52-joint layout: root + 21 body + 15 left + 15 right."""
    expected = 1 + N_BODY_JOINTS + 2 * N_HAND_JOINTS
    if n_joints != expected:
        raise DimensionMismatch(
            f"model without joint_roles must have {expected} joints, got {n_joints}"
        )
    roles = np.empty(n_joints, dtype=np.int64)
    roles[0] = ROLE_ROOT
    roles[1 : 1 + N_BODY_JOINTS] = ROLE_BODY
    roles[22:37] = ROLE_LEFT_HAND
    roles[37:52] = ROLE_RIGHT_HAND
    return roles


@dataclass
class HumanState:
    """Pose (6D per joint), translation and shape; a freely copyable value."""

    global_orient: np.ndarray  # (6,)
    body_pose: np.ndarray  # (21, 6)
    left_hand_pose: np.ndarray  # (15, 6)
    right_hand_pose: np.ndarray  # (15, 6)
    translation: np.ndarray  # (3,) meters
    shape: np.ndarray  # (10,)

    @staticmethod
    def rest(translation=(0.0, 0.0, 0.0)):
        return HumanState(
            global_orient=identity_rot6d(),
            body_pose=identity_rot6d((N_BODY_JOINTS,)),
            left_hand_pose=identity_rot6d((N_HAND_JOINTS,)),
            right_hand_pose=identity_rot6d((N_HAND_JOINTS,)),
            translation=np.asarray(translation, dtype=np.float64).copy(),
            shape=np.zeros(N_SHAPE),
        )

    @staticmethod
    def zeros():
        """All-zero blocks; useful as a gradient/delta accumulator."""
        return HumanState(
            global_orient=np.zeros(6),
            body_pose=np.zeros((N_BODY_JOINTS, 6)),
            left_hand_pose=np.zeros((N_HAND_JOINTS, 6)),
            right_hand_pose=np.zeros((N_HAND_JOINTS, 6)),
            translation=np.zeros(3),
            shape=np.zeros(N_SHAPE),
        )

    def copy(self):
        return HumanState(
            self.global_orient.copy(),
            self.body_pose.copy(),
            self.left_hand_pose.copy(),
            self.right_hand_pose.copy(),
            self.translation.copy(),
            self.shape.copy(),
        )

    def validate(self):
        shapes = {
            "global_orient": (6,),
            "body_pose": (N_BODY_JOINTS, 6),
            "left_hand_pose": (N_HAND_JOINTS, 6),
            "right_hand_pose": (N_HAND_JOINTS, 6),
            "translation": (3,),
            "shape": (N_SHAPE,),
        }
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise DimensionMismatch(f"{name}: expected {want}, got {got}")
        for name in shapes:
            if not np.all(np.isfinite(getattr(self, name))):
                raise DimensionMismatch(f"{name} contains non-finite values")

    def stacked_rot6d(self):
        """(52, 6) rotation blocks in [global, body, left hand, right hand] order."""
        return np.concatenate(
            [
                self.global_orient[None],
                self.body_pose,
                self.left_hand_pose,
                self.right_hand_pose,
            ],
            axis=0,
        )

    @staticmethod
    def from_stacked_rot6d(stacked, translation, shape):
        return HumanState(
            global_orient=stacked[0].copy(),
            body_pose=stacked[1 : 1 + N_BODY_JOINTS].copy(),
            left_hand_pose=stacked[22:37].copy(),
            right_hand_pose=stacked[37:52].copy(),
            translation=np.asarray(translation, dtype=np.float64).copy(),
            shape=np.asarray(shape, dtype=np.float64).copy(),
        )

    def allclose(self, other, atol=0.0):
        return all(
            np.allclose(getattr(self, f), getattr(other, f), atol=atol, rtol=0.0)
            for f in (
                "global_orient",
                "body_pose",
                "left_hand_pose",
                "right_hand_pose",
                "translation",
                "shape",
            )
        )


@dataclass(frozen=True)
class PosedMesh:
    """Output of the forward pass, camera frame, meters."""

    vertices: np.ndarray  # (V, 3)
    joints: np.ndarray  # (J, 3)


# ---------------------------------------------------------------------------
# forward kinematics / skinning


def _assemble_rotations(model, state):
    """(J, 3, 3) per-joint rotations; frozen joints stay identity."""
    stacked = state.stacked_rot6d()
    r_modeled = rot6d_to_matrix(stacked)
    rot = np.broadcast_to(np.eye(3), (model.n_joints, 3, 3)).copy()
    rot[model.modeled_joint_ids] = r_modeled
    return rot, stacked


def forward(model, state, need_tape=False):
    """Pose the body model.

    Shaped vertices = template + sum_k beta_k * blendshape_k, rest joints from
    the regressor, rigid transforms composed along the parent chain, vertices
    skinned by the convex weights, then translated.

    The chain carries the skinning offset off_j = t_world_j - R_world_j j_rest_j
    directly (off_j = (R_world_p - R_world_j) j_rest_j + off_p), which is
    exactly zero at the identity pose, so the rest pose reproduces the
    template bit-for-bit.

    Returns:
        PosedMesh, or (PosedMesh, tape) when need_tape for use with lbs_vjp.
    """
    state.validate()
    rot, stacked = _assemble_rotations(model, state)
    v_shaped = model.template_vertices + np.einsum(
        "k,kvc->vc", state.shape, model.shape_dirs
    )
    j_rest = model.joint_regressor @ v_shaped

    n_j = model.n_joints
    rot_world = np.empty((n_j, 3, 3))
    offset = np.empty((n_j, 3))
    rot_world[0] = rot[0]
    offset[0] = j_rest[0] - rot[0] @ j_rest[0]
    for j in range(1, n_j):
        p = model.parents[j]
        rot_world[j] = rot_world[p] @ rot[j]
        offset[j] = (rot_world[p] - rot_world[j]) @ j_rest[j] + offset[p]

    t_world = np.einsum("jab,jb->ja", rot_world, j_rest) + offset
    blended_rot = np.einsum("vj,jab->vab", model.skin_weights, rot_world)
    vertices = (
        np.einsum("vab,vb->va", blended_rot, v_shaped)
        + model.skin_weights @ offset
        + state.translation
    )
    joints = t_world + state.translation
    mesh = PosedMesh(vertices=vertices, joints=joints)
    if not need_tape:
        return mesh
    tape = {
        "rot": rot,
        "stacked": stacked,
        "v_shaped": v_shaped,
        "j_rest": j_rest,
        "rot_world": rot_world,
    }
    return mesh, tape


def lbs_vjp(model, tape, d_vertices=None, d_joints=None, d_rot_world=None):
    """Backpropagate mesh gradients to the human state.

    Args:
        d_vertices: (V, 3) gradient w.r.t. posed vertices, or None.
        d_joints: (J, 3) gradient w.r.t. posed joints, or None.
        d_rot_world: (J, 3, 3) extra gradient w.r.t. world rotations
            (used by the body-relative probe frame), or None.

    Returns:
        HumanState-shaped gradient.
    """
    n_j = model.n_joints
    rot = tape["rot"]
    v_shaped = tape["v_shaped"]
    j_rest = tape["j_rest"]
    rot_world = tape["rot_world"]

    d_trans = np.zeros(3)
    d_off = np.zeros((n_j, 3))
    d_rw = np.zeros((n_j, 3, 3))
    d_vsh = np.zeros_like(v_shaped)
    d_jrest = np.zeros((n_j, 3))

    if d_joints is not None:
        # joints = rot_world @ j_rest + offset + translation
        d_trans += d_joints.sum(axis=0)
        d_off += d_joints
        d_rw += np.einsum("ja,jb->jab", d_joints, j_rest)
        d_jrest += np.einsum("jab,ja->jb", rot_world, d_joints)
    if d_vertices is not None:
        d_trans += d_vertices.sum(axis=0)
        d_rw += np.einsum("vj,va,vb->jab", model.skin_weights, d_vertices, v_shaped)
        d_vsh += np.einsum(
            "vj,jab,va->vb", model.skin_weights, rot_world, d_vertices
        )
        d_off += model.skin_weights.T @ d_vertices
    if d_rot_world is not None:
        d_rw += d_rot_world

    d_rot = np.zeros((n_j, 3, 3))
    for j in range(n_j - 1, 0, -1):
        p = model.parents[j]
        # offset_j = (rot_world_p - rot_world_j) @ j_rest_j + offset_p
        d_rw[p] += np.outer(d_off[j], j_rest[j])
        d_rw[j] -= np.outer(d_off[j], j_rest[j])
        d_jrest[j] += (rot_world[p] - rot_world[j]).T @ d_off[j]
        d_off[p] += d_off[j]
        # rot_world_j = rot_world_p @ rot_j
        d_rw[p] += d_rw[j] @ rot[j].T
        d_rot[j] = rot_world[p].T @ d_rw[j]
    # root: offset_0 = (I - rot_0) @ j_rest_0, rot_world_0 = rot_0
    d_rot[0] = d_rw[0] - np.outer(d_off[0], j_rest[0])
    d_jrest[0] += (np.eye(3) - rot[0]).T @ d_off[0]

    d_vsh += model.joint_regressor.T @ d_jrest
    d_shape = np.einsum("kvc,vc->k", model.shape_dirs, d_vsh)
    d_stacked = rot6d_to_matrix_vjp(
        tape["stacked"], d_rot[model.modeled_joint_ids]
    )
    grad = HumanState.from_stacked_rot6d(d_stacked, d_trans, d_shape)
    return grad


# ---------------------------------------------------------------------------
# scale absorption (closed-form)


def absorb_scale(state, s, model):
    """Fold a uniform scale s into the state: beta' = s(beta + c) - c, tau' = s tau.

    Rotations are unchanged. s == 1.0 returns an unchanged copy exactly.
    """
    s = float(s)
    if s <= 0.0:
        raise NonPositiveScale(f"scale must be positive, got {s}")
    if s == 1.0:
        return state.copy()
    c = model.template_shape_offset
    out = state.copy()
    out.shape = s * (state.shape + c) - c
    out.translation = s * state.translation
    return out


def absorb_scale_vjp(state, s, model, d_out_shape, d_out_trans):
    """VJP of absorb_scale w.r.t. (shape, translation, s)."""
    c = model.template_shape_offset
    d_shape = s * d_out_shape
    d_trans = s * d_out_trans
    d_s = float(np.dot(d_out_shape, state.shape + c) + np.dot(d_out_trans, state.translation))
    return d_shape, d_trans, d_s
