"""Synthetic scenario generator: toy humanoid + procedural room.

The toy model is a 52-joint stick figure (root + 21 body + 2 x 15 hand
joints) with a ring of 4 skin vertices per body joint and 2 per finger joint
(148 vertices), triangulated into bone tubes and finger fins so per-vertex
mixed-Voronoi areas are well defined. It is fully deterministic so `synth`
outputs are byte-identical across runs for a given seed.

Camera frame: x right, y down, z forward. The floor lies 1 m below the
camera at y = +1.
"""

import zipfile
from dataclasses import dataclass, replace
from io import BytesIO

import numpy as np

from .body import (
    BodyModel,
    HumanState,
    compute_template_offset,
    farthest_point_sample,
    forward,
    mixed_voronoi_areas,
)
from .rotation import axis_angle_to_matrix, matrix_to_rot6d
from .scene import CameraIntrinsics, ScenePointCloud
from .training import PerturbationSpec, sample_query

_MODEL_SEED = 0xB0D1E5

FLOOR_Y = 1.0
PERSON_Z = 2.6
WALL_Z = 3.6

# (name, parent, x, height-above-floor, z); pelvis sits at height 0.95
_BODY_JOINTS = [
    ("pelvis", -1, 0.0, 0.95, 0.0),
    ("l_hip", 0, 0.10, 0.92, 0.0),
    ("r_hip", 0, -0.10, 0.92, 0.0),
    ("spine1", 0, 0.0, 1.08, 0.0),
    ("l_knee", 1, 0.11, 0.50, 0.0),
    ("r_knee", 2, -0.11, 0.50, 0.0),
    ("spine2", 3, 0.0, 1.21, 0.0),
    ("l_ankle", 4, 0.12, 0.045, 0.0),
    ("r_ankle", 5, -0.12, 0.045, 0.0),
    ("spine3", 6, 0.0, 1.34, 0.0),
    ("l_foot", 7, 0.125, 0.025, -0.10),
    ("r_foot", 8, -0.125, 0.025, -0.10),
    ("neck", 9, 0.0, 1.47, 0.0),
    ("l_collar", 9, 0.08, 1.40, 0.0),
    ("r_collar", 9, -0.08, 1.40, 0.0),
    ("head", 12, 0.0, 1.55, 0.0),
    ("l_shoulder", 13, 0.20, 1.42, 0.0),
    ("r_shoulder", 14, -0.20, 1.42, 0.0),
    ("l_elbow", 16, 0.26, 1.16, 0.0),
    ("r_elbow", 17, -0.26, 1.16, 0.0),
    ("l_wrist", 18, 0.30, 0.92, 0.0),
    ("r_wrist", 19, -0.30, 0.92, 0.0),
]

_RING_RADII = {
    "pelvis": 0.13,
    "hip": 0.085,
    "knee": 0.06,
    "ankle": 0.04,
    "foot": 0.02,
    "spine1": 0.12,
    "spine2": 0.12,
    "spine3": 0.115,
    "neck": 0.05,
    "head": 0.09,
    "collar": 0.055,
    "shoulder": 0.06,
    "elbow": 0.045,
    "wrist": 0.035,
}

HEAD_JOINT = 15
PELVIS_HEIGHT = 0.95


def _rest_joints():
    """(52, 3) rest joints, pelvis at the origin, plus the parents array."""
    joints = np.zeros((52, 3))
    parents = np.full(52, -1, dtype=np.int64)
    for i, (_, parent, x, h, z) in enumerate(_BODY_JOINTS):
        joints[i] = (x, PELVIS_HEIGHT - h, z)
        parents[i] = parent
    idx = 22
    for side, wrist in ((1.0, 20), (-1.0, 21)):
        for f in range(5):
            base = joints[wrist] + (side * 0.025, 0.035, (f - 2) * 0.016)
            mid = base + (side * 0.008, 0.028, 0.0)
            tip = mid + (side * 0.006, 0.024, 0.0)
            for pos, parent in ((base, wrist), (mid, idx), (tip, idx + 1)):
                joints[idx] = pos
                parents[idx] = parent
                idx += 1
    return joints, parents


def _ring_basis(direction):
    ref = np.array([0.0, 0.0, 1.0])
    if abs(direction @ ref) > 0.9:
        ref = np.array([1.0, 0.0, 0.0])
    u = np.cross(direction, ref)
    u /= np.linalg.norm(u)
    v = np.cross(direction, u)
    return u, v


def _radius_for(name):
    for key, r in _RING_RADII.items():
        if key in name:
            return r
    raise KeyError(name)


def build_toy_model(exact_span=False):
    """Deterministic toy humanoid; exact_span puts the template in the
    blendshape row span (used by the closed-form scale identities)."""
    joints, parents = _rest_joints()
    names = [j[0] for j in _BODY_JOINTS]

    vertices = []
    faces = []
    ring_of = {}
    region = {}
    for j in range(22):
        parent = parents[j]
        direction = joints[j] - joints[parent] if parent >= 0 else np.array([0.0, 1.0, 0.0])
        n = np.linalg.norm(direction)
        direction = direction / n if n > 1e-12 else np.array([0.0, 1.0, 0.0])
        u, v = _ring_basis(direction)
        r = _radius_for(names[j])
        base = len(vertices)
        for ang in (0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi):
            vertices.append(joints[j] + r * (np.cos(ang) * u + np.sin(ang) * v))
        ring_of[j] = base
        region[j] = names[j]
    pair_of = {}
    for j in range(22, 52):
        direction = joints[j] - joints[parents[j]]
        direction /= np.linalg.norm(direction)
        u, _ = _ring_basis(direction)
        base = len(vertices)
        vertices.append(joints[j] + 0.008 * u)
        vertices.append(joints[j] - 0.008 * u)
        pair_of[j] = base
    vertices = np.asarray(vertices)
    n_verts = len(vertices)

    # bone tubes between body rings
    for j in range(1, 22):
        p = parents[j]
        a, b = ring_of[p], ring_of[j]
        for k in range(4):
            k2 = (k + 1) % 4
            faces.append((a + k, a + k2, b + k2))
            faces.append((a + k, b + k2, b + k))
    # finger fins between consecutive finger joints
    for j in range(22, 52):
        p = parents[j]
        if p < 22:
            continue
        a, b = pair_of[p], pair_of[j]
        faces.append((a, a + 1, b + 1))
        faces.append((a, b + 1, b))
    faces = np.asarray(faces, dtype=np.int64)

    skin = np.zeros((n_verts, 52))
    for j in range(22):
        rows = slice(ring_of[j], ring_of[j] + 4)
        if parents[j] < 0:
            skin[rows, j] = 1.0
        else:
            skin[rows, j] = 0.75
            skin[rows, parents[j]] = 0.25
    for j in range(22, 52):
        rows = slice(pair_of[j], pair_of[j] + 2)
        skin[rows, j] = 0.8
        skin[rows, parents[j]] = 0.2

    regressor = np.zeros((52, n_verts))
    for j in range(22):
        regressor[j, ring_of[j] : ring_of[j] + 4] = 0.25
    for j in range(22, 52):
        regressor[j, pair_of[j] : pair_of[j] + 2] = 0.5

    rng = np.random.default_rng(_MODEL_SEED)
    shape_dirs = np.zeros((10, n_verts, 3))
    smooth = lambda: (
        rng.normal(0.0, 0.03, 3) * np.sin(vertices @ rng.normal(0.0, 2.5, 3) + rng.uniform(0, 2 * np.pi))[:, None]
    )
    if exact_span:
        shape_dirs[0] = vertices
    else:
        shape_dirs[0] = 0.95 * vertices + smooth()
    # nonlinear height / tapered girth morphs (deliberately not summing to
    # the template, so it stays outside the row span in the general model)
    shape_dirs[1, :, 1] = 0.5 * np.tanh(2.0 * vertices[:, 1])
    shape_dirs[2, :, 0] = vertices[:, 0] * (1.0 + 0.25 * vertices[:, 1])
    shape_dirs[2, :, 2] = vertices[:, 2] * (1.0 + 0.25 * vertices[:, 1])
    for k in range(3, 10):
        shape_dirs[k] = smooth() + smooth()

    contact = []
    for j in range(22):
        if any(part in names[j] for part in ("ankle", "foot", "wrist", "pelvis", "spine")):
            contact.extend(range(ring_of[j], ring_of[j] + 4))
    for j in range(22, 52):
        contact.extend(range(pair_of[j], pair_of[j] + 2))
    contact = np.asarray(sorted(contact), dtype=np.int64)

    model = BodyModel(
        template_vertices=vertices,
        shape_dirs=shape_dirs,
        joint_regressor=regressor,
        parents=parents,
        skin_weights=skin,
        faces=faces,
        contact_vertex_ids=contact,
        surface_probe_ids=farthest_point_sample(vertices, 27, start=0),
        vertex_areas=mixed_voronoi_areas(vertices, faces),
        template_shape_offset=compute_template_offset(vertices, shape_dirs),
        joint_roles=np.asarray([0] + [1] * 21 + [2] * 15 + [3] * 15, dtype=np.int64),
        head_joint_id=HEAD_JOINT,
    )
    model.validate()
    return model


# ---------------------------------------------------------------------------
# procedural room


def _plane_grid(rng, x_range, z_range, y, spacing, jitter):
    xs = np.arange(x_range[0], x_range[1], spacing)
    zs = np.arange(z_range[0], z_range[1], spacing)
    gx, gz = np.meshgrid(xs, zs)
    pts = np.stack([gx.ravel(), np.full(gx.size, float(y)), gz.ravel()], axis=1)
    pts[:, 0] += rng.uniform(-jitter, jitter, len(pts))
    pts[:, 2] += rng.uniform(-jitter, jitter, len(pts))
    return pts


def _wall_grid(rng, x_range, y_range, z, spacing, jitter):
    xs = np.arange(x_range[0], x_range[1], spacing)
    ys = np.arange(y_range[0], y_range[1], spacing)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, float(z))], axis=1)
    pts[:, 0] += rng.uniform(-jitter, jitter, len(pts))
    pts[:, 1] += rng.uniform(-jitter, jitter, len(pts))
    return pts


def _box_points(rng, center_x, center_z, top_y, bottom_y, half, spacing, jitter):
    """Camera-facing faces of an axis-aligned box (top, near side, one flank)."""
    points = []
    normals = []
    top = _plane_grid(
        rng,
        (center_x - half, center_x + half),
        (center_z - half, center_z + half),
        top_y,
        spacing,
        jitter,
    )
    points.append(top)
    normals.append(np.tile((0.0, -1.0, 0.0), (len(top), 1)))
    near = _wall_grid(
        rng,
        (center_x - half, center_x + half),
        (top_y, bottom_y),
        center_z - half,
        spacing,
        jitter,
    )
    points.append(near)
    normals.append(np.tile((0.0, 0.0, -1.0), (len(near), 1)))
    if abs(center_x) > half:  # a flank face is visible only off the optical axis
        flank_x = center_x - half if center_x > 0 else center_x + half
        flank_n = (-1.0, 0.0, 0.0) if center_x > 0 else (1.0, 0.0, 0.0)
        ys = np.arange(top_y, bottom_y, spacing)
        zs = np.arange(center_z - half, center_z + half, spacing)
        gy, gz = np.meshgrid(ys, zs)
        flank = np.stack([np.full(gy.size, flank_x), gy.ravel(), gz.ravel()], axis=1)
        flank[:, 1] += rng.uniform(-jitter, jitter, len(flank))
        flank[:, 2] += rng.uniform(-jitter, jitter, len(flank))
        points.append(flank)
        normals.append(np.tile(flank_n, (len(flank), 1)))
    return np.concatenate(points), np.concatenate(normals)


def default_intrinsics():
    return CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


@dataclass
class SyntheticScenario:
    model: BodyModel
    scene: ScenePointCloud
    gt_state: HumanState
    init_state: HumanState
    intrinsics: CameraIntrinsics
    contact_tau: float
    kind: str


def _seated_pose():
    """Hips forward 90 degrees, knees back 90 degrees."""
    state = HumanState.rest()
    x_axis = np.array([1.0, 0.0, 0.0])
    hip = matrix_to_rot6d(axis_angle_to_matrix(x_axis, -0.5 * np.pi))
    knee = matrix_to_rot6d(axis_angle_to_matrix(x_axis, 0.5 * np.pi))
    state.body_pose[0] = hip  # l_hip
    state.body_pose[1] = hip  # r_hip
    state.body_pose[3] = knee  # l_knee
    state.body_pose[4] = knee  # r_knee
    return state


def synthesize_scenario(
    seed,
    difficulty=1.0,
    kind="standing",
    contact_tau=0.05,
    spacing=0.05,
    spec=None,
):
    """Procedural room + toy human with analytic ground-truth contact.

    difficulty scales the perturbation sigmas of the initial state; 0 makes
    the init equal to GT. The GT placement is analytic: feet vertices end up
    within contact_tau of the floor plane (and the pelvis ring on the box top
    when seated).
    """
    model = build_toy_model()
    rng = np.random.default_rng(seed)
    jitter = 0.1 * spacing

    if kind == "standing":
        pose = HumanState.rest()
    elif kind == "seated":
        pose = _seated_pose()
    else:
        raise ValueError(f"unknown scenario kind {kind!r}")
    rest_mesh = forward(model, pose)
    foot_ids = model.body_joint_ids[[6, 7, 9, 10]]  # ankles + feet
    foot_verts = np.where(model.skin_weights[:, foot_ids].sum(axis=1) > 0.5)[0]
    lowest = rest_mesh.vertices[foot_verts, 1].max()
    translation = np.array([0.0, FLOOR_Y - lowest, PERSON_Z])
    gt = pose.copy()
    gt.translation = translation

    pts = [
        _plane_grid(rng, (-1.2, 1.2), (1.6, WALL_Z), FLOOR_Y, spacing, jitter)
    ]
    nrm = [np.tile((0.0, -1.0, 0.0), (len(pts[0]), 1))]
    wall = _wall_grid(rng, (-1.2, 1.2), (FLOOR_Y - 2.0, FLOOR_Y), WALL_Z, spacing, jitter)
    pts.append(wall)
    nrm.append(np.tile((0.0, 0.0, -1.0), (len(wall), 1)))
    if kind == "standing":
        box_pts, box_nrm = _box_points(
            rng, 0.85, 2.3, FLOOR_Y - 0.5, FLOOR_Y, 0.25, spacing, jitter
        )
    else:
        pelvis_y = float(forward(model, gt).joints[0, 1])
        box_pts, box_nrm = _box_points(
            rng, 0.0, PERSON_Z, pelvis_y, FLOOR_Y, 0.30, spacing, jitter
        )
    pts.append(box_pts)
    nrm.append(box_nrm)
    scene = ScenePointCloud(
        points=np.concatenate(pts), normals=np.concatenate(nrm)
    )

    base_spec = spec or PerturbationSpec()
    init_spec = base_spec.scaled(difficulty)
    if difficulty == 0.0:
        init = gt.copy()
    else:
        init = sample_query(gt, replace(init_spec, clean_probability=0.0), rng)
    return SyntheticScenario(
        model=model,
        scene=scene,
        gt_state=gt,
        init_state=init,
        intrinsics=default_intrinsics(),
        contact_tau=contact_tau,
        kind=kind,
    )


# ---------------------------------------------------------------------------
# deterministic scientific-array archive export (for the converter)

_ARCHIVE_RENAMES = {
    "v_template": "template_vertices",
    "J_regressor": "joint_regressor",
    "weights": "skin_weights",
    "f": "faces",
}


def export_archive(model, path):
    """Write the model as a .npz in body-model-archive layout.

    shapedirs are stored (V, 3, 10) and the hierarchy as a kintree_table,
    matching common body-model archives; zip entries carry a fixed timestamp
    so the export is byte-reproducible.
    """
    arrays = {
        "v_template": model.template_vertices,
        "shapedirs": np.ascontiguousarray(np.moveaxis(model.shape_dirs, 0, -1)),
        "J_regressor": model.joint_regressor,
        "kintree_table": np.stack(
            [model.parents, np.arange(model.n_joints, dtype=np.int64)]
        ),
        "weights": model.skin_weights,
        "f": model.faces,
        "contact_vertex_ids": model.contact_vertex_ids,
        "surface_probe_ids": model.surface_probe_ids,
        "joint_roles": model.joint_roles,
        "head_joint_id": np.array(model.head_joint_id, dtype=np.int64),
        "vertex_areas": model.vertex_areas,
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if arr.ndim and not arr.flags.c_contiguous:
                arr = np.ascontiguousarray(arr)
            buf = BytesIO()
            np.lib.format.write_array(buf, arr)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())
