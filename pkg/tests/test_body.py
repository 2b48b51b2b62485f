"""Body model tests against independent naive oracles.

The LBS oracle below re-derives the whole forward pass with scalar Python
math (its own Gram-Schmidt, per-vertex loop, 4x4 homogeneous chain) so any
vectorization or chain-restructuring bug in the package shows up as a
mismatch.
"""

import math

import numpy as np
import pytest

from graft.body import (
    HumanState,
    absorb_scale,
    compute_template_offset,
    forward,
    mixed_voronoi_areas,
)
from graft.errors import DimensionMismatch, NonPositiveScale, RankDeficientBlendshapes

from conftest import random_state


# ---------------------------------------------------------------------------
# oracles


def oracle_rot6d(r):
    a = [float(x) for x in r[:3]]
    b = [float(x) for x in r[3:]]
    na = math.sqrt(sum(x * x for x in a))
    b1 = [x / na for x in a]
    d = sum(x * y for x, y in zip(b1, b))
    u = [y - d * x for x, y in zip(b1, b)]
    nu = math.sqrt(sum(x * x for x in u))
    b2 = [x / nu for x in u]
    b3 = [
        b1[1] * b2[2] - b1[2] * b2[1],
        b1[2] * b2[0] - b1[0] * b2[2],
        b1[0] * b2[1] - b1[1] * b2[0],
    ]
    return [[b1[i], b2[i], b3[i]] for i in range(3)]


def oracle_lbs(model, state):
    """Naive scalar forward pass: shaped verts, 4x4 chain, per-vertex blend."""
    v = model.n_vertices
    j = model.n_joints
    shaped = [
        [
            model.template_vertices[i][c]
            + sum(state.shape[k] * model.shape_dirs[k][i][c] for k in range(10))
            for c in range(3)
        ]
        for i in range(v)
    ]
    rest = [
        [
            sum(model.joint_regressor[q][i] * shaped[i][c] for i in range(v))
            for c in range(3)
        ]
        for q in range(j)
    ]
    rots = [np.eye(3).tolist() for _ in range(j)]
    stacked = state.stacked_rot6d()
    for row, joint in enumerate(model.modeled_joint_ids):
        rots[joint] = oracle_rot6d(stacked[row])

    def mat4(rot, t):
        m = [[rot[r][c] for c in range(3)] + [t[r]] for r in range(3)]
        m.append([0.0, 0.0, 0.0, 1.0])
        return m

    def matmul4(a, b):
        return [
            [sum(a[r][k] * b[k][c] for k in range(4)) for c in range(4)]
            for r in range(4)
        ]

    world = [None] * j
    world[0] = mat4(rots[0], rest[0])
    for q in range(1, j):
        p = model.parents[q]
        local = mat4(rots[q], [rest[q][c] - rest[p][c] for c in range(3)])
        world[q] = matmul4(world[p], local)
    # subtract the rest joint so the transform maps rest-pose coordinates
    skinning = []
    for q in range(j):
        rot = [[world[q][r][c] for c in range(3)] for r in range(3)]
        trans = [
            world[q][r][3] - sum(rot[r][c] * rest[q][c] for c in range(3))
            for r in range(3)
        ]
        skinning.append((rot, trans))
    verts = np.empty((v, 3))
    for i in range(v):
        for c in range(3):
            acc = 0.0
            for q in range(j):
                w = model.skin_weights[i][q]
                if w == 0.0:
                    continue
                rot, trans = skinning[q]
                acc += w * (
                    sum(rot[c][k] * shaped[i][k] for k in range(3)) + trans[c]
                )
            verts[i, c] = acc + state.translation[c]
    joints = np.array(
        [[world[q][r][3] + state.translation[r] for r in range(3)] for q in range(j)]
    )
    return verts, joints


def oracle_gauss_solve(a, b):
    """Plain Gaussian elimination with partial pivoting."""
    n = len(b)
    m = [list(map(float, row)) + [float(b[i])] for i, row in enumerate(a)]
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(m[r][col]))
        m[col], m[piv] = m[piv], m[col]
        for r in range(col + 1, n):
            f = m[r][col] / m[col][col]
            for c in range(col, n + 1):
                m[r][c] -= f * m[col][c]
    x = [0.0] * n
    for r in range(n - 1, -1, -1):
        x[r] = (m[r][n] - sum(m[r][c] * x[c] for c in range(r + 1, n))) / m[r][r]
    return np.array(x)


# ---------------------------------------------------------------------------
# forward


def test_identity_pose_is_template_exactly(toy_model):
    mesh = forward(toy_model, HumanState.rest())
    assert np.array_equal(mesh.vertices, toy_model.template_vertices)


def test_pure_translation(toy_model):
    state = HumanState.rest(translation=(1.0, 2.0, 3.0))
    mesh = forward(toy_model, state)
    assert np.array_equal(mesh.vertices, toy_model.template_vertices + state.translation)


def test_translation_equivariance_exact(toy_model):
    rng = np.random.default_rng(5)
    state = random_state(rng)
    state.translation = np.zeros(3)
    base = forward(toy_model, state)
    delta = np.array([0.7, -1.3, 0.25])
    state2 = state.copy()
    state2.translation = delta
    moved = forward(toy_model, state2)
    assert np.array_equal(moved.vertices, base.vertices + delta)
    assert np.array_equal(moved.joints, base.joints + delta)


def test_forward_matches_naive_lbs_oracle(toy_model):
    rng = np.random.default_rng(7)
    for _ in range(3):
        state = random_state(rng)
        mesh = forward(toy_model, state)
        verts, joints = oracle_lbs(toy_model, state)
        assert np.max(np.abs(mesh.vertices - verts)) < 1e-9
        assert np.max(np.abs(mesh.joints - joints)) < 1e-9


def test_joint_positions_match_chain_oracle_many_states(toy_model):
    # cheap chain-only oracle over >= 100 random states
    rng = np.random.default_rng(8)
    for _ in range(100):
        state = random_state(rng)
        mesh = forward(toy_model, state)
        _, joints = oracle_lbs_joints_only(toy_model, state)
        assert np.max(np.abs(mesh.joints - joints)) < 1e-9


def oracle_lbs_joints_only(model, state):
    from graft.rotation import rot6d_to_matrix

    shaped = model.template_vertices + np.einsum(
        "k,kvc->vc", state.shape, model.shape_dirs
    )
    rest = model.joint_regressor @ shaped
    rots = np.broadcast_to(np.eye(3), (model.n_joints, 3, 3)).copy()
    rots[model.modeled_joint_ids] = rot6d_to_matrix(state.stacked_rot6d())
    world_r = [rots[0]]
    world_t = [rest[0]]
    for j in range(1, model.n_joints):
        p = model.parents[j]
        world_r.append(world_r[p] @ rots[j])
        world_t.append(world_r[p] @ (rest[j] - rest[p]) + world_t[p])
    return None, np.asarray(world_t) + state.translation


def test_dimension_mismatch(toy_model):
    state = HumanState.rest()
    state.shape = np.zeros(7)
    with pytest.raises(DimensionMismatch):
        forward(toy_model, state)


# ---------------------------------------------------------------------------
# scale absorption


def test_absorb_scale_identity(toy_model):
    rng = np.random.default_rng(9)
    state = random_state(rng)
    out = absorb_scale(state, 1.0, toy_model)
    assert state.allclose(out)
    assert np.array_equal(out.shape, state.shape)
    assert np.array_equal(out.translation, state.translation)


def test_absorb_scale_fixed_point(toy_model):
    state = HumanState.rest()
    state.shape = -toy_model.template_shape_offset.copy()
    for s in (0.3, 1.7, 5.0):
        out = absorb_scale(state, s, toy_model)
        assert np.allclose(out.shape, state.shape, atol=1e-12)


def test_absorb_scale_formula(toy_model):
    rng = np.random.default_rng(10)
    state = random_state(rng)
    c = toy_model.template_shape_offset
    out = absorb_scale(state, 1.3, toy_model)
    assert np.allclose(out.shape, 1.3 * (state.shape + c) - c, atol=0)
    assert np.allclose(out.translation, 1.3 * state.translation, atol=0)
    assert np.array_equal(out.body_pose, state.body_pose)


def test_absorb_scale_rejects_nonpositive(toy_model):
    with pytest.raises(NonPositiveScale):
        absorb_scale(HumanState.rest(), 0.0, toy_model)
    with pytest.raises(NonPositiveScale):
        absorb_scale(HumanState.rest(), -2.0, toy_model)


def test_exact_span_vertex_scaling(span_model):
    # template in the blendshape row span: posed vertices scale exactly
    rng = np.random.default_rng(11)
    for s in (0.85, 1.0, 1.15):
        state = random_state(rng)
        state.translation = np.zeros(3)
        scaled = absorb_scale(state, s, span_model)
        v1 = forward(span_model, scaled).vertices
        v0 = forward(span_model, state).vertices
        assert np.max(np.abs(v1 - s * v0)) < 1e-9


def test_scale_residual_identity_general_model(toy_model):
    # || V_shaped(absorb) - s V_shaped || == |s-1| * ||T - S^T c|| exactly
    rng = np.random.default_rng(12)
    t = toy_model.template_vertices.reshape(-1)
    s_mat = toy_model.shape_dirs.reshape(10, -1)
    resid = np.linalg.norm(t - s_mat.T @ toy_model.template_shape_offset)
    assert resid > 1e-3  # the general model must be genuinely out of span
    for s in (0.6, 0.85, 1.15, 2.0):
        state = random_state(rng)
        shaped = lambda st: (
            toy_model.template_vertices
            + np.einsum("k,kvc->vc", st.shape, toy_model.shape_dirs)
        )
        lhs = np.linalg.norm(
            shaped(absorb_scale(state, s, toy_model)) - s * shaped(state)
        )
        rhs = abs(s - 1.0) * resid
        assert abs(lhs - rhs) < 1e-8 * rhs


# ---------------------------------------------------------------------------
# template offset


def test_template_offset_orthonormal_projection():
    rng = np.random.default_rng(13)
    q, _ = np.linalg.qr(rng.standard_normal((60, 10)))
    s = q.T.reshape(10, 20, 3)
    t = (s.reshape(10, -1).T @ np.eye(10)[0]).reshape(20, 3)
    c = compute_template_offset(t, s)
    assert np.allclose(c, np.eye(10)[0], atol=1e-12)


def test_template_offset_orthogonal_template_gives_zero():
    rng = np.random.default_rng(14)
    q, _ = np.linalg.qr(rng.standard_normal((60, 11)))
    s = q[:, :10].T.reshape(10, 20, 3)
    t = q[:, 10].reshape(20, 3)
    c = compute_template_offset(t, s)
    assert np.max(np.abs(c)) < 1e-12


def test_template_offset_matches_gauss_elimination_oracle():
    rng = np.random.default_rng(15)
    s = rng.standard_normal((10, 40, 3))
    t = rng.standard_normal((40, 3))
    c = compute_template_offset(t, s)
    flat = s.reshape(10, -1)
    expected = oracle_gauss_solve(flat @ flat.T, flat @ t.reshape(-1))
    assert np.max(np.abs(c - expected)) < 1e-8


def test_template_offset_rank_deficient_raises():
    rng = np.random.default_rng(16)
    s = rng.standard_normal((10, 40, 3))
    s[9] = s[8]  # exactly dependent rows
    with pytest.raises(RankDeficientBlendshapes):
        compute_template_offset(rng.standard_normal((40, 3)), s)


def test_residual_orthogonality(toy_model):
    s = toy_model.shape_dirs.reshape(10, -1)
    t = toy_model.template_vertices.reshape(-1)
    resid = s @ (t - s.T @ toy_model.template_shape_offset)
    assert np.linalg.norm(resid) / np.linalg.norm(s @ t) < 1e-9


# ---------------------------------------------------------------------------
# mixed-Voronoi areas


def test_vertex_areas_sum_to_surface_area(toy_model):
    areas = mixed_voronoi_areas(toy_model.template_vertices, toy_model.faces)
    v = toy_model.template_vertices
    f = toy_model.faces
    tri = 0.5 * np.linalg.norm(
        np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1
    )
    assert abs(areas.sum() - tri.sum()) < 1e-9
    assert np.all(areas >= 0)


def test_vertex_areas_on_right_triangle():
    # unit right triangle: non-obtuse; Voronoi areas are 1/4, 1/8, 1/8
    verts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0]])
    faces = np.array([[0, 1, 2]])
    areas = mixed_voronoi_areas(verts, faces)
    assert np.allclose(areas, [0.25, 0.125, 0.125], atol=1e-12)


def test_vertex_areas_obtuse_split():
    verts = np.array([[0.0, 0, 0], [4.0, 0, 0], [2.0, 0.2, 0]])
    faces = np.array([[0, 1, 2]])
    areas = mixed_voronoi_areas(verts, faces)
    total = 0.5 * 4.0 * 0.2
    assert np.allclose(areas, [total / 4, total / 4, total / 2], atol=1e-12)
