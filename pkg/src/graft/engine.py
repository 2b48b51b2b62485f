"""End-to-end iterative refinement loop.

Each step re-probes the current mesh, tokenizes, runs the transformer,
decodes a corrective update and applies it: rotation blocks are summed in 6D
and re-orthonormalized, then the predicted uniform scale is folded into
(shape, translation) via the closed-form absorption. Humans are refined
independently with shared weights.
"""

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .body import HumanState, absorb_scale, forward
from .errors import HeadNotVisible, NoScenePointOnRay
from .network import decode, transformer_forward
from .probes import compute_probes
from .rotation import orthonormalize_rot6d, rot6d_to_matrix
from .scene import SpatialIndex, pixel_in_image, project, unproject
from .tokens import sample_anchor_features, tokenize

HEAD_RAY_TOLERANCE_DEG = 2.0


@dataclass
class RefinementConfig:
    iterations: int = 3
    geometry_only: bool = False
    max_points: Optional[int] = None
    record_trajectory: bool = True

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


@dataclass
class Trajectory:
    """Per-step refinement record, length iterations + 1 (incl. the init)."""

    states: list = field(default_factory=list)
    mean_probe_dist: list = field(default_factory=list)  # meters, contact verts
    scales: list = field(default_factory=list)  # applied scale (1.0 at init)
    wall_ms: list = field(default_factory=list)


def mean_contact_distance(index, model, mesh):
    """Mean nearest-scene distance over the contact vertex set (meters)."""
    _, _, dist, _ = index.nearest_batch(mesh.vertices[model.contact_vertex_ids])
    return float(dist.mean())


def apply_gradient(state, grad, model):
    """theta' = absorb_scale(theta + delta, s) with 6D re-orthonormalization.

    A no-op gradient (all deltas exactly zero, s == 1) returns the state
    unchanged so a zero-weight network is an exact fixed point.
    """
    if grad.is_noop():
        return state.copy()
    stacked = state.stacked_rot6d()
    delta = np.concatenate(
        [grad.d_global[None], grad.d_body, grad.d_left_hand, grad.d_right_hand]
    )
    new_stacked = orthonormalize_rot6d(stacked + delta)
    summed = HumanState.from_stacked_rot6d(
        new_stacked,
        state.translation + grad.d_translation,
        state.shape + grad.d_shape,
    )
    return absorb_scale(summed, grad.scale, model)


def refine_step(model, index, state, mesh, weights, grids=None, capture=None):
    """One probe -> tokenize -> transform -> decode -> apply cycle.

    Returns (new_state, new_mesh, info) where info carries the decoded
    gradient and the token set for inspection.
    """
    root_rotation = rot6d_to_matrix(state.global_orient)
    probes = compute_probes(index, model, mesh, root_rotation)
    token_set = tokenize(model, state, mesh, probes, weights)
    contexts = None
    if grids is not None:
        contexts, _ = sample_anchor_features(grids, token_set, weights)
    refined = transformer_forward(token_set.tokens, contexts, weights, capture=capture)
    grad = decode(refined, weights)
    new_state = apply_gradient(state, grad, model)
    new_mesh = forward(model, new_state)
    return new_state, new_mesh, {"gradient": grad, "tokens": token_set}


def _refine_one(model, index, state, weights, config, grids):
    mesh = forward(model, state)
    traj = Trajectory()
    if config.record_trajectory:
        traj.states.append(state.copy())
        traj.mean_probe_dist.append(mean_contact_distance(index, model, mesh))
        traj.scales.append(1.0)
        traj.wall_ms.append(0.0)
    for _ in range(config.iterations):
        t0 = time.perf_counter()
        state, mesh, info = refine_step(model, index, state, mesh, weights, grids)
        elapsed = (time.perf_counter() - t0) * 1000.0
        if config.record_trajectory:
            traj.states.append(state.copy())
            traj.mean_probe_dist.append(mean_contact_distance(index, model, mesh))
            traj.scales.append(info["gradient"].scale)
            traj.wall_ms.append(elapsed)
    return state, traj


def worker_count():
    """Thread cap from GRAFT_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("GRAFT_THREADS", "1")))
    except ValueError:
        return 1


def refine(model, states, scene, weights, config, grids=None, rng=None, n_threads=None):
    """Refine every human against the scene.

    Args:
        states: list of HumanState.
        scene: ScenePointCloud (downsampled per config.max_points).
        grids: VisualFeatureGrids or None; geometry_only forces None.

    Returns:
        list of (refined HumanState, Trajectory), input order preserved.
    """
    if config.max_points is not None:
        scene = scene.downsample(config.max_points, rng or np.random.default_rng(0))
    index = SpatialIndex(scene)
    if config.geometry_only:
        grids = None
    n_threads = n_threads if n_threads is not None else worker_count()
    if n_threads > 1 and len(states) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            return list(
                pool.map(
                    lambda s: _refine_one(model, index, s, weights, config, grids),
                    states,
                )
            )
    return [_refine_one(model, index, s, weights, config, grids) for s in states]


def metric_align(model, state, mesh, scene, intrinsics):
    """Depth-ratio alignment: scale by (scene depth at head pixel) / (head depth).

    The head joint is projected to its pixel; the scene point angularly
    closest to that pixel's camera ray (within 2 degrees) supplies the scene
    depth, and the resulting ratio is folded into the state via absorb_scale.

    Raises:
        HeadNotVisible: head joint behind the camera or outside the image.
        NoScenePointOnRay: no cloud point within the angular tolerance.
    """
    head = mesh.joints[model.head_joint_id]
    uv = project(intrinsics, head)
    if uv is None or not pixel_in_image(intrinsics, uv):
        raise HeadNotVisible(f"head joint projects to {uv}")
    ray = unproject(intrinsics, uv[0], uv[1], 1.0)
    ray /= np.linalg.norm(ray)
    pts = scene.points
    norms = np.linalg.norm(pts, axis=1)
    cos_tol = np.cos(np.deg2rad(HEAD_RAY_TOLERANCE_DEG))
    valid = norms > 1e-12
    in_cone = np.zeros(len(pts), dtype=bool)
    in_cone[valid] = (pts[valid] @ ray) / norms[valid] >= cos_tol
    in_cone &= pts[:, 2] > 1e-6
    if not np.any(in_cone):
        raise NoScenePointOnRay("no scene point within 2 degrees of the head ray")
    # the visible surface at that pixel = nearest depth within the cone
    # (lowest index on ties), matching a z-buffered pointmap lookup
    depths = np.where(in_cone, pts[:, 2], np.inf)
    best = int(np.argmin(depths))
    s = float(pts[best, 2] / head[2])
    return absorb_scale(state, s, model)
