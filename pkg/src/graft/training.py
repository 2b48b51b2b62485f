"""Desk-scale training harness: losses, query sampling, schedule, optimizer.

The rollout loss supervises every refinement step: per-group 6D rotation
error, camera-relative vertex error and mean-centered vertex error. Gradients
come from hand-written reverse mode through the whole unrolled loop (probes,
tokenizers, transformer, heads, scale absorption, skinning); a central
finite-difference oracle (h = 1e-4) verifies them and remains available via
grad_mode="fd".
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .body import HumanState, absorb_scale, absorb_scale_vjp, forward, lbs_vjp
from .errors import DimensionMismatch, NonFiniteLoss
from .network import decode, decode_vjp, transformer_forward, transformer_vjp
from .probes import compute_probes, probes_vjp
from .rotation import (
    axis_angle_to_matrix,
    matrix_to_rot6d,
    orthonormalize_rot6d,
    orthonormalize_rot6d_vjp,
    rot6d_to_matrix,
)
from .scene import ScenePointCloud, SpatialIndex
from .tokens import anchor_features_vjp, sample_anchor_features, tokenize, tokenize_vjp

FULL_SCALE_ITERATIONS = 150_000
FULL_SCALE_WARMUP = 2_000
FULL_SCALE_SWITCH = 10_000


@dataclass(frozen=True)
class LossWeights:
    vertex: float = 7.0  # camera-relative vertices
    centered: float = 5.0  # mean-normalized vertices
    rot_global: float = 5.0
    rot_body: float = 2.0
    rot_left_hand: float = 0.5
    rot_right_hand: float = 0.5

    def __post_init__(self):
        if min(
            self.vertex,
            self.centered,
            self.rot_global,
            self.rot_body,
            self.rot_left_hand,
            self.rot_right_hand,
        ) <= 0:
            raise ValueError("loss weights must be positive")


@dataclass(frozen=True)
class PerturbationSpec:
    translation_sigma: float = 0.1  # meters per axis
    shape_sigma: float = 0.03
    joint_rotation_sigma_deg: float = 7.0
    global_rotation_sigma_deg: float = 3.0
    clean_probability: float = 0.2

    def __post_init__(self):
        if min(
            self.translation_sigma,
            self.shape_sigma,
            self.joint_rotation_sigma_deg,
            self.global_rotation_sigma_deg,
        ) < 0:
            raise ValueError("sigmas must be >= 0")
        if not 0.0 <= self.clean_probability <= 1.0:
            raise ValueError("clean probability must be in [0, 1]")

    def scaled(self, factor):
        return replace(
            self,
            translation_sigma=self.translation_sigma * factor,
            shape_sigma=self.shape_sigma * factor,
            joint_rotation_sigma_deg=self.joint_rotation_sigma_deg * factor,
            global_rotation_sigma_deg=self.global_rotation_sigma_deg * factor,
        )


@dataclass(frozen=True)
class TrainSchedule:
    total_iterations: int
    warmup: int = FULL_SCALE_WARMUP
    peak_lr: float = 1e-4
    floor_lr: float = 2e-7
    rollout_switch: int = FULL_SCALE_SWITCH
    rollout_steps: int = 3
    scale_augment: tuple = (0.85, 1.15)
    anchor_dropout: float = 0.35
    batch_size: int = 16

    def __post_init__(self):
        if not 0 < self.warmup < self.total_iterations:
            raise ValueError("need 0 < warmup < total_iterations")
        if not 0.0 <= self.anchor_dropout <= 1.0:
            raise ValueError("dropout probability must be in [0, 1]")

    @staticmethod
    def micro(total_iterations, batch_size=16, rollout_steps=3):
        """Warmup and rollout switch scale proportionally for short runs."""
        frac = total_iterations / FULL_SCALE_ITERATIONS
        return TrainSchedule(
            total_iterations=total_iterations,
            warmup=max(1, round(FULL_SCALE_WARMUP * frac)),
            rollout_switch=max(1, round(FULL_SCALE_SWITCH * frac)),
            rollout_steps=rollout_steps,
            batch_size=batch_size,
        )

    def lr_at(self, k):
        """Linear warmup 0 -> peak, then cosine decay peak -> floor."""
        if k <= self.warmup:
            return self.peak_lr * k / self.warmup
        span = self.total_iterations - self.warmup
        phase = (k - self.warmup) / span
        return self.floor_lr + 0.5 * (self.peak_lr - self.floor_lr) * (
            1.0 + math.cos(math.pi * phase)
        )


def rollout_supervised_steps(iteration, schedule):
    """Curriculum rollout: single-step supervision before the switch, T after."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return 1 if iteration < schedule.rollout_switch else schedule.rollout_steps


# ---------------------------------------------------------------------------
# losses


def _rotation_group_weights(lw):
    return {
        "global_orient": lw.rot_global,
        "body_pose": lw.rot_body,
        "left_hand_pose": lw.rot_left_hand,
        "right_hand_pose": lw.rot_right_hand,
    }


def _sq(x):
    return float(np.sum(x * x))


def step_loss(pred_states, gt_state, model, loss_weights, gt_mesh=None):
    """Trajectory loss summed over the supervised steps.

    Args:
        pred_states: list of HumanState, one per supervised refinement step.

    Returns:
        (total, breakdown) with per-term sums {rotation, vertex, centered}.
    """
    if not pred_states:
        raise DimensionMismatch("need at least one predicted state")
    gt_state.validate()
    if gt_mesh is None:
        gt_mesh = forward(model, gt_state)
    gt_v = gt_mesh.vertices
    gt_centered = gt_v - gt_v.mean(axis=0)
    groups = _rotation_group_weights(loss_weights)
    total = 0.0
    breakdown = {"rotation": 0.0, "vertex": 0.0, "centered": 0.0}
    for state in pred_states:
        state.validate()
        rot = sum(
            w * _sq(getattr(state, name) - getattr(gt_state, name))
            for name, w in groups.items()
        )
        v = forward(model, state).vertices
        vert = loss_weights.vertex * _sq(v - gt_v)
        centered = loss_weights.centered * _sq(v - v.mean(axis=0) - gt_centered)
        breakdown["rotation"] += rot
        breakdown["vertex"] += vert
        breakdown["centered"] += centered
        total += rot + vert + centered
    return total, breakdown


def _loss_state_grad(state, gt_state, loss_weights):
    """d loss / d (6D rotation blocks) for one supervised step."""
    g = HumanState.zeros()
    for name, w in _rotation_group_weights(loss_weights).items():
        setattr(g, name, 2.0 * w * (getattr(state, name) - getattr(gt_state, name)))
    return g


def _loss_vertex_grad(vertices, gt_vertices, gt_centered, loss_weights):
    d = 2.0 * loss_weights.vertex * (vertices - gt_vertices)
    gn = 2.0 * loss_weights.centered * (
        vertices - vertices.mean(axis=0) - gt_centered
    )
    return d + gn - gn.mean(axis=0)


# ---------------------------------------------------------------------------
# query sampling


def _perturb_rot6d(rows, sigma_rad, rng):
    rows = np.atleast_2d(rows)
    out = np.empty_like(rows)
    for i, r in enumerate(rows):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        angle = rng.normal(0.0, sigma_rad)
        noise = axis_angle_to_matrix(axis, angle)
        out[i] = matrix_to_rot6d(noise @ rot6d_to_matrix(r))
    return out


def sample_query(gt_state, spec, rng):
    """Perturbed-GT training query (clean with spec.clean_probability)."""
    if rng.random() < spec.clean_probability:
        return gt_state.copy()
    if (
        spec.translation_sigma == 0.0
        and spec.shape_sigma == 0.0
        and spec.joint_rotation_sigma_deg == 0.0
        and spec.global_rotation_sigma_deg == 0.0
    ):
        return gt_state.copy()
    out = gt_state.copy()
    out.translation = gt_state.translation + rng.normal(
        0.0, spec.translation_sigma, 3
    )
    out.shape = gt_state.shape + rng.normal(0.0, spec.shape_sigma, len(gt_state.shape))
    sj = np.deg2rad(spec.joint_rotation_sigma_deg)
    sg = np.deg2rad(spec.global_rotation_sigma_deg)
    out.global_orient = _perturb_rot6d(gt_state.global_orient, sg, rng)[0]
    out.body_pose = _perturb_rot6d(gt_state.body_pose, sj, rng)
    out.left_hand_pose = _perturb_rot6d(gt_state.left_hand_pose, sj, rng)
    out.right_hand_pose = _perturb_rot6d(gt_state.right_hand_pose, sj, rng)
    return out


# ---------------------------------------------------------------------------
# differentiable rollout


def _stack_gradient_blocks(grad):
    return np.concatenate(
        [
            grad.d_global[None],
            grad.d_body,
            grad.d_left_hand,
            grad.d_right_hand,
        ]
    )


def rollout_forward(
    model,
    index,
    query_state,
    gt_state,
    weights,
    steps,
    loss_weights,
    grids=None,
    dropout_mask=None,
    need_tape=False,
):
    """Unrolled refinement with per-step supervision.

    The update path matches engine.refine_step numerically but never takes
    the no-op shortcut, so it stays differentiable at zero deltas.

    Returns:
        (loss, breakdown, states) or (loss, breakdown, states, tapes)
    """
    gt_mesh = forward(model, gt_state)
    gt_v = gt_mesh.vertices
    gt_centered = gt_v - gt_v.mean(axis=0)
    state = query_state
    mesh, lbs_tape = forward(model, state, need_tape=True)
    total = 0.0
    breakdown = {"rotation": 0.0, "vertex": 0.0, "centered": 0.0}
    states = []
    tapes = []
    for _ in range(steps):
        probes = compute_probes(index, model, mesh, lbs_tape["rot_world"][0])
        token_set, tok_tape = tokenize(
            model, state, mesh, probes, weights, need_tape=True
        )
        contexts = ctx_tape = None
        if grids is not None:
            contexts, _, ctx_tape = sample_anchor_features(
                grids, token_set, weights, dropout_mask=dropout_mask, need_tape=True
            )
        refined, tr_tape = transformer_forward(
            token_set.tokens, contexts, weights, need_tape=True
        )
        grad, dec_tape = decode(refined, weights, need_tape=True)
        summed = state.stacked_rot6d() + _stack_gradient_blocks(grad)
        new_stacked = orthonormalize_rot6d(summed)
        pre_absorb = HumanState.from_stacked_rot6d(
            new_stacked,
            state.translation + grad.d_translation,
            state.shape + grad.d_shape,
        )
        new_state = absorb_scale(pre_absorb, grad.scale, model)
        new_mesh, new_lbs_tape = forward(model, new_state, need_tape=True)

        rot_grad_groups = _rotation_group_weights(loss_weights)
        rot = sum(
            w * _sq(getattr(new_state, name) - getattr(gt_state, name))
            for name, w in rot_grad_groups.items()
        )
        vert = loss_weights.vertex * _sq(new_mesh.vertices - gt_v)
        centered = loss_weights.centered * _sq(
            new_mesh.vertices - new_mesh.vertices.mean(axis=0) - gt_centered
        )
        total += rot + vert + centered
        breakdown["rotation"] += rot
        breakdown["vertex"] += vert
        breakdown["centered"] += centered
        states.append(new_state)
        if need_tape:
            tapes.append(
                {
                    "probes": probes,
                    "tok_tape": tok_tape,
                    "ctx_tape": ctx_tape,
                    "tr_tape": tr_tape,
                    "dec_tape": dec_tape,
                    "summed": summed,
                    "pre_absorb": pre_absorb,
                    "scale": grad.scale,
                    "state_in": state,
                    "new_state": new_state,
                    "new_mesh": new_mesh,
                    "new_lbs_tape": new_lbs_tape,
                }
            )
        state, mesh, lbs_tape = new_state, new_mesh, new_lbs_tape
    if need_tape:
        return total, breakdown, states, {"steps": tapes, "gt_v": gt_v, "gt_centered": gt_centered}
    return total, breakdown, states


def rollout_backward(model, gt_state, weights, loss_weights, tape):
    """Reverse sweep of rollout_forward; returns weight gradients (dict)."""
    grads = weights.zeros_like()
    d_state = HumanState.zeros()
    d_vertices = np.zeros((model.n_vertices, 3))
    d_joints = np.zeros((model.n_joints, 3))
    d_rot_world = np.zeros((model.n_joints, 3, 3))
    gt_v, gt_centered = tape["gt_v"], tape["gt_centered"]

    def add_state(dst, src):
        dst.global_orient += src.global_orient
        dst.body_pose += src.body_pose
        dst.left_hand_pose += src.left_hand_pose
        dst.right_hand_pose += src.right_hand_pose
        dst.translation += src.translation
        dst.shape += src.shape

    for t in reversed(range(len(tape["steps"]))):
        st = tape["steps"][t]
        new_state = st["new_state"]
        # direct loss contributions at this supervised step
        add_state(d_state, _loss_state_grad(new_state, gt_state, loss_weights))
        d_vertices += _loss_vertex_grad(
            st["new_mesh"].vertices, gt_v, gt_centered, loss_weights
        )
        # mesh_{t+1} = forward(state_{t+1})
        add_state(
            d_state,
            lbs_vjp(model, st["new_lbs_tape"], d_vertices, d_joints, d_rot_world),
        )
        # state_{t+1} = absorb_scale(pre_absorb, s)
        d_pre_shape, d_pre_trans, d_s = absorb_scale_vjp(
            st["pre_absorb"], st["scale"], model, d_state.shape, d_state.translation
        )
        d_summed = orthonormalize_rot6d_vjp(st["summed"], d_state.stacked_rot6d())
        d_grad = {
            "d_global": d_summed[0],
            "d_body": d_summed[1:22],
            "d_left_hand": d_summed[22:37],
            "d_right_hand": d_summed[37:52],
            "d_translation": d_pre_trans,
            "d_shape": d_pre_shape,
        }
        d_prev = HumanState.from_stacked_rot6d(d_summed, d_pre_trans, d_pre_shape)
        d_refined, head_grads = decode_vjp(weights, st["dec_tape"], d_grad, d_s)
        _accumulate(grads, head_grads)
        d_tokens, d_contexts, tr_grads = transformer_vjp(
            weights, st["tr_tape"], d_refined
        )
        _accumulate(grads, tr_grads)
        if d_contexts is not None and st["ctx_tape"] is not None:
            _accumulate(
                grads, anchor_features_vjp(weights, st["ctx_tape"], d_contexts)
            )
        d_offsets, d_brel, d_state_ctx, tok_grads = tokenize_vjp(
            model, st["state_in"], weights, st["tok_tape"], d_tokens
        )
        _accumulate(grads, tok_grads)
        d_prev.body_pose += d_state_ctx["body_pose"]
        d_prev.left_hand_pose += d_state_ctx["left_hand_pose"]
        d_prev.right_hand_pose += d_state_ctx["right_hand_pose"]
        d_prev.global_orient += d_state_ctx["global_orient"]
        d_prev.translation += d_state_ctx["translation"]
        d_prev.shape += d_state_ctx["shape"]
        d_vertices, d_joints, d_rot0 = probes_vjp(
            model, st["probes"], d_offsets, d_brel
        )
        d_rot_world = np.zeros((model.n_joints, 3, 3))
        d_rot_world[0] = d_rot0
        d_state = d_prev
    # remaining gradients belong to the query (data); dropped
    return grads


def _accumulate(total, part):
    for name, g in part.items():
        total[name] += g


def rollout_loss_and_grad(
    model,
    index,
    query_state,
    gt_state,
    weights,
    steps,
    loss_weights,
    grids=None,
    dropout_mask=None,
):
    loss, breakdown, states, tape = rollout_forward(
        model,
        index,
        query_state,
        gt_state,
        weights,
        steps,
        loss_weights,
        grids=grids,
        dropout_mask=dropout_mask,
        need_tape=True,
    )
    grads = rollout_backward(model, gt_state, weights, loss_weights, tape)
    return loss, breakdown, states, grads


# ---------------------------------------------------------------------------
# finite differences (verification oracle)


def finite_diff_grad(loss_fn, weights, h=1e-4, coords=None):
    """Central finite differences of loss_fn() w.r.t. the weight tensors.

    Args:
        loss_fn: zero-argument callable reading weights.tensors.
        coords: optional list of (name, flat_index) to probe; None probes all.

    Returns:
        dict name -> gradient array (full mode), or list of gradients
        aligned with coords.
    """
    if coords is None:
        out = {}
        for name, tensor in weights.tensors.items():
            g = np.zeros_like(tensor)
            flat = tensor.reshape(-1)
            gf = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi = loss_fn()
                flat[i] = orig - h
                lo = loss_fn()
                flat[i] = orig
                gf[i] = (hi - lo) / (2.0 * h)
            out[name] = g
        return out
    out = []
    for name, idx in coords:
        flat = weights.tensors[name].reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        hi = loss_fn()
        flat[idx] = orig - h
        lo = loss_fn()
        flat[idx] = orig
        out.append((hi - lo) / (2.0 * h))
    return out


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction over a dict of named tensors."""

    def __init__(self, tensors, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}

    def step(self, tensors, grads, lr):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            tensors[name] -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


# ---------------------------------------------------------------------------
# micro training loop


@dataclass
class MicroTask:
    """A self-contained training task: one scene, one GT state, one eval init."""

    model: object
    scene: ScenePointCloud
    gt_state: HumanState
    eval_init: HumanState
    perturbation: PerturbationSpec = PerturbationSpec()
    # hard queries stand in for out-of-scope regressor inits: doubled sigmas
    # plus a metric-scale mismatch for the scale head to undo
    hard_factor: float = 2.0
    hard_probability: float = 0.4
    hard_scale_mismatch: tuple = (0.85, 1.15)


def micro_train(
    task,
    schedule,
    weights,
    seed,
    loss_weights=None,
    grad_mode="analytic",
    use_scale_augment=True,
    progress=None,
):
    """Train the weights in place on the task; returns the loss curve rows.

    Per iteration the batch mixes clean GT queries (p = 0.2), standard-sigma
    perturbations and doubled-sigma "hard" queries. Scale augmentation draws
    one factor per sample and applies it jointly to GT, query and scene so
    contact relations survive. eval_loss tracks the full-T rollout loss of
    the fixed held-out init under the current weights.
    """
    lw = loss_weights or LossWeights()
    rng = np.random.default_rng(seed)
    adam = Adam(weights.tensors)
    base_index = SpatialIndex(task.scene)
    spec = task.perturbation
    hard_spec = replace(spec.scaled(task.hard_factor), clean_probability=0.0)
    curve = []
    for k in range(schedule.total_iterations):
        steps = rollout_supervised_steps(k, schedule)
        lr = schedule.lr_at(k)
        batch_grads = weights.zeros_like()
        batch_loss = 0.0
        for _ in range(schedule.batch_size):
            roll = rng.random()
            if roll < spec.clean_probability:
                query = task.gt_state.copy()
            elif roll < spec.clean_probability + task.hard_probability:
                query = sample_query(task.gt_state, hard_spec, rng)
                mismatch = rng.uniform(*task.hard_scale_mismatch)
                query = absorb_scale(query, mismatch, task.model)
            else:
                query = sample_query(
                    task.gt_state, replace(spec, clean_probability=0.0), rng
                )
            gt = task.gt_state
            index = base_index
            if use_scale_augment:
                u = rng.uniform(*schedule.scale_augment)
                gt = absorb_scale(gt, u, task.model)
                query = absorb_scale(query, u, task.model)
                index = SpatialIndex(
                    ScenePointCloud(
                        points=task.scene.points * u,
                        normals=task.scene.normals,
                        camera_origin=task.scene.camera_origin * u,
                    )
                )
            if grad_mode == "fd":
                loss, _, _ = rollout_forward(
                    task.model, index, query, gt, weights, steps, lw
                )
                grads = finite_diff_grad(
                    lambda: rollout_forward(
                        task.model, index, query, gt, weights, steps, lw
                    )[0],
                    weights,
                )
            else:
                loss, _, _, grads = rollout_loss_and_grad(
                    task.model, index, query, gt, weights, steps, lw
                )
            if not np.isfinite(loss):
                raise NonFiniteLoss(
                    f"iteration {k}: rollout loss is {loss}; lr={lr}, steps={steps}"
                )
            batch_loss += loss
            _accumulate(batch_grads, grads)
        inv = 1.0 / schedule.batch_size
        batch_loss *= inv
        for name in batch_grads:
            batch_grads[name] *= inv
        adam.step(weights.tensors, batch_grads, lr)
        eval_loss, _, _ = rollout_forward(
            task.model,
            base_index,
            task.eval_init,
            task.gt_state,
            weights,
            schedule.rollout_steps,
            lw,
        )
        curve.append(
            {
                "iteration": k,
                "lr": lr,
                "supervised_steps": steps,
                "train_loss": batch_loss,
                "eval_loss": eval_loss,
            }
        )
        if progress is not None:
            progress(curve[-1])
    return curve
