"""HSI token assembly and visual-anchor context sampling.

24 tokens per human in fixed order: 21 body joints (kinematic order), left
hand, right hand, full body. Each token encodes its geometric probes with
three learnable Fourier encoders plus its own slice of the parameter vector,
lifted to the transformer width by a per-class two-layer MLP; hand and
full-body tokens first compress each probe through a shared probe MLP.
"""

from dataclasses import dataclass

import numpy as np

from .body import N_BODY_JOINTS, N_HAND_PROBES, N_SURFACE_PROBES
from .container import read_container, write_container
from .errors import GridShapeMismatch, MissingTensor
from .nn_ops import linear, linear_vjp, mlp2, mlp2_vjp
from .probes import SURFACE_SLICE, FourierEncoder
from .scene import CameraIntrinsics, pixel_in_image, project

N_TOKENS = 24
N_LEVELS = 4
FULL_TOKEN = 23
# context tokens per HSI token: 3x3 neighborhood x 2 streams, or 27 x 2
N_CTX_JOINT = 18
N_CTX_FULL = 2 * N_SURFACE_PROBES


@dataclass(frozen=True)
class HsiTokenSet:
    """Embedded tokens plus the probe records and visual anchors behind them."""

    tokens: np.ndarray  # (24, width)
    probes: "ProbeSet"
    point_anchors: np.ndarray  # (23, 3) one visual anchor per body/hand token
    surface_anchors: np.ndarray  # (27, 3) full-body visual anchors

    def probe_indices(self, token):
        """Probe-set indices owned by a token (1 body, 5 hand, 27 full)."""
        return token_probe_indices(token)


def token_probe_indices(token):
    """Probe-set indices owned by a token (1 body, 5 hand, 27 full)."""
    if token < N_BODY_JOINTS:
        return [token]
    if token == N_BODY_JOINTS:
        return list(range(N_BODY_JOINTS, N_BODY_JOINTS + N_HAND_PROBES))
    if token == N_BODY_JOINTS + 1:
        return list(
            range(N_BODY_JOINTS + N_HAND_PROBES, N_BODY_JOINTS + 2 * N_HAND_PROBES)
        )
    return list(range(SURFACE_SLICE.start, SURFACE_SLICE.stop))


def context_sizes():
    """Cross-attention context token count per HSI token."""
    return [N_CTX_JOINT] * (N_TOKENS - 1) + [N_CTX_FULL]


def tokenize(model, state, mesh, probes, weights, need_tape=False):
    """Embed the probe set into the 24 HSI tokens.

    Returns HsiTokenSet, or (HsiTokenSet, tape) when need_tape.
    """
    w = weights.tensors
    enc_off = FourierEncoder(w["fourier/offset"])
    enc_nrm = FourierEncoder(w["fourier/normal"])
    enc_rel = FourierEncoder(w["fourier/body_rel"])
    e_off, ph_off = enc_off.encode(probes.offsets)
    e_nrm, ph_nrm = enc_nrm.encode(probes.normals)
    e_rel, ph_rel = enc_rel.encode(probes.body_relative)
    probe_feats = np.concatenate([e_off, e_nrm, e_rel], axis=-1)  # (58, 3E)

    body_in = np.concatenate(
        [probe_feats[:N_BODY_JOINTS], state.body_pose], axis=-1
    )
    body_tokens, tape_body = mlp2(
        body_in,
        w["tokenizer/body/w0"],
        w["tokenizer/body/b0"],
        w["tokenizer/body/w1"],
        w["tokenizer/body/b1"],
    )

    compressed, tape_probe = mlp2(
        probe_feats[N_BODY_JOINTS:],
        w["probe_mlp/w0"],
        w["probe_mlp/b0"],
        w["probe_mlp/w1"],
        w["probe_mlp/b1"],
    )
    pd = compressed.shape[-1]
    hand_in = np.stack(
        [
            np.concatenate(
                [compressed[:N_HAND_PROBES].ravel(), state.left_hand_pose.ravel()]
            ),
            np.concatenate(
                [
                    compressed[N_HAND_PROBES : 2 * N_HAND_PROBES].ravel(),
                    state.right_hand_pose.ravel(),
                ]
            ),
        ]
    )
    hand_tokens, tape_hand = mlp2(
        hand_in,
        w["tokenizer/hand/w0"],
        w["tokenizer/hand/b0"],
        w["tokenizer/hand/w1"],
        w["tokenizer/hand/b1"],
    )

    full_in = np.concatenate(
        [
            compressed[2 * N_HAND_PROBES :].ravel(),
            state.global_orient,
            state.translation,
            state.shape,
        ]
    )[None]
    full_token, tape_full = mlp2(
        full_in,
        w["tokenizer/full/w0"],
        w["tokenizer/full/b0"],
        w["tokenizer/full/w1"],
        w["tokenizer/full/b1"],
    )

    tokens = np.concatenate([body_tokens, hand_tokens, full_token], axis=0)
    token_set = HsiTokenSet(
        tokens=tokens,
        probes=probes,
        point_anchors=np.concatenate(
            [
                mesh.joints[model.body_joint_ids],
                mesh.joints[model.left_distal_ids].mean(axis=0, keepdims=True),
                mesh.joints[model.right_distal_ids].mean(axis=0, keepdims=True),
            ],
            axis=0,
        ),
        surface_anchors=mesh.vertices[model.surface_probe_ids],
    )
    if not need_tape:
        return token_set
    tape = {
        "probe_feats_tail": probe_feats[N_BODY_JOINTS:],
        "ph_off": ph_off,
        "ph_nrm": ph_nrm,
        "ph_rel": ph_rel,
        "compressed_dim": pd,
        "tape_body": tape_body,
        "tape_probe": tape_probe,
        "tape_hand": tape_hand,
        "tape_full": tape_full,
        "probes": probes,
    }
    return token_set, tape


def tokenize_vjp(model, state, weights, tape, d_tokens):
    """Backpropagate token gradients to probes, state and tokenizer weights.

    Returns:
        (d_offsets, d_body_relative, d_state_parts, d_weights) where
        d_state_parts maps block name -> gradient and d_weights maps tensor
        name -> gradient. Scene normals are inputs, not differentiated.
    """
    w = weights.tensors
    grads = {}
    d_body_tok = d_tokens[:N_BODY_JOINTS]
    d_hand_tok = d_tokens[N_BODY_JOINTS : N_BODY_JOINTS + 2]
    d_full_tok = d_tokens[N_BODY_JOINTS + 2 :]

    d_body_in, gw = mlp2_vjp(
        tape["tape_body"], w["tokenizer/body/w0"], w["tokenizer/body/w1"], d_body_tok
    )
    _store_mlp(grads, "tokenizer/body", gw)
    d_hand_in, gw = mlp2_vjp(
        tape["tape_hand"], w["tokenizer/hand/w0"], w["tokenizer/hand/w1"], d_hand_tok
    )
    _store_mlp(grads, "tokenizer/hand", gw)
    d_full_in, gw = mlp2_vjp(
        tape["tape_full"], w["tokenizer/full/w0"], w["tokenizer/full/w1"], d_full_tok
    )
    _store_mlp(grads, "tokenizer/full", gw)

    pd = tape["compressed_dim"]
    enc_width = tape["ph_off"].shape[-1] * 2 + 3
    probe_width = 3 * enc_width

    d_compressed = np.zeros((2 * N_HAND_PROBES + N_SURFACE_PROBES, pd))
    d_compressed[:N_HAND_PROBES] = d_hand_in[0, : N_HAND_PROBES * pd].reshape(-1, pd)
    d_compressed[N_HAND_PROBES : 2 * N_HAND_PROBES] = d_hand_in[
        1, : N_HAND_PROBES * pd
    ].reshape(-1, pd)
    d_compressed[2 * N_HAND_PROBES :] = d_full_in[
        0, : N_SURFACE_PROBES * pd
    ].reshape(-1, pd)

    d_state = {
        "body_pose": d_body_in[:, probe_width:],
        "left_hand_pose": d_hand_in[0, N_HAND_PROBES * pd :].reshape(-1, 6),
        "right_hand_pose": d_hand_in[1, N_HAND_PROBES * pd :].reshape(-1, 6),
        "global_orient": d_full_in[0, N_SURFACE_PROBES * pd : N_SURFACE_PROBES * pd + 6],
        "translation": d_full_in[0, N_SURFACE_PROBES * pd + 6 : N_SURFACE_PROBES * pd + 9],
        "shape": d_full_in[0, N_SURFACE_PROBES * pd + 9 :],
    }

    d_feats_tail, gw = mlp2_vjp(
        tape["tape_probe"], w["probe_mlp/w0"], w["probe_mlp/w1"], d_compressed
    )
    _store_mlp(grads, "probe_mlp", gw)

    d_probe_feats = np.concatenate([d_body_in[:, :probe_width], d_feats_tail], axis=0)
    probes = tape["probes"]
    enc_off = FourierEncoder(w["fourier/offset"])
    enc_nrm = FourierEncoder(w["fourier/normal"])
    enc_rel = FourierEncoder(w["fourier/body_rel"])
    d_offsets, grads["fourier/offset"] = enc_off.encode_vjp(
        probes.offsets, tape["ph_off"], d_probe_feats[:, :enc_width]
    )
    _, grads["fourier/normal"] = enc_nrm.encode_vjp(
        probes.normals, tape["ph_nrm"], d_probe_feats[:, enc_width : 2 * enc_width]
    )
    d_body_relative, grads["fourier/body_rel"] = enc_rel.encode_vjp(
        probes.body_relative, tape["ph_rel"], d_probe_feats[:, 2 * enc_width :]
    )
    return d_offsets, d_body_relative, d_state, grads


def _store_mlp(grads, prefix, gw):
    grads[f"{prefix}/w0"], grads[f"{prefix}/b0"], grads[f"{prefix}/w1"], grads[
        f"{prefix}/b1"
    ] = gw


# ---------------------------------------------------------------------------
# visual feature grids and anchor sampling


@dataclass(frozen=True)
class VisualFeatureGrids:
    """Two streams of 4-level feature grids sharing one token resolution."""

    scene_levels: tuple  # 4 x (H, W, C_l)
    interaction_levels: tuple  # 4 x (H, W, C_l)
    patch_size: float
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        if len(self.scene_levels) != N_LEVELS or len(self.interaction_levels) != N_LEVELS:
            raise GridShapeMismatch(f"expected {N_LEVELS} levels per stream")
        h, w = self.scene_levels[0].shape[:2]
        for lvl, (a, b) in enumerate(zip(self.scene_levels, self.interaction_levels)):
            if a.shape[:2] != (h, w) or b.shape[:2] != (h, w):
                raise GridShapeMismatch(f"level {lvl} grid resolution mismatch")
            if a.shape[2] != b.shape[2]:
                raise GridShapeMismatch(f"level {lvl} channel mismatch across streams")

    @property
    def grid_shape(self):
        return self.scene_levels[0].shape[:2]

    @property
    def level_channels(self):
        return tuple(g.shape[2] for g in self.scene_levels)

    def save(self, path):
        tensors = {}
        for i in range(N_LEVELS):
            tensors[f"stream_s_level{i}"] = self.scene_levels[i].astype(np.float32)
            tensors[f"stream_h_level{i}"] = self.interaction_levels[i].astype(np.float32)
        tensors["patch_size"] = np.array(self.patch_size, dtype=np.float64)
        k = self.intrinsics
        tensors["intrinsics"] = np.array(
            [k.fx, k.fy, k.cx, k.cy, k.width, k.height], dtype=np.float64
        )
        write_container(path, tensors)

    @staticmethod
    def load(path):
        t = read_container(path)
        for i in range(N_LEVELS):
            for s in ("s", "h"):
                if f"stream_{s}_level{i}" not in t:
                    raise MissingTensor(f"stream_{s}_level{i}")
        if "patch_size" not in t or "intrinsics" not in t:
            raise MissingTensor("patch_size/intrinsics")
        k = t["intrinsics"].astype(np.float64).ravel()
        return VisualFeatureGrids(
            scene_levels=tuple(
                t[f"stream_s_level{i}"].astype(np.float64) for i in range(N_LEVELS)
            ),
            interaction_levels=tuple(
                t[f"stream_h_level{i}"].astype(np.float64) for i in range(N_LEVELS)
            ),
            patch_size=float(t["patch_size"]),
            intrinsics=CameraIntrinsics(
                fx=k[0], fy=k[1], cx=k[2], cy=k[3], width=int(k[4]), height=int(k[5])
            ),
        )


def sample_dropout_mask(rng, p):
    """(24, 2) boolean mask; True drops that token's neighborhood in a stream."""
    return rng.random((N_TOKENS, 2)) < p


def sample_anchor_features(
    grids, token_set, weights, dropout_mask=None, need_tape=False
):
    """Per-token cross-attention context features from both streams.

    Body/hand tokens get a 3x3 grid-cell neighborhood around their projected
    anchor per stream (18 context tokens); the full-body token gets one cell
    per surface anchor per stream (54). Anchors behind the camera or outside
    the image produce zero context vectors, as do dropped (token, stream)
    pairs and neighborhood cells falling off the grid.

    Returns:
        (contexts, anchor_pixels) or (contexts, anchor_pixels, tape);
        contexts is a list of 24 arrays (n_ctx, width), anchor_pixels is a
        (50, 2) array with NaN rows for invisible anchors.
    """
    w = weights.tensors
    arch = weights.arch
    if grids.level_channels != tuple(arch.level_channels):
        raise GridShapeMismatch(
            f"grid channels {grids.level_channels} != weights {tuple(arch.level_channels)}"
        )
    gh, gw_ = grids.grid_shape
    patch = grids.patch_size
    intr = grids.intrinsics
    streams = (grids.scene_levels, grids.interaction_levels)

    anchors = np.concatenate([token_set.point_anchors, token_set.surface_anchors])
    pixels = np.full((len(anchors), 2), np.nan)
    cells = np.full((len(anchors), 2), -1, dtype=np.int64)  # (cy, cx)
    for i, a in enumerate(anchors):
        uv = project(intr, a)
        if uv is None or not pixel_in_image(intr, uv):
            continue
        pixels[i] = uv
        cells[i] = (int(uv[1] // patch), int(uv[0] // patch))

    # slot bookkeeping: one entry per (token, stream, ctx_slot) that samples a
    # real cell; everything else stays zero
    slot_token, slot_ctx, slot_stream, slot_cy, slot_cx = [], [], [], [], []

    def add_slot(token, ctx, stream, cy, cx):
        if 0 <= cy < gh and 0 <= cx < gw_:
            slot_token.append(token)
            slot_ctx.append(ctx)
            slot_stream.append(stream)
            slot_cy.append(cy)
            slot_cx.append(cx)

    for token in range(N_TOKENS - 1):
        if cells[token, 0] < 0:
            continue
        cy, cx = cells[token]
        for stream in range(2):
            if dropout_mask is not None and dropout_mask[token, stream]:
                continue
            slot = 9 * stream
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    add_slot(token, slot, stream, cy + dy, cx + dx)
                    slot += 1
    for a in range(N_SURFACE_PROBES):
        idx = N_TOKENS - 1 + a
        if cells[idx, 0] < 0:
            continue
        cy, cx = cells[idx]
        for stream in range(2):
            if dropout_mask is not None and dropout_mask[FULL_TOKEN, stream]:
                continue
            add_slot(FULL_TOKEN, a + N_SURFACE_PROBES * stream, stream, cy, cx)

    sizes = context_sizes()
    contexts = [np.zeros((n, arch.width)) for n in sizes]
    tape = None
    if slot_token:
        stream_arr = np.array(slot_stream)
        cy_arr = np.array(slot_cy)
        cx_arr = np.array(slot_cx)
        level_inputs = []
        projected = []
        for lvl in range(N_LEVELS):
            feats = np.empty((len(slot_token), arch.level_channels[lvl]))
            for s in range(2):
                sel = stream_arr == s
                feats[sel] = streams[s][lvl][cy_arr[sel], cx_arr[sel]]
            level_inputs.append(feats)
            projected.append(
                linear(feats, w[f"visual/level{lvl}/w"], w[f"visual/level{lvl}/b"])
            )
        fuse_in = np.concatenate(projected, axis=-1)
        fused = linear(fuse_in, w["visual/fuse/w"], w["visual/fuse/b"])
        fused = fused + w["visual/stream_embed"][stream_arr]
        for i, (token, ctx) in enumerate(zip(slot_token, slot_ctx)):
            contexts[token][ctx] = fused[i]
        if need_tape:
            tape = {
                "slot_token": slot_token,
                "slot_ctx": slot_ctx,
                "stream_arr": stream_arr,
                "level_inputs": level_inputs,
                "fuse_in": fuse_in,
            }
    elif need_tape:
        tape = {"slot_token": [], "slot_ctx": [], "stream_arr": None}
    if need_tape:
        return contexts, pixels, tape
    return contexts, pixels


def anchor_features_vjp(weights, tape, d_contexts):
    """Gradients of the sampling path w.r.t. the visual projection weights.

    Grid contents are inputs and cell selection is piecewise constant, so no
    gradient flows to anchors or grids.
    """
    w = weights.tensors
    grads = {}
    if not tape["slot_token"]:
        return grads
    d_fused = np.stack(
        [
            d_contexts[token][ctx]
            for token, ctx in zip(tape["slot_token"], tape["slot_ctx"])
        ]
    )
    embed = np.zeros_like(w["visual/stream_embed"])
    np.add.at(embed, tape["stream_arr"], d_fused)
    grads["visual/stream_embed"] = embed
    d_fuse_in, grads["visual/fuse/w"], grads["visual/fuse/b"] = linear_vjp(
        tape["fuse_in"], w["visual/fuse/w"], d_fused
    )
    dim = weights.arch.level_proj_dim
    for lvl in range(N_LEVELS):
        d_proj = d_fuse_in[:, lvl * dim : (lvl + 1) * dim]
        _, grads[f"visual/level{lvl}/w"], grads[f"visual/level{lvl}/b"] = linear_vjp(
            tape["level_inputs"][lvl], w[f"visual/level{lvl}/w"], d_proj
        )
    return grads
