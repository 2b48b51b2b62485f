"""Refinement transformer: weights, forward pass and decoder heads.

5 pre-norm layers, each {self-attention over the 24 tokens, anchor-constrained
cross-attention (skipped without visual context), GELU feed-forward}, all with
residual connections. Decoder heads read the final-norm tokens and emit the
corrective update: per-joint 6D deltas, translation, shape and a positive
uniform scale (exp of the raw head output).
"""

from dataclasses import dataclass

import numpy as np

from .body import N_BODY_JOINTS, N_HAND_JOINTS, N_SHAPE
from .container import read_container, write_container
from .errors import ShapeMismatch, WeightShapeMismatch
from .nn_ops import attention, attention_vjp, layer_norm, layer_norm_vjp, mlp2, mlp2_vjp
from .tokens import FULL_TOKEN, N_LEVELS, N_TOKENS

_HEAD_DIMS = {
    "body": 6,
    "hand": N_HAND_JOINTS * 6,  # 15 x 6D per hand token
    "global": 6,
    "translation": 3,
    "shape": N_SHAPE,
    "scale": 1,
}


@dataclass(frozen=True)
class ArchitectureConfig:
    """All size constants of the network; stored inside the weight container."""

    width: int = 512
    layers: int = 5
    heads: int = 8
    ffn_hidden: int = 2048
    fourier_freqs: int = 32
    probe_hidden: int = 128
    probe_dim: int = 64
    head_hidden: int = 256
    visual: bool = False
    level_channels: tuple = (1024, 1024, 1024, 1024)

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise WeightShapeMismatch("width must be divisible by heads")
        if self.width % 4 != 0:
            raise WeightShapeMismatch("width must be divisible by 4")
        if len(self.level_channels) != N_LEVELS:
            raise WeightShapeMismatch(f"need {N_LEVELS} level channel counts")

    @property
    def enc_dim(self):
        return 2 * self.fourier_freqs + 3

    @property
    def probe_in(self):
        return 3 * self.enc_dim

    @property
    def body_in(self):
        return self.probe_in + 6

    @property
    def hand_in(self):
        return 5 * self.probe_dim + N_HAND_JOINTS * 6

    @property
    def full_in(self):
        return 27 * self.probe_dim + 6 + 3 + N_SHAPE

    @property
    def level_proj_dim(self):
        return self.width // 4

    @staticmethod
    def micro(visual=False):
        """Desk-scale constants small enough for finite-difference checks."""
        return ArchitectureConfig(
            width=32,
            layers=2,
            heads=4,
            ffn_hidden=128,
            fourier_freqs=4,
            probe_hidden=32,
            probe_dim=16,
            head_hidden=32,
            visual=visual,
            level_channels=(8, 8, 8, 8),
        )


def weight_shapes(arch):
    """Ordered name -> shape table for every learnable tensor."""
    d = arch.width
    shapes = {
        "fourier/offset": (arch.fourier_freqs, 3),
        "fourier/normal": (arch.fourier_freqs, 3),
        "fourier/body_rel": (arch.fourier_freqs, 3),
        "probe_mlp/w0": (arch.probe_in, arch.probe_hidden),
        "probe_mlp/b0": (arch.probe_hidden,),
        "probe_mlp/w1": (arch.probe_hidden, arch.probe_dim),
        "probe_mlp/b1": (arch.probe_dim,),
    }
    for name, n_in in (
        ("body", arch.body_in),
        ("hand", arch.hand_in),
        ("full", arch.full_in),
    ):
        shapes[f"tokenizer/{name}/w0"] = (n_in, d)
        shapes[f"tokenizer/{name}/b0"] = (d,)
        shapes[f"tokenizer/{name}/w1"] = (d, d)
        shapes[f"tokenizer/{name}/b1"] = (d,)
    for i in range(arch.layers):
        shapes[f"layers/{i}/norm_self/gain"] = (d,)
        shapes[f"layers/{i}/norm_self/bias"] = (d,)
        for p in ("q", "k", "v", "o"):
            shapes[f"layers/{i}/self/w{p}"] = (d, d)
            shapes[f"layers/{i}/self/b{p}"] = (d,)
        if arch.visual:
            shapes[f"layers/{i}/norm_cross/gain"] = (d,)
            shapes[f"layers/{i}/norm_cross/bias"] = (d,)
            for p in ("q", "k", "v", "o"):
                shapes[f"layers/{i}/cross/w{p}"] = (d, d)
                shapes[f"layers/{i}/cross/b{p}"] = (d,)
        shapes[f"layers/{i}/norm_ffn/gain"] = (d,)
        shapes[f"layers/{i}/norm_ffn/bias"] = (d,)
        shapes[f"layers/{i}/ffn/w0"] = (d, arch.ffn_hidden)
        shapes[f"layers/{i}/ffn/b0"] = (arch.ffn_hidden,)
        shapes[f"layers/{i}/ffn/w1"] = (arch.ffn_hidden, d)
        shapes[f"layers/{i}/ffn/b1"] = (d,)
    shapes["final_norm/gain"] = (d,)
    shapes["final_norm/bias"] = (d,)
    for head, out in _HEAD_DIMS.items():
        shapes[f"heads/{head}/w0"] = (d, arch.head_hidden)
        shapes[f"heads/{head}/b0"] = (arch.head_hidden,)
        shapes[f"heads/{head}/w1"] = (arch.head_hidden, out)
        shapes[f"heads/{head}/b1"] = (out,)
    if arch.visual:
        for lvl in range(N_LEVELS):
            shapes[f"visual/level{lvl}/w"] = (arch.level_channels[lvl], arch.level_proj_dim)
            shapes[f"visual/level{lvl}/b"] = (arch.level_proj_dim,)
        shapes["visual/fuse/w"] = (d, d)
        shapes["visual/fuse/b"] = (d,)
        shapes["visual/stream_embed"] = (2, d)
    return shapes


def expected_param_count(arch):
    """Closed-form learnable parameter count for the architecture constants."""
    d = arch.width
    lin = lambda n_in, n_out: n_in * n_out + n_out
    count = 3 * arch.fourier_freqs * 3
    count += lin(arch.probe_in, arch.probe_hidden) + lin(arch.probe_hidden, arch.probe_dim)
    for n_in in (arch.body_in, arch.hand_in, arch.full_in):
        count += lin(n_in, d) + lin(d, d)
    per_layer = 2 * d + 4 * lin(d, d)  # self-attn + its norm
    if arch.visual:
        per_layer += 2 * d + 4 * lin(d, d)  # cross-attn + its norm
    per_layer += 2 * d + lin(d, arch.ffn_hidden) + lin(arch.ffn_hidden, d)
    count += arch.layers * per_layer
    count += 2 * d  # final norm
    for out in _HEAD_DIMS.values():
        count += lin(d, arch.head_hidden) + lin(arch.head_hidden, out)
    if arch.visual:
        for c in arch.level_channels:
            count += lin(c, arch.level_proj_dim)
        count += lin(d, d) + 2 * d
    return count


class TransformerWeights:
    """Named learnable tensors + architecture constants; immutable by convention."""

    def __init__(self, arch, tensors):
        self.arch = arch
        self.tensors = tensors
        self.validate()

    def validate(self):
        shapes = weight_shapes(self.arch)
        for name, shape in shapes.items():
            if name not in self.tensors:
                raise WeightShapeMismatch(f"missing tensor {name!r}")
            got = self.tensors[name].shape
            if tuple(got) != shape:
                raise WeightShapeMismatch(f"{name}: expected {shape}, got {got}")
        extra = set(self.tensors) - set(shapes)
        if extra:
            raise WeightShapeMismatch(f"unexpected tensors {sorted(extra)}")

    def param_count(self):
        return sum(int(np.prod(t.shape)) for t in self.tensors.values())

    @staticmethod
    def init_random(arch, seed):
        """Seeded initialization; decoder head output layers start at zero so a
        fresh network is a no-op refiner (predicts zero update, scale 1)."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in weight_shapes(arch).items():
            leaf = name.rsplit("/", 1)[-1]
            if name.startswith("fourier/"):
                tensors[name] = rng.standard_normal(shape)
            elif name == "visual/stream_embed":
                tensors[name] = 0.02 * rng.standard_normal(shape)
            elif leaf in ("gain",):
                tensors[name] = np.ones(shape)
            elif leaf in ("bias",) or leaf.startswith("b"):
                tensors[name] = np.zeros(shape)
            elif name.startswith("heads/") and leaf == "w1":
                tensors[name] = np.zeros(shape)
            else:
                tensors[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
        return TransformerWeights(arch, tensors)

    @staticmethod
    def init_zero(arch):
        tensors = {
            name: np.zeros(shape) for name, shape in weight_shapes(arch).items()
        }
        return TransformerWeights(arch, tensors)

    def zeros_like(self):
        return {name: np.zeros_like(t) for name, t in self.tensors.items()}

    def save(self, path):
        """f32 payloads plus the architecture constants."""
        arch = self.arch
        out = {
            "arch/width": np.array(arch.width, dtype=np.int64),
            "arch/layers": np.array(arch.layers, dtype=np.int64),
            "arch/heads": np.array(arch.heads, dtype=np.int64),
            "arch/ffn_hidden": np.array(arch.ffn_hidden, dtype=np.int64),
            "arch/fourier_freqs": np.array(arch.fourier_freqs, dtype=np.int64),
            "arch/probe_hidden": np.array(arch.probe_hidden, dtype=np.int64),
            "arch/probe_dim": np.array(arch.probe_dim, dtype=np.int64),
            "arch/head_hidden": np.array(arch.head_hidden, dtype=np.int64),
            "arch/visual": np.array(int(arch.visual), dtype=np.int64),
            "arch/level_channels": np.array(arch.level_channels, dtype=np.int64),
        }
        for name, t in self.tensors.items():
            out[name] = t.astype(np.float32)
        write_container(path, out)

    @staticmethod
    def load(path):
        t = read_container(path)
        try:
            arch = ArchitectureConfig(
                width=int(t["arch/width"]),
                layers=int(t["arch/layers"]),
                heads=int(t["arch/heads"]),
                ffn_hidden=int(t["arch/ffn_hidden"]),
                fourier_freqs=int(t["arch/fourier_freqs"]),
                probe_hidden=int(t["arch/probe_hidden"]),
                probe_dim=int(t["arch/probe_dim"]),
                head_hidden=int(t["arch/head_hidden"]),
                visual=bool(int(t["arch/visual"])),
                level_channels=tuple(int(c) for c in t["arch/level_channels"]),
            )
        except KeyError as e:
            raise WeightShapeMismatch(f"missing architecture constant {e}")
        tensors = {
            name: arr.astype(np.float64)
            for name, arr in t.items()
            if not name.startswith("arch/")
        }
        return TransformerWeights(arch, tensors)


@dataclass
class InteractionGradient:
    """One corrective update: 6D deltas per joint group, translation, shape, scale."""

    d_global: np.ndarray  # (6,)
    d_body: np.ndarray  # (21, 6)
    d_left_hand: np.ndarray  # (15, 6)
    d_right_hand: np.ndarray  # (15, 6)
    d_translation: np.ndarray  # (3,)
    d_shape: np.ndarray  # (10,)
    scale: float

    def is_noop(self):
        return (
            self.scale == 1.0
            and not self.d_global.any()
            and not self.d_body.any()
            and not self.d_left_hand.any()
            and not self.d_right_hand.any()
            and not self.d_translation.any()
            and not self.d_shape.any()
        )


# ---------------------------------------------------------------------------
# forward / backward


def _cross_groups(contexts):
    """Group tokens by context size so each group batches one attention call."""
    sizes = {}
    for token, ctx in enumerate(contexts):
        sizes.setdefault(ctx.shape[0], []).append(token)
    groups = []
    for size, tokens in sorted(sizes.items()):
        ids = np.array(tokens, dtype=np.int64)
        groups.append((ids, np.stack([contexts[t] for t in tokens])))
    return groups


def _layer_params(tensors, i, kind):
    return {
        p: tensors[f"layers/{i}/{kind}/{p}"]
        for p in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
    }


def transformer_forward(tokens, contexts, weights, need_tape=False, capture=None):
    """Run the refinement transformer over one human's token set.

    Args:
        tokens: (24, width).
        contexts: per-token context arrays, or None for geometry-only mode
            (the cross-attention sublayer is then skipped entirely).
        capture: optional dict; gets "after_first_cross" when cross runs.

    Returns:
        (24, width) refined tokens, or (refined, tape) when need_tape.
    """
    arch = weights.arch
    w = weights.tensors
    if tokens.shape != (N_TOKENS, arch.width):
        raise ShapeMismatch(f"tokens must be {(N_TOKENS, arch.width)}, got {tokens.shape}")
    if contexts is not None:
        if len(contexts) != N_TOKENS:
            raise ShapeMismatch("need one context array per token")
        if not arch.visual:
            raise ShapeMismatch("weights have no cross-attention tensors")
        groups = _cross_groups(contexts)
    x = tokens
    tapes = []
    for i in range(arch.layers):
        t = {}
        normed, t["ln_self"] = layer_norm(
            x, w[f"layers/{i}/norm_self/gain"], w[f"layers/{i}/norm_self/bias"]
        )
        attn_out, t["self"] = attention(normed, normed, _layer_params(w, i, "self"), arch.heads)
        x = x + attn_out
        if contexts is not None:
            t["x_before_cross"] = x
            normed, t["ln_cross"] = layer_norm(
                x, w[f"layers/{i}/norm_cross/gain"], w[f"layers/{i}/norm_cross/bias"]
            )
            cross_out = np.zeros_like(x)
            t["cross"] = []
            params = _layer_params(w, i, "cross")
            for ids, ctx in groups:
                out, tape_g = attention(normed[ids][:, None, :], ctx, params, arch.heads)
                cross_out[ids] = out[:, 0, :]
                t["cross"].append((ids, tape_g))
            x = x + cross_out
            if i == 0 and capture is not None:
                capture["after_first_cross"] = x.copy()
        normed, t["ln_ffn"] = layer_norm(
            x, w[f"layers/{i}/norm_ffn/gain"], w[f"layers/{i}/norm_ffn/bias"]
        )
        ffn_out, t["ffn"] = mlp2(
            normed,
            w[f"layers/{i}/ffn/w0"],
            w[f"layers/{i}/ffn/b0"],
            w[f"layers/{i}/ffn/w1"],
            w[f"layers/{i}/ffn/b1"],
        )
        x = x + ffn_out
        tapes.append(t)
    if need_tape:
        return x, {"layers": tapes, "has_context": contexts is not None}
    return x


def transformer_vjp(weights, tape, d_out):
    """Returns (d_tokens, d_contexts or None, d_weights)."""
    arch = weights.arch
    w = weights.tensors
    grads = {}
    d_contexts = None
    d_x = d_out.copy()
    for i in range(arch.layers - 1, -1, -1):
        t = tape["layers"][i]
        d_normed, dg = mlp2_vjp(
            t["ffn"], w[f"layers/{i}/ffn/w0"], w[f"layers/{i}/ffn/w1"], d_x
        )
        grads[f"layers/{i}/ffn/w0"], grads[f"layers/{i}/ffn/b0"] = dg[0], dg[1]
        grads[f"layers/{i}/ffn/w1"], grads[f"layers/{i}/ffn/b1"] = dg[2], dg[3]
        d_ln, d_gain, d_bias = layer_norm_vjp(
            t["ln_ffn"], w[f"layers/{i}/norm_ffn/gain"], d_normed
        )
        grads[f"layers/{i}/norm_ffn/gain"] = d_gain
        grads[f"layers/{i}/norm_ffn/bias"] = d_bias
        d_x = d_x + d_ln
        if tape["has_context"]:
            if d_contexts is None:
                d_contexts = {}
            params = _layer_params(w, i, "cross")
            d_normed_total = np.zeros_like(d_x)
            p_grads = {k: np.zeros_like(v) for k, v in params.items()}
            for ids, tape_g in t["cross"]:
                d_q, d_kv, dp = attention_vjp(tape_g, params, arch.heads, d_x[ids][:, None, :])
                d_normed_total[ids] += d_q[:, 0, :]
                for j, token in enumerate(ids):
                    d_contexts[int(token)] = d_contexts.get(int(token), 0) + d_kv[j]
                for k in p_grads:
                    p_grads[k] += dp[k]
            for p in ("q", "k", "v", "o"):
                grads[f"layers/{i}/cross/w{p}"] = p_grads[f"w{p}"]
                grads[f"layers/{i}/cross/b{p}"] = p_grads[f"b{p}"]
            d_ln, d_gain, d_bias = layer_norm_vjp(
                t["ln_cross"], w[f"layers/{i}/norm_cross/gain"], d_normed_total
            )
            grads[f"layers/{i}/norm_cross/gain"] = d_gain
            grads[f"layers/{i}/norm_cross/bias"] = d_bias
            d_x = d_x + d_ln
        params = _layer_params(w, i, "self")
        d_q, d_kv, dp = attention_vjp(t["self"], params, arch.heads, d_x)
        for p in ("q", "k", "v", "o"):
            grads[f"layers/{i}/self/w{p}"] = dp[f"w{p}"]
            grads[f"layers/{i}/self/b{p}"] = dp[f"b{p}"]
        d_ln, d_gain, d_bias = layer_norm_vjp(
            t["ln_self"], w[f"layers/{i}/norm_self/gain"], d_q + d_kv
        )
        grads[f"layers/{i}/norm_self/gain"] = d_gain
        grads[f"layers/{i}/norm_self/bias"] = d_bias
        d_x = d_x + d_ln
    if d_contexts is not None:
        d_contexts = [
            d_contexts.get(t, None) for t in range(N_TOKENS)
        ]
    return d_x, d_contexts, grads


def decode(refined_tokens, weights, need_tape=False):
    """Decode refined tokens into an InteractionGradient."""
    arch = weights.arch
    w = weights.tensors
    if refined_tokens.shape != (N_TOKENS, arch.width):
        raise ShapeMismatch(f"refined tokens must be {(N_TOKENS, arch.width)}")
    x, t_norm = layer_norm(refined_tokens, w["final_norm/gain"], w["final_norm/bias"])
    outs = {}
    tapes = {}
    inputs = {
        "body": x[:N_BODY_JOINTS],
        "hand": x[N_BODY_JOINTS : N_BODY_JOINTS + 2],
        "global": x[FULL_TOKEN : FULL_TOKEN + 1],
        "translation": x[FULL_TOKEN : FULL_TOKEN + 1],
        "shape": x[FULL_TOKEN : FULL_TOKEN + 1],
        "scale": x[FULL_TOKEN : FULL_TOKEN + 1],
    }
    for head, head_in in inputs.items():
        outs[head], tapes[head] = mlp2(
            head_in,
            w[f"heads/{head}/w0"],
            w[f"heads/{head}/b0"],
            w[f"heads/{head}/w1"],
            w[f"heads/{head}/b1"],
        )
    log_scale = float(outs["scale"][0, 0])
    grad = InteractionGradient(
        d_global=outs["global"][0],
        d_body=outs["body"],
        d_left_hand=outs["hand"][0].reshape(N_HAND_JOINTS, 6),
        d_right_hand=outs["hand"][1].reshape(N_HAND_JOINTS, 6),
        d_translation=outs["translation"][0],
        d_shape=outs["shape"][0],
        scale=float(np.exp(log_scale)),
    )
    if not need_tape:
        return grad
    return grad, {"norm": t_norm, "heads": tapes, "log_scale": log_scale}


def decode_vjp(weights, tape, d_grad, d_scale):
    """Backpropagate an InteractionGradient-shaped gradient to the tokens.

    Args:
        d_grad: dict with d_global, d_body, d_left_hand, d_right_hand,
            d_translation, d_shape arrays (any may be None).
        d_scale: upstream gradient w.r.t. the positive scale s.

    Returns:
        (d_refined_tokens, d_weights)
    """
    w = weights.tensors
    grads = {}
    d_x = np.zeros((N_TOKENS, weights.arch.width))

    def run_head(head, d_out, rows):
        d_in, gw = mlp2_vjp(
            tape["heads"][head], w[f"heads/{head}/w0"], w[f"heads/{head}/w1"], d_out
        )
        grads[f"heads/{head}/w0"], grads[f"heads/{head}/b0"] = gw[0], gw[1]
        grads[f"heads/{head}/w1"], grads[f"heads/{head}/b1"] = gw[2], gw[3]
        d_x[rows] += d_in

    run_head("body", d_grad["d_body"], slice(0, N_BODY_JOINTS))
    d_hand = np.stack(
        [d_grad["d_left_hand"].ravel(), d_grad["d_right_hand"].ravel()]
    )
    run_head("hand", d_hand, slice(N_BODY_JOINTS, N_BODY_JOINTS + 2))
    run_head("global", d_grad["d_global"][None], slice(FULL_TOKEN, FULL_TOKEN + 1))
    run_head(
        "translation", d_grad["d_translation"][None], slice(FULL_TOKEN, FULL_TOKEN + 1)
    )
    run_head("shape", d_grad["d_shape"][None], slice(FULL_TOKEN, FULL_TOKEN + 1))
    # s = exp(raw) => d_raw = d_s * s
    d_raw = np.array([[d_scale * np.exp(tape["log_scale"])]])
    run_head("scale", d_raw, slice(FULL_TOKEN, FULL_TOKEN + 1))

    d_tokens, d_gain, d_bias = layer_norm_vjp(tape["norm"], w["final_norm/gain"], d_x)
    grads["final_norm/gain"] = d_gain
    grads["final_norm/bias"] = d_bias
    return d_tokens, grads
