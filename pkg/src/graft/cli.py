"""Command-line interface.

Subcommands: synth, refine, eval, probe-dump, init-weights, train-micro,
curve. Runtime errors exit 1 with a machine-readable JSON object on stderr;
usage errors exit 2.
"""

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from .body import BodyModel, forward
from .engine import RefinementConfig, metric_align, refine, worker_count
from .errors import GraftError
from .metrics import DEFAULT_CONTACT_TAU, contact_labels, contact_prf, evaluate
from .network import ArchitectureConfig, TransformerWeights
from .probes import compute_probes
from .rotation import rot6d_to_matrix
from .scene import SpatialIndex, load_scene, write_ply
from .stateio import read_states, write_states
from .synth import export_archive, synthesize_scenario
from .tokens import N_TOKENS, VisualFeatureGrids, token_probe_indices
from .training import MicroTask, TrainSchedule, micro_train


def _cmd_synth(args):
    scenario = synthesize_scenario(
        args.seed,
        difficulty=args.difficulty,
        kind=args.scenario,
        contact_tau=args.contact_tau,
        spacing=args.spacing,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    path = lambda name: os.path.join(args.out_dir, name)
    write_ply(path("scene.ply"), scenario.scene.points, scenario.scene.normals)
    scenario.model.save(path("model.grft"))
    write_states(path("gt.json"), [scenario.gt_state], scenario.intrinsics)
    write_states(path("init.json"), [scenario.init_state], scenario.intrinsics)
    if args.archive:
        export_archive(scenario.model, args.archive)
    print(f"wrote scenario ({scenario.kind}) to {args.out_dir}")
    return 0


def _load_common(args):
    model = BodyModel.load(args.model)
    scene = load_scene(args.scene, normals_k=args.normals_k)
    states, intrinsics = read_states(args.states)
    return model, scene, states, intrinsics


def _load_weights(path):
    weights = TransformerWeights.load(path)
    arch = weights.arch
    print(
        f"loaded {weights.param_count()} parameters "
        f"(width={arch.width}, layers={arch.layers}, visual={arch.visual})"
    )
    return weights


def _cmd_refine(args):
    model = BodyModel.load(args.model)
    scene = load_scene(args.scene, normals_k=args.normals_k)
    states, intrinsics = read_states(args.states)
    weights = _load_weights(args.weights)
    grids = VisualFeatureGrids.load(args.grids) if args.grids else None
    config = RefinementConfig(
        iterations=args.iters,
        geometry_only=args.geometry_only or grids is None,
        max_points=args.max_points,
    )
    if args.metric_align:
        if intrinsics is None:
            raise GraftError("--metric-align requires intrinsics in the state document")
        states = [
            metric_align(model, s, forward(model, s), scene, intrinsics)
            for s in states
        ]
    rng = np.random.default_rng(args.seed)
    results = refine(
        model, states, scene, weights, config, grids=grids, rng=rng,
        n_threads=worker_count(),
    )
    write_states(args.out, [state for state, _ in results], intrinsics)

    gt_labels = None
    if args.gt:
        gt_states, _ = read_states(args.gt)
        index = SpatialIndex(scene)
        gt_labels = [
            contact_labels(forward(model, g), model, index, args.contact_tau)
            for g in gt_states
        ]
    if args.trajectory:
        index = SpatialIndex(scene)
        with open(args.trajectory, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(
                ["human", "step", "mean_probe_dist_mm", "scale", "f1_vs_gt", "wall_ms"]
            )
            for h, (_, traj) in enumerate(results):
                for step, state in enumerate(traj.states):
                    f1 = ""
                    if gt_labels is not None:
                        pred = contact_labels(
                            forward(model, state), model, index, args.contact_tau
                        )
                        f1 = f"{contact_prf(pred, gt_labels[h]).f1:.6f}"
                    writer.writerow(
                        [
                            h,
                            step,
                            f"{traj.mean_probe_dist[step] * 1000.0:.6f}",
                            f"{traj.scales[step]:.9f}",
                            f1,
                            f"{traj.wall_ms[step]:.3f}",
                        ]
                    )
    print(f"refined {len(results)} human(s) over {args.iters} iteration(s)")
    return 0


def _cmd_eval(args):
    model = BodyModel.load(args.model)
    pred_scene = load_scene(args.scene, normals_k=args.normals_k)
    if args.gt_scene and not args.shared_scene:
        gt_scene = load_scene(args.gt_scene, normals_k=args.normals_k)
    else:
        gt_scene = pred_scene
    pred_states, _ = read_states(args.pred)
    gt_states, _ = read_states(args.gt)
    if len(pred_states) != len(gt_states):
        raise GraftError(
            f"prediction has {len(pred_states)} humans, GT has {len(gt_states)}"
        )
    pred_index = SpatialIndex(pred_scene)
    gt_index = pred_index if gt_scene is pred_scene else SpatialIndex(gt_scene)
    reports = [
        evaluate(
            forward(model, p), forward(model, g), model, pred_index, gt_index,
            tau=args.contact_tau,
        )
        for p, g in zip(pred_states, gt_states)
    ]
    mean = lambda field: float(np.mean([getattr(r, field) for r in reports]))
    doc = {
        "precision": mean("precision"),
        "recall": mean("recall"),
        "f1": mean("f1"),
        "v2s_mm": mean("v2s_mm"),
        "d2s_deg": mean("d2s_deg"),
        "pa_mpjpe_mm": mean("pa_mpjpe_mm"),
        "contact_tau_m": args.contact_tau,
        "no_predicted_positives": any(r.no_predicted_positives for r in reports),
        "no_gt_positives": any(r.no_gt_positives for r in reports),
        "humans": [r.to_dict() for r in reports],
    }
    out = json.dumps(doc, indent=1)
    if args.out:
        with open(args.out, "w") as f:
            f.write(out + "\n")
    print(out)
    if args.csv:
        new = not os.path.exists(args.csv)
        with open(args.csv, "a", newline="") as f:
            writer = csv.writer(f)
            if new:
                writer.writerow(
                    ["pred", "gt", "precision", "recall", "f1", "v2s_mm",
                     "d2s_deg", "pa_mpjpe_mm", "contact_tau_m"]
                )
            writer.writerow(
                [args.pred, args.gt, doc["precision"], doc["recall"], doc["f1"],
                 doc["v2s_mm"], doc["d2s_deg"], doc["pa_mpjpe_mm"], args.contact_tau]
            )
    return 0


def _cmd_probe_dump(args):
    model, scene, states, _ = _load_common(args)
    index = SpatialIndex(scene)
    doc = {"humans": []}
    for state in states:
        mesh = forward(model, state)
        probes = compute_probes(
            index, model, mesh, rot6d_to_matrix(state.global_orient)
        )
        tokens = []
        for t in range(N_TOKENS):
            records = [probes.record(i) for i in token_probe_indices(t)]
            tokens.append(
                {
                    "token": t,
                    "probes": [
                        {
                            "anchor": r.anchor.tolist(),
                            "nearest": r.nearest.tolist(),
                            "offset": r.offset.tolist(),
                            "normal": r.normal.tolist(),
                            "body_relative": r.body_relative.tolist(),
                            "distance": r.distance,
                            "point_id": r.point_id,
                        }
                        for r in records
                    ],
                }
            )
        doc["humans"].append({"tokens": tokens})
    out = json.dumps(doc, indent=1)
    if args.out:
        with open(args.out, "w") as f:
            f.write(out + "\n")
    else:
        print(out)
    return 0


def _cmd_init_weights(args):
    if args.micro:
        arch = ArchitectureConfig.micro(visual=args.visual)
    else:
        kwargs = {}
        if args.visual:
            kwargs["visual"] = True
        if args.level_channels:
            kwargs["level_channels"] = tuple(
                int(c) for c in args.level_channels.split(",")
            )
        arch = ArchitectureConfig(**kwargs)
    weights = TransformerWeights.init_random(arch, args.seed)
    weights.save(args.out)
    print(
        f"initialized {weights.param_count()} parameters "
        f"(width={arch.width}, layers={arch.layers}, visual={arch.visual}) -> {args.out}"
    )
    return 0


def _cmd_train_micro(args):
    if args.task != "floor-contact":
        raise GraftError(f"unknown task {args.task!r}")
    scenario = synthesize_scenario(args.seed, difficulty=1.0, kind="standing")
    arch = ArchitectureConfig.micro()
    weights = TransformerWeights.init_random(arch, args.seed)
    schedule = TrainSchedule.micro(args.iters, batch_size=args.batch)
    task = MicroTask(
        model=scenario.model,
        scene=scenario.scene,
        gt_state=scenario.gt_state,
        eval_init=scenario.init_state,
    )
    t0 = time.perf_counter()
    curve = micro_train(
        task, schedule, weights, seed=args.seed, grad_mode=args.grad,
        progress=(lambda row: print(
            f"iter {row['iteration']:5d}  lr {row['lr']:.2e}  R {row['supervised_steps']}  "
            f"train {row['train_loss']:.5f}  eval {row['eval_loss']:.5f}"
        )) if args.verbose else None,
    )
    train_seconds = time.perf_counter() - t0
    weights.save(args.out)
    if args.curve:
        with open(args.curve, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "lr", "supervised_steps", "train_loss", "eval_loss"])
            for row in curve:
                writer.writerow(
                    [row["iteration"], f"{row['lr']:.10e}", row["supervised_steps"],
                     f"{row['train_loss']:.10e}", f"{row['eval_loss']:.10e}"]
                )
    summary = train_summary(scenario, weights, curve, schedule)
    summary["train_seconds"] = train_seconds
    if args.report:
        with open(args.report, "w") as f:
            json.dump(summary, f, indent=1)
            f.write("\n")
    print(json.dumps(summary, indent=1))
    return 0


def train_summary(scenario, weights, curve, schedule):
    """Refine the held-out init with the trained weights; report the F1 path."""
    model = scenario.model
    index = SpatialIndex(scenario.scene)
    gt = contact_labels(
        forward(model, scenario.gt_state), model, index, scenario.contact_tau
    )
    config = RefinementConfig(iterations=schedule.rollout_steps, geometry_only=True)
    _, traj = refine(
        model, [scenario.init_state], scenario.scene, weights, config
    )[0]
    f1_path = [
        contact_prf(
            contact_labels(forward(model, s), model, index, scenario.contact_tau), gt
        ).f1
        for s in traj.states
    ]
    gain = f1_path[-1] - f1_path[0]
    first = f1_path[1] - f1_path[0] if len(f1_path) > 1 else 0.0
    return {
        "initial_eval_loss": curve[0]["eval_loss"],
        "final_eval_loss": curve[-1]["eval_loss"],
        "loss_reduction": 1.0 - curve[-1]["eval_loss"] / max(curve[0]["eval_loss"], 1e-300),
        "f1_per_step": f1_path,
        "f1_gain": gain,
        "first_step_share": first / gain if gain > 0 else 0.0,
        "contact_tau_m": scenario.contact_tau,
    }


def _cmd_curve(args):
    model = BodyModel.load(args.model)
    scene = load_scene(args.scene, normals_k=args.normals_k)
    states, _ = read_states(args.states)
    gt_states, _ = read_states(args.gt)
    weights = _load_weights(args.weights)
    index = SpatialIndex(scene)
    gt_labels = [
        contact_labels(forward(model, g), model, index, args.contact_tau)
        for g in gt_states
    ]
    config = RefinementConfig(iterations=args.max_iters, geometry_only=True)
    results = refine(model, states, scene, weights, config)
    rows = []
    for step in range(args.max_iters + 1):
        f1s, v2ss, walls = [], [], []
        for h, (_, traj) in enumerate(results):
            mesh = forward(model, traj.states[step])
            pred = contact_labels(mesh, model, index, args.contact_tau)
            f1s.append(contact_prf(pred, gt_labels[h]).f1)
            walls.append(traj.wall_ms[step])
        rows.append(
            {
                "iterations": step,
                "mean_f1": float(np.mean(f1s)),
                "step_wall_ms": float(np.mean(walls)),
            }
        )
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iterations", "mean_f1", "step_wall_ms"])
        for row in rows:
            writer.writerow(
                [row["iterations"], f"{row['mean_f1']:.6f}", f"{row['step_wall_ms']:.3f}"]
            )
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="graft",
        description="Iterative geometric refinement of human states against scene point clouds",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scenario")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--difficulty", type=float, default=1.0)
    p.add_argument("--scenario", choices=("standing", "seated"), default="standing")
    p.add_argument("--contact-tau", type=float, default=DEFAULT_CONTACT_TAU)
    p.add_argument("--spacing", type=float, default=0.05)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--archive", help="also export the toy model as .npz")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("refine", help="run iterative refinement")
    p.add_argument("--model", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--states", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--iters", type=int, default=3)
    p.add_argument("--out", default="refined.json")
    p.add_argument("--trajectory")
    p.add_argument("--gt")
    p.add_argument("--grids")
    p.add_argument("--geometry-only", action="store_true")
    p.add_argument("--metric-align", action="store_true")
    p.add_argument("--normals-k", type=int, default=16)
    p.add_argument("--max-points", type=int)
    p.add_argument("--contact-tau", type=float, default=DEFAULT_CONTACT_TAU)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_refine)

    p = sub.add_parser("eval", help="evaluate predicted states against GT")
    p.add_argument("--model", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--gt-scene")
    p.add_argument("--shared-scene", action="store_true",
                   help="evaluate GT against the prediction scene")
    p.add_argument("--contact-tau", type=float, default=DEFAULT_CONTACT_TAU)
    p.add_argument("--normals-k", type=int, default=16)
    p.add_argument("--out")
    p.add_argument("--csv")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("probe-dump", help="dump per-token probe records")
    p.add_argument("--model", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--states", required=True)
    p.add_argument("--normals-k", type=int, default=16)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_probe_dump)

    p = sub.add_parser("init-weights", help="emit a seeded random weight container")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--micro", action="store_true")
    p.add_argument("--visual", action="store_true")
    p.add_argument("--level-channels")
    p.set_defaults(func=_cmd_init_weights)

    p = sub.add_parser("train-micro", help="desk-scale training on a toy task")
    p.add_argument("--task", default="floor-contact")
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--curve")
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--grad", choices=("analytic", "fd"), default="analytic")
    p.add_argument("--report")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_train_micro)

    p = sub.add_parser("curve", help="contact F1 vs iteration count")
    p.add_argument("--model", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--states", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--max-iters", type=int, default=6)
    p.add_argument("--contact-tau", type=float, default=DEFAULT_CONTACT_TAU)
    p.add_argument("--normals-k", type=int, default=16)
    p.add_argument("--out", default="curve.csv")
    p.set_defaults(func=_cmd_curve)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (GraftError, OSError) as e:
        payload = {"error": type(e).__name__, "message": str(e)}
        print(json.dumps(payload), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
