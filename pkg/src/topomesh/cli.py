"""Command line entry point.

Subcommands: gen-data, train, reconstruct, eval, gradcheck, tau-sweep.
Logs go to stderr and data goes to files; every CSV written gets a PNG
figure with the same stem.  Heavy imports happen inside the command
handlers so --threads can cap the BLAS pool before numpy loads.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

logger = logging.getLogger("topomesh")

_THREAD_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _tau_list(text: str) -> list:
    try:
        taus = [float(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}")
    if not taus or any(t <= 0 for t in taus):
        raise argparse.ArgumentTypeError("thresholds must be positive numbers")
    return taus


def _apply_threads(count) -> None:
    if count is None:
        return
    for var in _THREAD_VARS:
        os.environ[var] = str(count)
    if "numpy" in sys.modules:
        logger.warning("numpy was already imported; --threads may not fully apply")


def _figure_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".png")


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive_int, default=None,
                        help="cap BLAS/OpenMP threads (1 gives strict determinism)")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog="topomesh",
        description="Mesh reconstruction with learned topology modification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="generate a synthetic shape dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=_positive_int, default=8)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common],
                       help="train all stages on a dataset's train split")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", default=None, help="TrainConfig JSON (defaults used when omitted)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--curves", default=None, help="write per-epoch loss CSV (+PNG) here")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--ablation", action="store_true",
                   help="disable pruning stages (deformation-only baseline)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", parents=[common],
                       help="run the pipeline on a point cloud or mesh")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--input", required=True,
                   help="input cloud (.bin) or mesh to resample (.obj)")
    p.add_argument("--out", required=True, help="output OBJ path")
    p.add_argument("--dump-stages", action="store_true",
                   help="also write every intermediate as <out>.stageK.obj")
    p.add_argument("--cloud-out", default=None,
                   help="write oriented surface samples of the result as PLY")
    p.add_argument("--cloud-points", type=_positive_int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", parents=[common],
                       help="reconstruct a dataset split and report CD/EMD")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--report", required=True, help="metrics CSV path (+PNG)")
    p.add_argument("--icp", action="store_true", help="rigidly align before scoring")
    p.add_argument("--cd-points", type=_positive_int, default=10000)
    p.add_argument("--emd-points", type=_positive_int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference checks for every loss and network")
    p.add_argument("--instances", type=_positive_int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("tau-sweep", parents=[common],
                       help="directional errors across pruning thresholds")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--taus", type=_tau_list, default=[0.05, 0.1, 0.2, 0.4])
    p.add_argument("--report", required=True, help="sweep CSV path (+PNG)")
    p.add_argument("--cd-points", type=_positive_int, default=2500)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_tau_sweep)

    return parser


# -- commands ----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .data import make_dataset, save_dataset

    items = make_dataset(args.count, args.seed, resolution=args.resolution)
    save_dataset(items, args.out)
    by_split = {}
    for item in items:
        by_split[item.split] = by_split.get(item.split, 0) + 1
    logger.info("wrote %d shapes to %s (%s)", len(items), args.out,
                ", ".join(f"{k}: {v}" for k, v in sorted(by_split.items())))
    return 0


def cmd_train(args) -> int:
    from dataclasses import replace

    from .data import load_dataset
    from .pipeline import TrainConfig, make_model, train_full
    from .report import plot_curves, write_curves_csv

    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.ablation:
        config = replace(config, pruning_enabled=False)
    dataset = load_dataset(args.data, split="train")
    logger.info("training on %d shapes (pruning %s)", len(dataset),
                "enabled" if config.pruning_enabled else "disabled")
    model = make_model(config)
    model, curves = train_full(model, dataset, config)
    model.save(args.out)
    logger.info("saved checkpoint %s", args.out)
    if args.curves:
        write_curves_csv(curves, args.curves)
        plot_curves(curves, _figure_path(args.curves))
    return 0


def cmd_reconstruct(args) -> int:
    from .mesh import PointCloud, sample_surface, save_obj, save_ply
    from .data import ENCODER_CLOUD_POINTS, load_cloud
    from .pipeline import Model, reconstruct

    model = Model.load(args.model)
    suffix = Path(args.input).suffix.lower()
    if suffix == ".bin":
        cloud = PointCloud(points=load_cloud(args.input))
    elif suffix == ".obj":
        from .mesh import load_obj

        cloud = sample_surface(load_obj(args.input), ENCODER_CLOUD_POINTS, seed=args.seed)
    else:
        raise ValueError(f"unsupported input type {suffix!r} (expected .bin or .obj)")

    result = reconstruct(cloud, model, seed=args.seed)
    save_obj(result.final, args.out)
    logger.info("wrote %s (%d vertices, %d faces)", args.out,
                result.final.num_vertices, result.final.num_faces)
    if args.dump_stages:
        out = Path(args.out)
        for k, (tag, mesh) in enumerate(result.stages, start=1):
            stage_path = out.with_name(f"{out.stem}.stage{k}{out.suffix}")
            save_obj(mesh, stage_path)
            logger.info("stage %d (%s): %s", k, tag, stage_path)
    if args.cloud_out:
        samples = sample_surface(result.final, args.cloud_points, seed=args.seed)
        save_ply(samples, args.cloud_out)
        logger.info("wrote %d oriented samples to %s", len(samples), args.cloud_out)
    if not result.ok:
        logger.error("pipeline stopped at %s; outputs hold the last valid mesh",
                     result.failed_stage)
        return 1
    return 0


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .evaluation import evaluate_dataset, format_table, write_metrics_csv
    from .pipeline import Model
    from .report import plot_metric_bars

    model = Model.load(args.model)
    items = load_dataset(args.data, split=args.split)
    summary = evaluate_dataset(
        model, items,
        cd_points=args.cd_points, emd_points=args.emd_points,
        seed=args.seed, use_icp=args.icp,
    )
    write_metrics_csv(summary.reports, args.report)
    plot_metric_bars(summary, _figure_path(args.report))
    for line in format_table(summary).splitlines():
        logger.info("%s", line)
    logger.info("wrote %s", args.report)
    return 0


def cmd_gradcheck(args) -> int:
    failures = 0
    for name, worst in _gradcheck_suite(args.instances, args.seed):
        status = "ok" if worst < 1e-5 else "FAIL"
        if status == "FAIL":
            failures += 1
        logger.info("%-24s max rel err %.3e  %s", name, worst, status)
    if failures:
        logger.error("%d gradient checks failed", failures)
        return 1
    return 0


def cmd_tau_sweep(args) -> int:
    from .data import load_dataset
    from .evaluation import tau_sweep
    from .pipeline import Model
    from .report import plot_sweep, write_sweep_csv

    model = Model.load(args.model)
    items = load_dataset(args.data, split=args.split)
    rows = tau_sweep(model, items, args.taus, cd_points=args.cd_points, seed=args.seed)
    write_sweep_csv(rows, args.report)
    plot_sweep(rows, _figure_path(args.report))
    for row in rows:
        logger.info("tau %-6g gt->pred %.6e pred->gt %.6e kept %.2f%%",
                    row["tau"], row["gt_to_pred"], row["pred_to_gt"],
                    100.0 * row["kept_faces"])
    logger.info("wrote %s", args.report)
    return 0


# -- the finite-difference suite -------------------------------------------------------


def _gradcheck_suite(instances: int, seed: int):
    """Yield (case name, worst finite-difference error over the instances)."""
    import numpy as np

    from .autodiff import Value, WrappedMlp, grad_check
    from .losses import (
        boundary_energy,
        chamfer,
        edge_loss,
        error_regression_loss,
        normal_loss,
        smoothness_loss,
    )
    from .mesh import (
        PointCloud,
        extract_boundary_loops,
        make_icosphere,
        prune_faces,
        sample_on_faces,
    )
    from .networks import (
        deform_positions,
        encode_points,
        error_predictions,
        make_deform_net,
        make_encoder,
        make_error_net,
        make_refine_net,
        refine_positions,
    )

    sphere = make_icosphere(0)
    mask = np.zeros(sphere.num_faces, dtype=bool)
    mask[:2] = True
    open_mesh, _ = prune_faces(sphere, mask)
    loops = extract_boundary_loops(open_mesh)
    fd = 4

    def wrapped_case(make_net, make_aux, forward, valid=None):
        def run(rng):
            net = make_net(fd, rng, hidden=(6,))
            # draw the case data once: fn must be a fixed function of the
            # parameters or the finite differences measure sampling noise
            aux = make_aux(rng)
            while valid is not None and not valid(net, aux):
                aux = make_aux(rng)
            arrays = []
            for layer in net.layers:
                arrays += [layer.weight, layer.bias]
            acts = [l.activation for l in net.layers]

            def fn(*layer_values):
                w = WrappedMlp.__new__(WrappedMlp)
                w.prefix = "g"
                w.layers = [(layer_values[2 * i], layer_values[2 * i + 1], acts[i])
                            for i in range(len(acts))]
                return forward(w, aux)
            return grad_check(fn, arrays)
        return run

    def chamfer_case(rng):
        p = rng.standard_normal((8, 3))
        q = rng.standard_normal((11, 3))
        return grad_check(lambda a: chamfer(a, Value(q)), [p])

    def boundary_case(rng):
        pos = open_mesh.vertices + 0.05 * rng.standard_normal(open_mesh.vertices.shape)
        return grad_check(lambda x: boundary_energy(x, loops), [pos])

    def regression_case(rng):
        raw = rng.standard_normal(9)
        target = np.abs(rng.standard_normal(9))
        return grad_check(lambda x: error_regression_loss(x, target), [raw])

    def normal_case(rng):
        pos = sphere.vertices
        pts, face_idx, bary = sample_on_faces(pos, sphere.faces, 12, rng)
        samples = PointCloud(points=pts, source_face=face_idx, bary=bary)
        gt_pts = rng.standard_normal((20, 3))
        gt_n = gt_pts / np.linalg.norm(gt_pts, axis=1, keepdims=True)
        gt = PointCloud(points=gt_pts, normals=gt_n)
        moved = pos + 0.05 * rng.standard_normal(pos.shape)
        return grad_check(lambda x: normal_loss(x, sphere.faces, samples, gt), [moved])

    def smooth_case(rng):
        pos = sphere.vertices + 0.05 * rng.standard_normal(sphere.vertices.shape)
        return grad_check(lambda x: smoothness_loss(x, sphere), [pos])

    def edge_case(rng):
        pos = sphere.vertices + 0.05 * rng.standard_normal(sphere.vertices.shape)
        return grad_check(lambda x: edge_loss(x, sphere), [pos])

    def feat_aux(rng):
        return {"feat": rng.standard_normal(fd)}

    def feat_points_aux(rng):
        return {"feat": rng.standard_normal(fd), "points": rng.standard_normal((7, 3))}

    def points_aux(rng):
        return {"points": rng.standard_normal((9, 3))}

    def deform_forward(w, aux):
        moved = deform_positions(Value(sphere.vertices), Value(aux["feat"]), w)
        return moved.square().sum()

    def error_forward(w, aux):
        return error_predictions(Value(aux["points"]), Value(aux["feat"]), w).square().sum()

    def refine_forward(w, aux):
        moved = refine_positions(Value(open_mesh.vertices), loops, Value(aux["feat"]), w)
        return moved.square().sum()

    def encoder_forward(w, aux):
        return encode_points(Value(aux["points"]), w).square().sum()

    def make_encoder_sized(feature_dim, rng, hidden):
        return make_encoder(feature_dim, rng, hidden)

    def pool_margin_ok(net, aux):
        # the max pool needs a stable argmax within the difference step,
        # otherwise the central difference straddles the kink; dims held at
        # zero by the final relu are fine (both gradients vanish) as long
        # as they stay clipped under the step
        x = np.asarray(aux["points"], dtype=np.float64)
        for layer in net.layers[:-1]:
            x = x @ layer.weight.T + layer.bias
            if layer.activation == "relu":
                x = np.maximum(x, 0.0)
            elif layer.activation == "tanh":
                x = np.tanh(x)
        last = net.layers[-1]
        pre = x @ last.weight.T + last.bias
        out = np.maximum(pre, 0.0) if last.activation == "relu" else pre
        top2 = np.sort(out, axis=0)[-2:, :]
        pre_top = pre.max(axis=0)
        dead = pre_top < -1e-3
        clear = top2[1] - top2[0] > 1e-3
        if last.activation == "relu":
            clear &= pre_top > 1e-3
        return bool(np.all(dead | clear))

    cases = [
        ("chamfer", chamfer_case),
        ("boundary_energy", boundary_case),
        ("error_regression", regression_case),
        ("normal_loss", normal_case),
        ("smoothness_loss", smooth_case),
        ("edge_loss", edge_case),
        ("deform_net", wrapped_case(make_deform_net, feat_aux, deform_forward)),
        ("error_net", wrapped_case(make_error_net, feat_points_aux, error_forward)),
        ("refine_net", wrapped_case(make_refine_net, feat_aux, refine_forward)),
        ("encoder", wrapped_case(make_encoder_sized, points_aux, encoder_forward,
                                 valid=pool_margin_ok)),
    ]
    for case_idx, (name, case) in enumerate(cases):
        rng = np.random.default_rng([seed, case_idx])
        worst = max(case(rng) for _ in range(instances))
        yield name, worst


# -- entry -------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    _apply_threads(args.threads)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        logger.error("%s", exc)
        return 1
    except Exception:
        logger.exception("unexpected failure")
        return 1


if __name__ == "__main__":
    sys.exit(main())
