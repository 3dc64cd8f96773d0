"""Command line entry point: ``dgsf <subcommand> ...``.

Exit codes: 0 success, 1 input error (bad flag, missing or malformed file),
2 internal invariant violation.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .autodiff import data_of, read_weights, write_weights
from .bench import bench_grouping
from .grid_repr import (check_point_image, project_points, read_cloud, read_grid, read_intrinsics,
                        read_point_image, write_grid, write_point_image)
from .grouping import KernelSpec
from .metrics import evaluate, scene_flow_errors
from .network import (MODE_OVERRIDES, NetworkConfig, forward, init_weights, read_config, toy_train,
                      weights_from_arrays, write_config, write_trace)
from .synth import large_motion_scene, load_scene, save_scene, synth

log = logging.getLogger("dgsf")


class InvariantError(RuntimeError):
    """An internal consistency check failed."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def write_error_ppm(path, pred: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> None:
    """Green where the cell meets ACC0.10, red elsewhere, black for empty cells (binary PPM)."""
    e, r = scene_flow_errors(pred, gt)
    good = (e < 0.10) | (r < 0.10)
    rgb = np.zeros(valid.shape + (3,), np.uint8)
    rgb[valid & good] = (0, 200, 0)
    rgb[valid & ~good] = (220, 0, 0)
    H, W = valid.shape
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode() + rgb.tobytes())


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> NetworkConfig:
    cfg = read_config(args.config) if args.config else NetworkConfig()
    return cfg.with_mode(args.mode)


def cmd_project(args) -> int:
    cloud = read_cloud(args.cloud)
    intr = read_intrinsics(args.intrinsics)
    img = project_points(cloud, intr, args.depth_max)
    problems = check_point_image(img, intr)
    if problems:
        raise InvariantError("; ".join(problems))
    path = _out_dir(args) / "points.grid"
    write_point_image(path, img)
    print(f"{img.n_valid} valid cells of {img.shape[0]}x{img.shape[1]} -> {path}")
    return 0


def cmd_synth(args) -> int:
    if args.large_motion:
        scene = large_motion_scene(args.seed, args.height, args.width)
    else:
        scene = synth(args.seed, args.height, args.width, args.objects)
    save_scene(scene, _out_dir(args))
    print(f"scene seed {args.seed}: {scene.pc1.n_valid} PC1 / {scene.pc2.n_valid} PC2 valid cells -> {args.out}")
    return 0


def cmd_flow(args) -> int:
    cfg = _config(args)
    scene = load_scene(args.scene)
    if args.weights:
        weights = weights_from_arrays(read_weights(args.weights), cfg)
    else:
        weights = init_weights(cfg, args.seed)
    pred = forward(scene.pc1, scene.pc2, scene.img1, scene.img2, weights, cfg, scene.intr)
    flow = data_of(pred.full)
    if not np.array_equal(pred.full_valid, scene.pc1.valid):
        raise InvariantError("predicted flow validity differs from PC1 validity")
    out = _out_dir(args)
    write_grid(out / "flow.grid", flow, pred.full_valid)
    write_error_ppm(out / "error.ppm", flow, scene.gt_flow, scene.pc1.valid)
    report = evaluate(flow, scene.gt_flow, scene.pc1.valid, scene.intr, scene.pc1)
    (out / "report.csv").write_text(report.as_csv())
    print(f"mode {args.mode}")
    print(report.as_text())
    return 0


def cmd_eval(args) -> int:
    pred, pvalid = read_grid(args.pred)
    gt, gvalid = read_grid(args.gt)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} must both be H x W x 3")
    intr = pc1 = None
    if args.scene:
        scene = load_scene(args.scene)
        intr, pc1 = scene.intr, scene.pc1
    report = evaluate(pred, gt, pvalid & gvalid, intr, pc1)
    print(report.as_text())
    if args.out:
        (_out_dir(args) / "report.csv").write_text(report.as_csv())
    return 0


def cmd_train_toy(args) -> int:
    cfg = _config(args)
    if args.scenes:
        scenes = [load_scene(d) for d in args.scenes]
    else:
        make = large_motion_scene if args.large_motion else synth
        scenes = [make(args.seed + i, args.height, args.width) for i in range(args.n_scenes)]
    result = toy_train(scenes, cfg, args.steps, args.lr, args.seed)
    out = _out_dir(args)
    write_weights(out / "weights.bin", result.weights)
    write_trace(out / "trace.csv", result.trace)
    write_config(out / "config.txt", cfg)
    print(f"loss {result.trace[0]:.6f} -> {result.trace[-1]:.6f}")
    print(f"EPE3D {result.epe_initial:.6f} -> {result.epe_final:.6f}")
    return 0


def cmd_group_bench(args) -> int:
    spec = KernelSpec(args.k_h, args.k_w, args.K)
    report = bench_grouping(args.n, spec, args.repeats, args.seed)
    if report.kernel_candidates > report.n_valid * spec.k_s:
        raise InvariantError("kernel candidate count exceeds n * k_s")
    print(report.as_text())
    if args.out:
        (_out_dir(args) / "bench.csv").write_text(report.as_csv())
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="network config file (key=value)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="out")
    common.add_argument("--mode", choices=sorted(MODE_OVERRIDES), default="full")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="dgsf", description="Dense-grid scene flow toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("project", parents=[common], help="point cloud + intrinsics -> grid file")
    s.add_argument("--cloud", required=True)
    s.add_argument("--intrinsics", required=True)
    s.add_argument("--depth-max", type=float, default=35.0)
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic scene")
    s.add_argument("--height", type=int, default=48)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--objects", type=int, default=3)
    s.add_argument("--large-motion", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("flow", parents=[common], help="predict flow for a scene directory")
    s.add_argument("--scene", required=True)
    s.add_argument("--weights", help="weights file; untrained weights from --seed if omitted")
    s.set_defaults(func=cmd_flow)

    s = sub.add_parser("eval", parents=[common], help="evaluate a flow grid against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--scene", help="scene directory, enables EPE2D and ACC1px")
    s.set_defaults(func=cmd_eval, out=None)

    s = sub.add_parser("train-toy", parents=[common], help="train on synthetic scenes")
    s.add_argument("--scenes", nargs="*", help="scene directories; synthesized from --seed if omitted")
    s.add_argument("--n-scenes", type=int, default=2)
    s.add_argument("--height", type=int, default=48)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--large-motion", action="store_true")
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--lr", type=float, default=1e-3)
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("group-bench", parents=[common], help="time kernel vs whole-grid grouping")
    s.add_argument("--n", type=int, default=56269)
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--k-h", type=int, default=7)
    s.add_argument("--k-w", type=int, default=9)
    s.add_argument("--K", type=int, default=16)
    s.set_defaults(func=cmd_group_bench, out=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvariantError, FloatingPointError, AssertionError) as exc:
        print(f"dgsf {args.command}: invariant violated: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"dgsf {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
