"""Command line surface: synth, label, refine, eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
All randomness flows through explicit seeds, so every command is
deterministic given its inputs.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .errors import (
    EXIT_DATA,
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_USAGE,
    DataError,
    NumericalError,
    SemRefineError,
)
from .evaluate import depth_mae, segmentation_metrics
from .fileio import (
    Dataset,
    RunConfig,
    load_dataset,
    read_config,
    read_ply,
    write_config,
    write_dataset,
    write_energy_csv,
    write_pgm,
    write_ply,
)
from .gradcheck import run_gradcheck
from .geometry import build_adjacency
from .labeling import (
    compute_class_normal_stats,
    compute_data_term,
    labeling_energy,
    solve_icm,
)
from .refine import refine_loop
from .render import rasterize, render_label_image, visibility_matrix
from .synth import NoiseSpec, SceneSpec, corrupt_masks, generate_scene, perturb_mesh


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _load_config(args) -> RunConfig:
    config = RunConfig()
    if getattr(args, "config", None):
        config = read_config(args.config, config)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "levels", None) is not None:
        config.levels = args.levels
    if getattr(args, "iters", None) is not None:
        config.iterations_per_level = args.iters
    return config


def cmd_synth(args) -> int:
    config = _load_config(args)
    spec = SceneSpec(
        kind=args.kind,
        texture=args.texture,
        texture_frequency=args.texture_freq,
        n_cameras=args.cameras,
        width=args.size,
        height=args.size,
        grid=args.grid,
        seed=config.seed,
        textureless_band=args.textureless_band,
    )
    scene = generate_scene(spec)
    masks = scene.masks
    truth_masks = scene.masks
    if args.noise_p > 0:
        masks = corrupt_masks(
            scene.masks,
            NoiseSpec(rate=args.noise_p, seed=config.seed, guard_band_px=args.guard_band),
        )
    mesh = scene.truth_mesh
    if args.perturb > 0:
        mesh = perturb_mesh(scene.truth_mesh, args.perturb, seed=config.seed)
    config.out_dir = args.out
    manifest = write_dataset(
        args.out, mesh, scene.cameras, scene.images, masks, config,
        truth_mesh=scene.truth_mesh, truth_masks=truth_masks,
    )
    for rel in manifest:
        print(rel)
    return EXIT_OK


def _relabel_pipeline(dataset: Dataset, config: RunConfig):
    lab_cfg = config.labeling_config()
    views = [rasterize(dataset.mesh, cam) for cam in dataset.cameras]
    vis = visibility_matrix(dataset.mesh, dataset.cameras, views)
    data = compute_data_term(dataset.mesh, dataset.cameras, dataset.masks, vis, lab_cfg)
    stats = compute_class_normal_stats(dataset.mesh, lab_cfg)
    adjacency = build_adjacency(dataset.mesh)
    e_init = labeling_energy(dataset.mesh, adjacency, data, stats,
                             dataset.mesh.facet_labels, lab_cfg)
    labels = solve_icm(dataset.mesh, adjacency, data, stats,
                       dataset.mesh.facet_labels, lab_cfg)
    e_final = labeling_energy(dataset.mesh, adjacency, data, stats, labels, lab_cfg)
    return labels, data, e_init, e_final


def cmd_label(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(args.dataset, config)
    labels, _, e_init, e_final = _relabel_pipeline(dataset, dataset.config)
    out_dir = args.out or os.path.join(args.dataset, "out")
    os.makedirs(out_dir, exist_ok=True)
    out = dataset.mesh.copy()
    out.facet_labels = labels
    write_ply(os.path.join(out_dir, "labeled.ply"), out)
    print(f"initial energy: {e_init:.6f}")
    print(f"final energy:   {e_final:.6f}")
    print(os.path.join(out_dir, "labeled.ply"))
    return EXIT_OK


def cmd_refine(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(args.dataset, config)
    config = dataset.config
    if getattr(args, "levels", None) is not None:
        config.levels = args.levels
    if getattr(args, "iters", None) is not None:
        config.iterations_per_level = args.iters
    refine_cfg = config.refine_config()
    if args.no_photo:
        refine_cfg.lambda_photo = 0.0
    if args.no_sem:
        refine_cfg.lambda_sem = 0.0
    out_dir = args.out or os.path.join(args.dataset, "out")
    os.makedirs(out_dir, exist_ok=True)

    callbacks = None
    if args.heatmaps:
        heat_dir = os.path.join(out_dir, "heatmaps")
        os.makedirs(heat_dir, exist_ok=True)
        counter = {"i": 0}

        def callbacks(level, it, mesh, report):
            for term, mags in report.magnitudes.items():
                for ci, mag in enumerate(mags):
                    peak = mag.max()
                    img = (255.0 * mag / peak) if peak > 0 else mag
                    write_pgm(
                        os.path.join(heat_dir, f"{term}_{counter['i']:03d}_{ci:03d}.pgm"),
                        img,
                    )
            counter["i"] += 1

    images = [img.astype(np.float64) for img in dataset.images]
    refined, reports = refine_loop(
        dataset.mesh, dataset.cameras, images, dataset.masks,
        refine_cfg, config.labeling_config(),
        on_iteration=callbacks, record_support=args.heatmaps,
    )
    write_ply(os.path.join(out_dir, "refined.ply"), refined)
    write_energy_csv(os.path.join(out_dir, "energy.csv"), reports)
    print(os.path.join(out_dir, "refined.ply"))
    print(os.path.join(out_dir, "energy.csv"))
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(args.dataset, config)
    if dataset.truth_mesh is None:
        raise DataError(f"missing truth/truth_mesh.ply under {args.dataset}")
    if dataset.truth_masks is None or dataset.truth_masks.truth_labels is None:
        raise DataError(f"missing truth/labels_NNN.pgm under {args.dataset}")
    candidate = read_ply(args.mesh) if args.mesh else dataset.mesh
    candidate.label_count = max(candidate.label_count, dataset.mesh.label_count)

    depth = depth_mae(candidate, dataset.truth_mesh, dataset.cameras)
    predicted = [
        render_label_image(rasterize(candidate, cam), candidate)
        for cam in dataset.cameras
    ]
    seg = segmentation_metrics(
        predicted, dataset.truth_masks.truth_labels, candidate.label_count
    )

    out_dir = args.out or os.path.join(args.dataset, "out")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "depth.csv"), "w") as f:
        f.write("camera,mae,pixels,coverage\n")
        for ci, (mae, count, cov) in enumerate(depth.per_camera):
            f.write(f"{ci},{mae!r},{count},{cov!r}\n")
        f.write(f"all,{depth.mae!r},{depth.pixel_count},{depth.coverage!r}\n")
    with open(os.path.join(out_dir, "segmentation.csv"), "w") as f:
        f.write("class,precision,recall,fscore\n")
        for l in range(candidate.label_count):
            f.write(f"{l},{seg.per_class_precision[l]!r},{seg.per_class_recall[l]!r},"
                    f"{seg.per_class_f[l]!r}\n")
        f.write(f"macro,{seg.macro_precision!r},{seg.macro_recall!r},{seg.macro_f!r}\n")
    summary = (
        f"depth MAE: {depth.mae:.6g} over {depth.pixel_count} px "
        f"(coverage {depth.coverage:.3f})\n"
        f"accuracy: {seg.accuracy:.4f}  macro precision: {seg.macro_precision:.4f}  "
        f"macro recall: {seg.macro_recall:.4f}  macro F: {seg.macro_f:.4f}\n"
    )
    with open(os.path.join(out_dir, "summary.txt"), "w") as f:
        f.write(summary)
    print(summary, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = _load_config(args)
    results = run_gradcheck(
        config.refine_config(), size=args.size, seed=config.seed,
        break_sign=args.debug_break_sign,
    )
    all_ok = True
    for r in results:
        if r.skipped:
            print(f"{r.term}: skipped (weight 0)")
            continue
        status = "PASS" if r.passed else "FAIL"
        all_ok &= r.passed
        print(f"{r.term}: max relative error {r.max_rel_err:.3e} "
              f"(tolerance {r.tolerance:g}, {r.checked_vertices} vertices) {status}")
    return EXIT_OK if all_ok else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="semrefine",
                     description="Variational refinement and MRF relabeling of labeled meshes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--kind", default="two_label_plane",
                   choices=["two_label_plane", "plane_box", "split_cylinder"])
    p.add_argument("--texture", default="checker", choices=["checker", "value_noise"])
    p.add_argument("--texture-freq", type=float, default=7.0)
    p.add_argument("--cameras", type=int, default=4)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--grid", type=int, default=9)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--noise-p", type=float, default=0.0,
                   help="blob mask corruption rate (fraction of pixels)")
    p.add_argument("--guard-band", type=float, default=0.0,
                   help="keep blobs this many px from true class borders")
    p.add_argument("--perturb", type=float, default=0.0,
                   help="mesh perturbation amplitude (fraction of bbox diagonal)")
    p.add_argument("--textureless-band", type=float, default=0.0,
                   help="half-width of an untextured band around x=0 (world units)")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("label", help="MRF relabeling of the dataset mesh")
    p.add_argument("dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("refine", help="variational refinement")
    p.add_argument("dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--levels", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--no-sem", action="store_true", help="drop the semantic term")
    p.add_argument("--no-photo", action="store_true", help="drop the photometric term")
    p.add_argument("--heatmaps", action="store_true",
                   help="write per-iteration gradient-magnitude heatmaps")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="depth and segmentation metrics vs. truth")
    p.add_argument("dataset")
    p.add_argument("--mesh", default=None, help="candidate mesh (default: dataset mesh)")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--debug-break-sign", action="store_true",
                   help="negate analytic gradients to demonstrate a failing check")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SemRefineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
