"""Command line interface.

Exit codes: 0 success, 2 input error, 3 reconstruction failure, 4 partial
aggregation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import PipelineConfig, load_config, save_config
from .errors import (
    AggregationFailure,
    GenerationError,
    InitializationFailure,
    ParseError,
    ReconstructionFailure,
    ReferentialIntegrityError,
    RigSfMError,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_RECONSTRUCTION = 3
EXIT_PARTIAL = 4

_INPUT_ERRORS = (ParseError, ReferentialIntegrityError, FileNotFoundError,
                 GenerationError)
_RECON_ERRORS = (InitializationFailure, ReconstructionFailure, AggregationFailure)


def _load_pipeline_config(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return load_config(path)


def _export_reconstruction(recon, labels, out_dir: Path) -> None:
    from .formats import SEMANTIC_PALETTE, save_reconstruction, write_ply, write_trajectory

    out_dir.mkdir(parents=True, exist_ok=True)
    save_reconstruction(recon, out_dir / "reconstruction.json")
    entries = [(u.timestamp, u.pose) for u in recon.registered_units()
               if u.pose is not None]
    write_trajectory(entries, out_dir / "trajectory.txt")
    pts, colors = [], []
    for pid in sorted(recon.points):
        p = recon.points[pid]
        pts.append(p.position)
        name = labels.name_of(p.semantic_label) if labels else "unknown"
        colors.append(SEMANTIC_PALETTE.get(name, SEMANTIC_PALETTE["unknown"]))
    pts_arr = np.array(pts, dtype=float).reshape(-1, 3)
    col_arr = np.array(colors, dtype=np.uint8).reshape(-1, 3)
    write_ply(pts_arr, col_arr, out_dir / "points.ply")


def cmd_synth(args) -> int:
    from .synthetic import (
        generate_scene,
        generate_scene_set,
        load_synth_config,
        write_cross_matches,
        write_scene,
    )

    config = load_synth_config(args.config)
    out = Path(args.out_dir)
    if args.scenes <= 1:
        scene = generate_scene(config)
        write_scene(scene, out)
        print(f"scene written to {out}")
        return EXIT_OK
    scenes, cross = generate_scene_set(config, args.scenes, args.overlap,
                                       args.plant_rotation, args.plant_translation)
    for s in scenes:
        write_scene(s, out / f"scene_{s.scene_id:02d}")
    cross_dir = out / "cross"
    cross_dir.mkdir(parents=True, exist_ok=True)
    for (a, b), pairs in sorted(cross.items()):
        write_cross_matches(pairs, cross_dir / f"pairs_{a:02d}_{b:02d}.txt")
    print(f"{len(scenes)} scenes written to {out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from .pipeline import reconstruct_project
    from .report import write_reconstruction_report

    config = _load_pipeline_config(args.config)
    trace = open(args.trace, "w") if args.trace else None
    try:
        result, inputs = reconstruct_project(args.project_dir, config,
                                             trace_file=trace)
    finally:
        if trace:
            trace.close()
    out = Path(args.project_dir) / "output"
    _export_reconstruction(result.reconstruction, inputs.labels, out)
    write_reconstruction_report(result.reconstruction, out, inputs.labels.names)
    final = result.final_report
    print(f"registered {len(result.reconstruction.registered_units())} units, "
          f"{len(result.reconstruction.points)} points; "
          f"final cost {final.final_cost:.6g}" if final else "no BA run")
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import evaluate, match_by_timestamp
    from .formats import read_trajectory
    from .report import write_eval_report

    est_entries = read_trajectory(args.estimate)
    ref_entries = read_trajectory(args.reference)
    est, ref = match_by_timestamp(est_entries, ref_entries)
    report = evaluate(est, ref, align=args.align)
    print(f"units compared: {report.num_units}")
    print(f"median rotation APE:    {report.median_rotation_deg:.6f} deg")
    print(f"median translation APE: {report.median_translation_m:.6f} m")
    print(f"RMSE translation ATE:   {report.rmse_translation_m:.6f} m")
    out = Path(args.out) if args.out else Path(args.estimate).parent / "eval"
    paths = write_eval_report(report, est, ref, out)
    print("report: " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def cmd_export(args) -> int:
    from .formats import (
        SEMANTIC_PALETTE,
        load_reconstruction,
        write_ply,
        write_trajectory,
    )

    recon = load_reconstruction(args.reconstruction)
    if args.ply:
        pts, colors = [], []
        for pid in sorted(recon.points):
            p = recon.points[pid]
            pts.append(p.position)
            colors.append(SEMANTIC_PALETTE.get(str(p.semantic_label),
                                               SEMANTIC_PALETTE["unknown"]))
        write_ply(np.array(pts, dtype=float).reshape(-1, 3),
                  np.array(colors, dtype=np.uint8).reshape(-1, 3), args.ply)
        print(f"point cloud: {args.ply}")
    if args.traj:
        entries = [(u.timestamp, u.pose) for u in recon.registered_units()
                   if u.pose is not None]
        write_trajectory(entries, args.traj)
        print(f"trajectory: {args.traj}")
    if not args.ply and not args.traj:
        print("nothing to export; pass --ply and/or --traj", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def cmd_aggregate(args) -> int:
    from .aggregate import SceneBundle, aggregate_all
    from .formats import load_reconstruction, read_anchor, read_labels
    from .pipeline import reconstruct_project
    from .report import write_reconstruction_report
    from .synthetic import read_cross_matches

    config = _load_pipeline_config(args.config)
    bundles = []
    for idx, scene_dir in enumerate(args.scene_dirs):
        scene = Path(scene_dir)
        snapshot = scene / "output" / "reconstruction.json"
        if snapshot.exists():
            recon = load_reconstruction(snapshot)
        else:
            logger.info("no snapshot in %s, reconstructing", scene)
            result, _ = reconstruct_project(scene, config)
            recon = result.reconstruction
        anchor = read_anchor(scene / "anchor.txt")
        labels = read_labels(scene / "labels.txt")
        bundles.append(SceneBundle(idx, recon, anchor, labels))

    cross_dir = Path(args.cross) if args.cross else Path(args.scene_dirs[0]).parent / "cross"
    cross = {}
    for a in range(len(bundles)):
        for b in range(a + 1, len(bundles)):
            path = cross_dir / f"pairs_{a:02d}_{b:02d}.txt"
            if path.exists():
                cross[(a, b)] = read_cross_matches(path)
    if not cross:
        print(f"no cross-match files found under {cross_dir}", file=sys.stderr)
        return EXIT_INPUT

    result = aggregate_all(bundles, cross, config)
    out = Path(args.out) if args.out else Path(args.scene_dirs[0]).parent / "fused"
    labels = bundles[0].labels
    _export_reconstruction(result.bundle.reconstruction, labels, out)
    write_reconstruction_report(result.bundle.reconstruction, out, labels.names)
    print(f"fused map: {len(result.bundle.reconstruction.registered_units())} units, "
          f"{len(result.bundle.reconstruction.points)} points -> {out}")
    if not result.complete:
        print(f"partial aggregation: {len(result.leftovers)} scenes left unmerged",
              file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_init_config(args) -> int:
    save_config(PipelineConfig(), args.path)
    print(f"default config written to {args.path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rigsfm",
        description="Incremental multi-camera rig SfM with scene aggregation.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="enable info logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", help="reconstruct one scene directory")
    p.add_argument("project_dir")
    p.add_argument("--config", help="pipeline config file")
    p.add_argument("--trace", help="write a solver trace log to this path")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("aggregate", help="fuse multiple reconstructed scenes")
    p.add_argument("scene_dirs", nargs="+")
    p.add_argument("--config", help="pipeline config file")
    p.add_argument("--cross", help="directory holding cross-match files")
    p.add_argument("--out", help="output directory for the fused map")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("synth", help="generate a synthetic scene (set)")
    p.add_argument("config", help="synth config file")
    p.add_argument("out_dir")
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--overlap", type=int, default=6,
                   help="shared units between consecutive scenes")
    p.add_argument("--plant-rotation", type=float, default=2.0,
                   help="planted anchor rotation error per merge scene [deg]")
    p.add_argument("--plant-translation", type=float, default=3.0,
                   help="planted anchor translation error per merge scene [m]")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="compare trajectories (APE/ATE)")
    p.add_argument("estimate")
    p.add_argument("reference")
    p.add_argument("--align", choices=["rigid", "sim3", "none"], default="rigid")
    p.add_argument("--out", help="report output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="export a reconstruction snapshot")
    p.add_argument("reconstruction", help="reconstruction.json path")
    p.add_argument("--ply", help="write the point cloud here")
    p.add_argument("--traj", help="write the trajectory here")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("init-config", help="write the default pipeline config")
    p.add_argument("path")
    p.set_defaults(func=cmd_init_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname).1s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _INPUT_ERRORS as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except _RECON_ERRORS as exc:
        print(f"reconstruction failed: {exc}", file=sys.stderr)
        return EXIT_RECONSTRUCTION
    except RigSfMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RECONSTRUCTION


if __name__ == "__main__":
    sys.exit(main())
