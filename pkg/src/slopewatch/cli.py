"""Command-line interface.

One executable with subcommands covering the monitoring chain: pairwise and
multi-view registration, vegetation filtering, DTM construction and
differencing, region extraction and classification, the error budget, the
synthetic generators, the registration benchmark, and the full pipeline.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, bench, ground, pipeline, registration, synth, terrain
from .cloud import PointClass, PointCloud, read_cloud, write_cloud
from .rigid import RigidTransform

logger = logging.getLogger(__name__)


def _write_transform_txt(path, transform: RigidTransform, src: PointCloud,
                         dst: PointCloud) -> None:
    """16-number row-major homogeneous transform, absolute coordinates."""
    r = transform.rotation
    t_abs = transform.translation + dst.origin_shift - r @ src.origin_shift
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = t_abs
    Path(path).write_text(" ".join(f"{v:.17g}" for v in m.ravel()) + "\n")


def _result_json(result: registration.RegistrationResult) -> dict:
    return {
        "rmse_m": float(result.rmse),
        "iterations": int(result.iterations),
        "converged": bool(result.converged),
        "inlier_count": int(result.inlier_count),
    }


def cmd_register(args) -> int:
    src = read_cloud(args.src)
    dst = read_cloud(args.dst)
    params = registration.IcpParams(max_iter=args.max_iter,
                                    max_pair_dist=args.max_pair_dist)
    if args.method == "icp":
        result = registration.icp(src, dst, params)
    elif args.method == "coarse+icp":
        t0 = registration.coarse_register(src, dst)
        result = registration.icp(src, dst, params, init=t0)
    elif args.method == "hybrid":
        result = registration.register_global_hybrid(
            src, dst, registration.HybridParams(icp=params))
    else:
        raise ValueError(f"unknown method {args.method!r}")
    _write_transform_txt(args.out_transform, result.transform, src, dst)
    Path(args.out_result).write_text(json.dumps(_result_json(result), indent=2,
                                                sort_keys=True) + "\n")
    print(f"rmse_m {result.rmse:.6f} inliers {result.inlier_count}")
    return 0


def cmd_register_multiview(args) -> int:
    paths = [ln.strip() for ln in Path(args.list).read_text().splitlines()
             if ln.strip() and not ln.strip().startswith("#")]
    clouds = [read_cloud(p) for p in paths]
    transforms = registration.register_multiview(clouds)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for p, t, c in zip(paths, transforms, clouds):
        stem = Path(p).stem
        _write_transform_txt(out_dir / f"{stem}_transform.txt", t, c, clouds[0])
    print(f"wrote {len(transforms)} transforms to {out_dir}")
    return 0


def cmd_filter(args) -> int:
    cloud = read_cloud(args.infile)
    cloth = ground.ClothParams(
        grid_resolution=args.cloth_resolution,
        rigidness=args.rigidness,
        class_threshold=args.class_threshold,
    )
    ground_cloud, removed, labeling = ground.filter_vegetation(
        cloud, cell_size=args.cell_size, cloth=cloth)
    if args.mask:
        lines = Path(args.mask).read_text().splitlines()
        labeling = ground.apply_mask_overrides(labeling, lines)
        gi = np.flatnonzero(labeling.labels == PointClass.GROUND)
        ri = np.flatnonzero(labeling.labels != PointClass.GROUND)
        ground_cloud, removed = cloud.subset(gi), cloud.subset(ri)
    Path(args.out).write_bytes(write_cloud(ground_cloud, "ply"))
    Path(args.removed).write_bytes(write_cloud(removed, "ply"))
    print(f"ground {len(ground_cloud)} removed {len(removed)}")
    return 0


def cmd_dtm(args) -> int:
    cloud = read_cloud(args.infile)
    mesh = terrain.build_dtm(cloud, max_edge=args.max_edge)
    Path(args.out).write_bytes(terrain.write_mesh(mesh))
    print(f"vertices {len(mesh.vertices)} triangles {len(mesh.triangles)}")
    return 0


def cmd_deform(args) -> int:
    compared, _ = terrain.read_mesh(Path(args.compared).read_bytes())
    reference, _ = terrain.read_mesh(Path(args.reference).read_bytes())
    field = terrain.mesh_distance(compared, reference,
                                  max_dist=args.max_dist,
                                  interval_days=args.days)
    Path(args.out).write_bytes(terrain.write_deformation(compared, field))
    stats = terrain.field_stats(field)
    print(f"mean_m {stats.mean:.4f} std_m {stats.std:.4f} valid {stats.valid_count}")
    return 0


def cmd_regions(args) -> int:
    mesh, field = terrain.read_deformation(Path(args.field).read_bytes())
    rates = terrain.rate_field(field)
    regions = terrain.significant_regions(mesh, rates, args.threshold,
                                          args.min_area)
    doc = {"threshold_mm_day": args.threshold, "min_area_m2": args.min_area,
           "regions": []}
    for r in regions:
        r.volume_m3 = terrain.region_volume(r, field, mesh)
        doc["regions"].append({
            "id": r.region_id,
            "vertex_set": [int(v) for v in r.vertex_set],
            "area_m2": float(r.area_m2),
            "mean_rate_mm_day": float(r.mean_rate_mm_day),
            "volume_m3": float(r.volume_m3),
        })
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"regions {len(regions)}")
    return 0


def cmd_classify(args) -> int:
    mesh, field = terrain.read_deformation(Path(args.field).read_bytes())
    doc = json.loads(Path(args.regions).read_text())
    annotations = {}
    for item in args.annotate or []:
        rid, _, tag = item.partition("=")
        annotations[int(rid)] = tag
    regions = []
    shapes = []
    ann_list = []
    for row in doc["regions"]:
        region = terrain.Region(vertex_set=np.asarray(row["vertex_set"]),
                                area_m2=row["area_m2"],
                                mean_rate_mm_day=row["mean_rate_mm_day"],
                                volume_m3=row.get("volume_m3", 0.0),
                                region_id=row["id"])
        shape = analysis.region_extent(region, field, mesh,
                                       motion_azimuth_deg=args.motion_az)
        region.W_m, region.L_m = shape.W_m, shape.L_m
        regions.append(region)
        shapes.append(shape)
        if region.region_id in annotations:
            ann_list.append(analysis.MotionAnnotation(
                region_id=region.region_id,
                cruden_type=annotations[region.region_id]))
    budget = analysis.error_budget(*analysis.DEFAULT_BUDGET_MM)
    report = analysis.build_report(
        epochs=[], fields=[], regions=regions, shapes=shapes,
        annotations=ann_list, budget=budget,
        parameters={"threshold_mm_day": doc.get("threshold_mm_day"),
                    "min_area_m2": doc.get("min_area_m2"),
                    "motion_azimuth_deg": args.motion_az})
    Path(args.out).write_text(analysis.report_to_json(report) + "\n")
    print(f"classified {len(regions)} regions")
    return 0


def cmd_budget(args) -> int:
    budget = analysis.error_budget(args.tls, args.mreg, args.treg,
                                   args.veg, args.mesh)
    print(f"{budget.sigma_mm:.1f}")
    return 0


def cmd_synth(args) -> int:
    if args.what == "terrain":
        cloud, _ = synth.gen_terrain(
            extent_m=(args.extent_x, args.extent_y),
            mean_slope_deg=args.slope, roughness=args.roughness,
            density_pts_m2=args.density, seed=args.seed)
    elif args.what == "veg":
        base = read_cloud(args.infile)
        labels = np.full(len(base), np.uint8(PointClass.GROUND))
        cloud, _ = synth.add_vegetation(base.with_(labels=labels),
                                        args.coverage, seed=args.seed)
    elif args.what == "slide":
        base = read_cloud(args.infile)
        spec = synth.LandslideSpec(center=tuple(args.center),
                                   radius_along=args.radius_along,
                                   radius_across=args.radius_across,
                                   depth_m=args.depth, azimuth_deg=args.azimuth)
        cloud, _ = synth.apply_landslide(base, spec)
    elif args.what == "scan":
        base = read_cloud(args.infile)
        poses = synth.stations_facing_slope(base, args.stations, args.standoff)
        scans = synth.simulate_stations(base, poses,
                                        noise_sigma_m=args.noise,
                                        seed=args.seed)
        out = Path(args.out)
        for i, s in enumerate(scans):
            p = out.with_name(out.stem + f"_station{i}" + out.suffix)
            p.write_bytes(write_cloud(s, "ply"))
            print(p)
        return 0
    else:
        raise ValueError(args.what)
    Path(args.out).write_bytes(write_cloud(cloud, "ply"))
    print(f"wrote {len(cloud)} points to {args.out}")
    return 0


def cmd_bench(args) -> int:
    config = bench.BenchmarkConfig(trials=args.trials, seed=args.seed)
    report = bench.run_table2_benchmark(config)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    for cfg in report["configurations"]:
        print(cfg["name"])
        for row in cfg["rows"]:
            rmse = row["mean_pose_rmse_m"]
            rmse_s = "-" if rmse is None else f"{rmse:.3f}"
            print(f"  {row['method']:<12} success {row['success_rate']:.0%} "
                  f"rmse_m {rmse_s}")
    return 0


def cmd_pipeline(args) -> int:
    config = pipeline.PipelineConfig.from_json(Path(args.config).read_text())
    result = pipeline.run_pipeline(config)
    print(f"report {result.out_dir / 'report.json'}")
    print(f"regions {len(result.regions)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slopewatch",
                                description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("register", help="pairwise registration")
    r.add_argument("--src", required=True)
    r.add_argument("--dst", required=True)
    r.add_argument("--method", choices=["icp", "coarse+icp", "hybrid"],
                   default="icp")
    r.add_argument("--out-transform", default="transform.txt")
    r.add_argument("--out-result", default="result.json")
    r.add_argument("--max-iter", type=int, default=50)
    r.add_argument("--max-pair-dist", type=float, default=None)
    r.set_defaults(func=cmd_register)

    rm = sub.add_parser("register-multiview", help="align station scans")
    rm.add_argument("--list", required=True, help="text file, one cloud path per line")
    rm.add_argument("--out-dir", default=".")
    rm.set_defaults(func=cmd_register_multiview)

    f = sub.add_parser("filter", help="vegetation filtering")
    f.add_argument("--in", dest="infile", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--removed", required=True)
    f.add_argument("--mask", default=None,
                   help="override file: one '+index' (ground) or '-index' per line")
    f.add_argument("--cell-size", type=float, default=10.0)
    f.add_argument("--cloth-resolution", type=float, default=0.5)
    f.add_argument("--rigidness", type=int, default=2)
    f.add_argument("--class-threshold", type=float, default=0.5)
    f.set_defaults(func=cmd_filter)

    d = sub.add_parser("dtm", help="triangulate a ground cloud")
    d.add_argument("--in", dest="infile", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--max-edge", type=float, default=2.0)
    d.set_defaults(func=cmd_dtm)

    de = sub.add_parser("deform", help="difference two DTMs")
    de.add_argument("--compared", required=True)
    de.add_argument("--reference", required=True)
    de.add_argument("--days", type=float, required=True)
    de.add_argument("--out", required=True)
    de.add_argument("--max-dist", type=float, default=5.0)
    de.set_defaults(func=cmd_deform)

    rg = sub.add_parser("regions", help="extract significant regions")
    rg.add_argument("--field", required=True)
    rg.add_argument("--threshold", type=float, default=2.0)
    rg.add_argument("--min-area", type=float, default=25.0)
    rg.add_argument("--out", required=True)
    rg.set_defaults(func=cmd_regions)

    cl = sub.add_parser("classify", help="shape-classify regions")
    cl.add_argument("--regions", required=True)
    cl.add_argument("--field", required=True)
    cl.add_argument("--out", required=True)
    cl.add_argument("--motion-az", type=float, default=None)
    cl.add_argument("--annotate", action="append", metavar="ID=TYPE")
    cl.set_defaults(func=cmd_classify)

    b = sub.add_parser("budget", help="propagated displacement error, mm")
    b.add_argument("--tls", type=float, required=True)
    b.add_argument("--mreg", type=float, required=True)
    b.add_argument("--treg", type=float, required=True)
    b.add_argument("--veg", type=float, required=True)
    b.add_argument("--mesh", type=float, required=True)
    b.set_defaults(func=cmd_budget)

    sy = sub.add_parser("synth", help="synthetic scene generators")
    sysub = sy.add_subparsers(dest="what", required=True)
    st = sysub.add_parser("terrain")
    st.add_argument("--extent-x", type=float, default=60.0)
    st.add_argument("--extent-y", type=float, default=40.0)
    st.add_argument("--slope", type=float, default=synth.DEFAULT_SLOPE_DEG)
    st.add_argument("--roughness", type=float, default=0.3)
    st.add_argument("--density", type=float, default=synth.DEFAULT_DENSITY_PTS_M2)
    st.add_argument("--seed", type=int, default=0)
    st.add_argument("--out", required=True)
    st.set_defaults(func=cmd_synth)
    sv = sysub.add_parser("veg")
    sv.add_argument("--in", dest="infile", required=True)
    sv.add_argument("--coverage", type=float, default=0.15)
    sv.add_argument("--seed", type=int, default=0)
    sv.add_argument("--out", required=True)
    sv.set_defaults(func=cmd_synth)
    sl = sysub.add_parser("slide")
    sl.add_argument("--in", dest="infile", required=True)
    sl.add_argument("--center", type=float, nargs=3, required=True)
    sl.add_argument("--radius-along", type=float, default=10.0)
    sl.add_argument("--radius-across", type=float, default=5.0)
    sl.add_argument("--depth", type=float, default=0.5)
    sl.add_argument("--azimuth", type=float, default=90.0)
    sl.add_argument("--seed", type=int, default=0)
    sl.add_argument("--out", required=True)
    sl.set_defaults(func=cmd_synth)
    sc = sysub.add_parser("scan")
    sc.add_argument("--in", dest="infile", required=True)
    sc.add_argument("--stations", type=int, default=3)
    sc.add_argument("--standoff", type=float, default=60.0)
    sc.add_argument("--noise", type=float, default=synth.DEFAULT_NOISE_SIGMA_M)
    sc.add_argument("--seed", type=int, default=0)
    sc.add_argument("--out", required=True)
    sc.set_defaults(func=cmd_synth)

    be = sub.add_parser("bench", help="registration benchmark")
    besub = be.add_subparsers(dest="suite", required=True)
    bt = besub.add_parser("table2")
    bt.add_argument("--trials", type=int, default=10)
    bt.add_argument("--seed", type=int, default=0)
    bt.add_argument("--out", default=None)
    bt.set_defaults(func=cmd_bench)

    pl = sub.add_parser("pipeline", help="run the full monitoring pipeline")
    pl.add_argument("--config", required=True)
    pl.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
