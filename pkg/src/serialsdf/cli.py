"""Command line: reproducible runs over the library.

Every subcommand writes its outputs plus a JSON manifest (config echo, seed,
package versions, CSV schemas, output list): ``<stem>.manifest.json`` beside a
file output, ``manifest.json`` inside a directory output. The wall-clock timestamp
lives in its own ``created`` field so the rest of the manifest, and every CSV
and mesh, is byte-identical across reruns with the same config and seed.

On a library error the process exits with status 2 and prints one JSON line
``{"error": <category>, "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import platform
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config, parse_value
from .curves import CurveKind, CurveParams
from .errors import InvalidConfig, ParseError, SerialSDFError
from .field import DecoderParams, TrainingScene, evaluate_loss, sample_training_queries, train_decoder
from .io import atomic_write, load_cloud, load_mesh, write_mesh, write_ply
from .mesher import sample_surface
from .metrics import chamfer_l1, precision_recall, recall_benchmark
from .pyramid import FEATURE_DIM, PointCloud, build_pyramid, estimate_local_geometry
from .reconstruct import prepare_cloud, reconstruct_decoder, reconstruct_imls, reconstruct_segmented, segment_cloud
from .scenes import Box, SceneOracle, SceneSpec, Sphere, Torus, generate_scene, uniform_box_cloud
from .spatial import NeighborQueryConfig, build_index

log = logging.getLogger("serialsdf")

SCHEMA_VERSION = 1
SCHEMAS = {
    "codes": ["order", "point", "code"],
    "recall": ["scales", "curve", "recall", "k", "window", "seed"],
    "loss_trace": ["step", "total"],
    "metrics": ["cd", "completeness", "accuracy", "fscore", "precision", "recall", "delta", "n_samples", "seed"],
}

PRESETS = {
    "sphere": lambda: (Sphere((0.0, 0.0, 0.0), 1.0),),
    "box": lambda: (Box((0.0, 0.0, 0.0), (0.25, 0.2, 0.15)),),
    "torus": lambda: (Torus((0.0, 0.0, 0.0), 0.4, 0.1),),
    "mixed": lambda: (
        Sphere((-0.6, 0.0, 0.0), 0.5),
        Box((0.5, 0.0, 0.0), (0.3, 0.25, 0.2)),
        Torus((0.0, 0.9, 0.0), 0.35, 0.1),
    ),
}


# ---------------------------------------------------------------- helpers

def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    atomic_write(path, buf.getvalue().encode("ascii"))


def _versions():
    import scipy

    return {
        "serialsdf": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def write_manifest(target, command, cfg: RunConfig, args, outputs, schemas=(), extra=None):
    """Write the run manifest.

    ``target`` is an output directory (manifest goes inside as
    ``manifest.json``) or an output file (manifest goes beside it as
    ``<stem>.manifest.json``).
    """
    argv = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k not in ("func",)}
    doc = {
        "command": command,
        "arguments": argv,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "versions": _versions(),
        "csv_schemas": {name: {"version": SCHEMA_VERSION, "columns": SCHEMAS[name]} for name in schemas},
        "outputs": [str(Path(o).name) for o in outputs],
        "results": extra or {},
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    target = Path(target)
    path = target.with_name(target.stem + ".manifest.json") if target.suffix else target / "manifest.json"
    atomic_write(path, (json.dumps(doc, indent=2, default=_json_default) + "\n").encode("utf-8"))
    return path


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _out_dir(path):
    """Create the directory for ``path`` (``path`` itself if it has no suffix)."""
    path = Path(path)
    if path.suffix:
        path.parent.mkdir(parents=True, exist_ok=True)
        return path.parent
    path.mkdir(parents=True, exist_ok=True)
    return path


def build_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    for item in args.set or ():
        if "=" not in item:
            raise InvalidConfig(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg = cfg.with_override(key.strip(), parse_value(value.strip()))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg.validate()


def _ncfg(cfg: RunConfig):
    n = cfg.neighbors
    return NeighborQueryConfig(k=n.k, window=n.window, r_max=n.r_max)


def _kind(cfg):
    return CurveKind(cfg.curve.kind)


def load_scene_spec(args):
    if getattr(args, "scene", None):
        try:
            doc = json.loads(Path(args.scene).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{args.scene}: {exc}") from None
        spec = SceneSpec.from_dict(doc)
    else:
        spec = SceneSpec(PRESETS[args.preset]())
    overrides = {
        name: getattr(args, name)
        for name in ("count", "noise", "sampling", "block_difference", "blocks")
        if getattr(args, name, None) is not None
    }
    if getattr(args, "scene_seed", None) is not None:
        overrides["seed"] = args.scene_seed
    spec = replace(spec, **overrides)
    spec.validate()
    return spec


def _scene_from_file(path):
    doc = json.loads(Path(path).read_text())
    return SceneSpec.from_dict(doc.get("scene", doc))


# ---------------------------------------------------------------- commands

def cmd_gen(args, cfg):
    spec = load_scene_spec(args)
    cloud, oracle = generate_scene(spec)
    out = _out_dir(args.out)
    cloud_path = out / "cloud.ply"
    write_ply(cloud_path, cloud)
    scene_doc = {"scene": spec.to_dict(), "bounds": [list(map(float, b)) for b in oracle.bounds]}
    scene_path = out / "scene.json"
    atomic_write(scene_path, (json.dumps(scene_doc, indent=2) + "\n").encode("utf-8"))
    write_manifest(out, "gen", cfg, args, [cloud_path, scene_path], extra={"points": len(cloud)})
    return 0


def cmd_index(args, cfg):
    cloud = load_cloud(args.cloud)
    params = CurveParams.for_points(cloud.positions, grid_size=cfg.curve.grid_size, bits=cfg.curve.bits)
    index = build_index(cloud.positions, params, _kind(cfg))
    out = Path(args.out)
    rows = zip(range(len(index)), index.perm.tolist(), index.codes.tolist())
    write_csv(out, SCHEMAS["codes"], rows)
    write_manifest(out, "index", cfg, args, [out], ["codes"], {"origin": list(params.origin)})
    return 0


def cmd_neighbors_bench(args, cfg):
    if args.cloud:
        cloud = PointCloud(load_cloud(args.cloud).positions)
    else:
        cloud = PointCloud(uniform_box_cloud(args.uniform, seed=cfg.seed, difference=args.block_difference))
    rng = np.random.default_rng(cfg.seed + 1)
    lo, hi = cloud.positions.min(axis=0), cloud.positions.max(axis=0)
    queries = rng.uniform(lo, hi, size=(args.queries, 3))
    params = CurveParams.for_points(cloud.positions, grid_size=cfg.curve.grid_size, bits=cfg.curve.bits)
    pyramid = build_pyramid(cloud, cfg.pyramid.S, cfg.pyramid.base_pool, params, _kind(cfg))
    table = recall_benchmark(pyramid, queries, (CurveKind.HILBERT, CurveKind.MORTON), _ncfg(cfg))
    out = Path(args.out)
    rows = [(m, kind, value, table.k, table.window, cfg.seed) for m, kind, value in table.rows()]
    write_csv(out, SCHEMAS["recall"], rows)
    write_manifest(out, "neighbors-bench", cfg, args, [out], ["recall"])
    return 0


def _prepared(args, cfg):
    cloud = load_cloud(args.cloud)
    if args.normals == "input" and cloud.normals is not None:
        est = estimate_local_geometry(PointCloud(cloud.positions), k=cfg.pyramid.feature_k)
        return PointCloud(cloud.positions, est.features, cloud.normals, est.degenerate)
    return prepare_cloud(cloud, k=cfg.pyramid.feature_k)


def cmd_reconstruct(args, cfg):
    source = args.decoder or cfg.decoder.source
    params = None if source == "imls" else DecoderParams.load(source)
    ex = cfg.extraction
    if args.segments:
        cloud = load_cloud(args.cloud)
        mesh = reconstruct_segmented(
            cloud, args.segments, _ncfg(cfg), ex.cell, cfg.pyramid.feature_k, _kind(cfg),
            cfg.curve.grid_size, params, cfg.pyramid.base_pool, ex.mask_gate,
        )
    else:
        cloud = _prepared(args, cfg)
        if params is None:
            mesh = reconstruct_imls(cloud, _ncfg(cfg), ex.cell, _kind(cfg), cfg.curve.grid_size, pad=ex.pad)
        else:
            mesh = reconstruct_decoder(
                cloud, params, _ncfg(cfg), ex.cell, cfg.pyramid.base_pool, _kind(cfg),
                cfg.curve.grid_size, pad=ex.pad, mask_gate=ex.mask_gate,
            )
    out = Path(args.out)
    write_mesh(out, mesh)
    info = {"vertices": len(mesh.vertices), "triangles": len(mesh.triangles), "decoder": source}
    write_manifest(out, "reconstruct", cfg, args, [out], extra=info)
    return 0


def _training_scene(spec: SceneSpec, cfg: RunConfig):
    cloud, oracle = generate_scene(spec)
    cloud = prepare_cloud(cloud, k=cfg.pyramid.feature_k)
    params = CurveParams.for_points(cloud.positions, grid_size=cfg.curve.grid_size, bits=cfg.curve.bits)
    pyramid = build_pyramid(cloud, cfg.pyramid.S, cfg.pyramid.base_pool, params, _kind(cfg))
    return pyramid, oracle


def cmd_train(args, cfg):
    tcfg = cfg.train
    scenes, held = [], []
    for i, path in enumerate(args.scene):
        pyramid, oracle = _training_scene(_scene_from_file(path), cfg)
        scenes.append(TrainingScene(pyramid, sample_training_queries(oracle, args.near, args.uniform, tcfg, seed=cfg.seed + 2 * i + 1)))
        held.append(TrainingScene(pyramid, sample_training_queries(oracle, args.near // 3, args.uniform // 3, tcfg, seed=cfg.seed + 2 * i + 2)))
    init = DecoderParams.init(cfg.pyramid.S, FEATURE_DIM, cfg.decoder.hidden, seed=cfg.seed, sdf_scale=cfg.decoder.sdf_scale)
    before = evaluate_loss(init, held, tcfg, _ncfg(cfg))
    params, trace = train_decoder(scenes, init, tcfg, _ncfg(cfg))
    after = evaluate_loss(params, held, tcfg, _ncfg(cfg))
    out = Path(args.out)
    outdir = _out_dir(out)
    params.save(out)
    trace_path = outdir / "loss_trace.csv"
    write_csv(trace_path, SCHEMAS["loss_trace"], enumerate(trace.tolist()))
    info = {"heldout_initial": before.total, "heldout_final": after.total, "parameters": params.n_params}
    write_manifest(out, "train", cfg, args, [out, trace_path], ["loss_trace"], info)
    return 0


def cmd_eval(args, cfg):
    mesh = load_mesh(args.mesh)
    pred = sample_surface(mesh, args.samples, seed=cfg.seed)
    if args.gt:
        gt_path = Path(args.gt)
        if gt_path.suffix.lower() == ".json":
            oracle = SceneOracle(_scene_from_file(gt_path).primitives)
            gt, _ = oracle.sample_surface(args.samples, np.random.default_rng(cfg.seed + 1))
        else:
            try:
                gt_mesh = load_mesh(gt_path)
            except SerialSDFError:
                gt_mesh = None
            if gt_mesh is not None and not gt_mesh.is_empty:
                gt = sample_surface(gt_mesh, args.samples, seed=cfg.seed + 1)
            else:
                gt = load_cloud(gt_path).positions
    else:
        gt = sample_surface(mesh, args.samples, seed=cfg.seed)
    report = chamfer_l1(pred, gt)
    p, r = precision_recall(pred, gt, cfg.delta)
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    out = Path(args.out)
    row = (report.cd, report.completeness, report.accuracy, f, p, r, cfg.delta, args.samples, cfg.seed)
    write_csv(out, SCHEMAS["metrics"], [row])
    write_manifest(out, "eval", cfg, args, [out], ["metrics"], dict(zip(SCHEMAS["metrics"], row)))
    return 0


def cmd_segment(args, cfg):
    cloud = load_cloud(args.cloud)
    out = _out_dir(args.out)
    segments = segment_cloud(cloud, args.segments, _kind(cfg), cfg.curve.grid_size)
    outputs = []
    for i, seg in enumerate(segments):
        path = out / f"segment_{i:03d}.ply"
        write_ply(path, cloud.subset(seg))
        outputs.append(path)
    write_manifest(out, "segment", cfg, args, outputs, extra={"sizes": [int(len(s)) for s in segments]})
    return 0


# ---------------------------------------------------------------- parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON or key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="run seed (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="serialsdf", description="Serialized-neighborhood SDF reconstruction toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic scene cloud")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--scene", type=Path, help="scene spec JSON")
    src.add_argument("--preset", choices=sorted(PRESETS), default="sphere")
    p.add_argument("--count", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--sampling", choices=("uniform", "nonuniform"))
    p.add_argument("--block-difference", type=int)
    p.add_argument("--blocks", choices=("octants", "slabs"))
    p.add_argument("--scene-seed", type=int)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("index", parents=[common], help="serialize a cloud and dump sorted codes")
    p.add_argument("--cloud", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="codes CSV")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("neighbors-bench", parents=[common], help="multi-scale neighborhood recall, Hilbert vs Z-order")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--cloud", type=Path)
    src.add_argument("--uniform", type=int, metavar="N", help="random cloud of N points in the unit cube")
    p.add_argument("--block-difference", type=int, help="with --uniform: octant counts in arithmetic progression")
    p.add_argument("--queries", type=int, default=1000)
    p.add_argument("--out", type=Path, required=True, help="recall CSV")
    p.set_defaults(func=cmd_neighbors_bench)

    p = sub.add_parser("reconstruct", parents=[common], help="cloud to mesh")
    p.add_argument("--cloud", type=Path, required=True)
    p.add_argument("--decoder", help='"imls" or a decoder weights file (default from config)')
    p.add_argument("--normals", choices=("estimate", "input"), default="estimate")
    p.add_argument("--segments", type=int, help="reconstruct per curve-order segment and merge")
    p.add_argument("--out", type=Path, required=True, help="mesh .ply or .obj")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("train", parents=[common], help="train decoder weights on synthetic scenes")
    p.add_argument("--scene", type=Path, action="append", required=True, help="scene spec or gen scene.json (repeatable)")
    p.add_argument("--near", type=int, default=1500, help="near-surface training queries per scene")
    p.add_argument("--uniform", type=int, default=500, help="uniform training queries per scene")
    p.add_argument("--out", type=Path, required=True, help="decoder weights file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="Chamfer-L1 and F-score of a mesh")
    p.add_argument("--mesh", type=Path, required=True)
    p.add_argument("--gt", type=Path, help="scene JSON (oracle), mesh, or point cloud; default: the mesh itself")
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--out", type=Path, required=True, help="metrics CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("segment", parents=[common], help="split a cloud into curve-order segments")
    p.add_argument("--cloud", type=Path, required=True)
    p.add_argument("--segments", type=int, default=10)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_segment)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        return args.func(args, cfg)
    except SerialSDFError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        category = "io_error" if isinstance(exc, OSError) else "invalid_argument"
        print(json.dumps({"error": category, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
