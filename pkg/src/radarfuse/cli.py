"""Command-line entry point exposing every pipeline stage for scripting.

All errors are reported on stderr with an `error:` prefix and a nonzero
exit code; subcommands validate their input file formats before doing any
work. Randomness flows exclusively from --seed flags plus the fixed,
published encoder seed used by the point-feature subcommands.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, formats
from .amplify import AmplifierParams, amplify
from .densify import DensifierConfig, densify
from .fusion import FusionParams, cross_modal_fuse
from .grid import GridSpec, RadarPoint, init_point_encoder, pillarize, to_dense
from .nn import LinearLayer
from .occupancy import OccupancyVolume, miou, relative_gain, report_from_kv
from .pipeline import PipelineConfig, default_pipeline_config, evaluate, \
    load_checkpoint, pipeline_config_from_kv, save_checkpoint, train
from .synth import default_scene_config, generate_scene, save_scene, \
    scene_config_from_kv, scene_seed, load_scene

# Published seed for the shared point encoder used by `pillarize`/`densify`,
# so file-level outputs are reproducible without a checkpoint.
FIXED_ENCODER_SEED = 2024


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: {message}", file=sys.stderr)
        sys.exit(2)


def _gridspec_from_kv(kv: dict[str, str]) -> GridSpec:
    return GridSpec(
        float(kv["grid.x_min"]), float(kv["grid.x_max"]),
        float(kv["grid.y_min"]), float(kv["grid.y_max"]),
        float(kv["grid.cell_size"]),
    )


def _densifier_from_kv(kv: dict[str, str]) -> DensifierConfig:
    return DensifierConfig(
        sigma_base=float(kv["sigma_base"]),
        rcs_ref=float(kv["rcs_ref"]),
        rcs_gain=float(kv["rcs_gain"]),
        sigma_min=float(kv["sigma_min"]),
        sigma_max=float(kv["sigma_max"]),
        window_radius=int(kv["window_radius"]),
    )


def _load_points(path: str) -> list[RadarPoint]:
    return [RadarPoint(*row) for row in formats.load_points_csv(path)]


def _fixed_encoder(channels: int, hidden: int):
    rng = np.random.default_rng(FIXED_ENCODER_SEED)
    return init_point_encoder(hidden, channels, rng)


def _apply_ablation(config: PipelineConfig, spec: str | None) -> PipelineConfig:
    if not spec:
        return config
    updates = {}
    for token in spec.split(","):
        token = token.strip()
        if token == "no-densifier":
            updates["enable_densifier"] = False
        elif token == "no-amplifier":
            updates["enable_amplifier"] = False
        elif token in ("no-radar", "camera-only"):
            updates["radar_enabled"] = False
        elif token:
            raise ValueError(f"unknown ablation flag '{token}'")
    return replace(config, **updates)


def _load_pipeline_config(path: str | None) -> PipelineConfig:
    if path is None:
        return default_pipeline_config()
    return pipeline_config_from_kv(formats.load_kv(path))


def _load_bundles(data_dir: str):
    root = Path(data_dir)
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise ValueError(f"{data_dir}: no scene bundles found")
    return [load_scene(p)[0] for p in dirs]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_synth_gen(args) -> int:
    config = default_scene_config()
    if args.config:
        config = scene_config_from_kv(formats.load_kv(args.config))
    seed = config.seed if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i in range(args.scenes):
        scene = generate_scene(config, scene_seed(seed, i))
        scene.index = i
        bundle = out / f"scene_{i:04d}"
        save_scene(bundle, scene, config)
        for name in ("points.csv", "camera.bfg", "gt.bfg", "scene.cfg"):
            manifest.append(f"{bundle.name}/{name} {_sha256(bundle / name)}")
    text = "\n".join(manifest) + "\n"
    (out / "manifest.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def _cmd_pillarize(args) -> int:
    spec = _gridspec_from_kv(formats.load_kv(args.grid_config))
    points = _load_points(args.points)
    encoder = _fixed_encoder(args.channels, args.hidden)
    grid = pillarize(points, spec, encoder)
    formats.write_bfg(args.out, to_dense(grid)[:, None])
    return 0


def _cmd_densify(args) -> int:
    spec = _gridspec_from_kv(formats.load_kv(args.grid_config))
    dens = _densifier_from_kv(formats.load_kv(args.densifier_config))
    points = _load_points(args.points)
    encoder = _fixed_encoder(args.channels, args.hidden)
    grid = densify(pillarize(points, spec, encoder), dens)
    formats.write_bfg(args.out, to_dense(grid)[:, None])
    return 0


def _amplifier_from_ckpt(path: str) -> AmplifierParams:
    sections = formats.read_sections(path)
    layers = {}
    for name in ("amp.phi1", "amp.phi2", "amp.proj"):
        if f"{name}.w" not in sections:
            raise ValueError(f"{path}: checkpoint is missing section '{name}.w'")
        layers[name] = LinearLayer(sections[f"{name}.w"], sections[f"{name}.b"])
    return AmplifierParams(layers["amp.phi1"], layers["amp.phi2"], layers["amp.proj"])


def _cmd_amplify(args) -> int:
    dense = formats.read_bfg(args.infile)
    if dense.shape[1] != 1:
        raise ValueError(f"{args.infile}: expected a BEV grid (Z=1), got Z={dense.shape[1]}")
    params = _amplifier_from_ckpt(args.ckpt)
    if dense.shape[0] != params.channels:
        raise ValueError(
            f"input grid has {dense.shape[0]} channels vs checkpoint "
            f"amplifier dims {params.channels}"
        )
    bev = dense[:, 0]
    mask = np.any(bev != 0, axis=0)
    out = bev.copy()
    rows, cols = np.nonzero(mask)
    if len(rows):
        keys = sorted(zip(rows.tolist(), cols.tolist()))
        feats = np.stack([bev[:, r, c] for r, c in keys])
        amped = amplify(params, feats)
        for i, (r, c) in enumerate(keys):
            out[:, r, c] = amped[i]
    formats.write_bfg(args.out, out[:, None])
    return 0


def _fusion_from_ckpt(path: str) -> FusionParams:
    sections = formats.read_sections(path)
    def layer(name):
        if f"fuse.{name}.w" not in sections:
            raise ValueError(f"{path}: checkpoint is missing section 'fuse.{name}.w'")
        return LinearLayer(sections[f"fuse.{name}.w"], sections[f"fuse.{name}.b"])
    attw = layer("attw")
    if "meta.reproject_depth" not in sections:
        raise ValueError(f"{path}: checkpoint is missing section 'meta.reproject_depth'")
    return FusionParams(
        query_proj=layer("query"), offset_img=layer("off_img"),
        offset_rad=layer("off_rad"), weight_head=attw,
        value_img=layer("val_img"), value_rad=layer("val_rad"),
        output_proj=layer("out"), k_points=attw.out_dim // 2,
        reproject_depth=int(sections["meta.reproject_depth"][0]),
    )


def _cmd_fuse(args) -> int:
    img = formats.read_bfg(args.img)
    rad = formats.read_bfg(args.radar)
    if rad.shape[1] != 1:
        raise ValueError(f"{args.radar}: radar BEV must have Z=1, got {rad.shape[1]}")
    params = _fusion_from_ckpt(args.ckpt)
    img_bev = img.reshape(img.shape[0] * img.shape[1], img.shape[2], img.shape[3])
    fused = cross_modal_fuse(img_bev, rad[:, 0], params)
    formats.write_bfg(args.out, fused[:, None])
    return 0


def _cmd_train(args) -> int:
    config = _apply_ablation(_load_pipeline_config(args.config), args.ablation)
    scenes = _load_bundles(args.data)
    ckpt_dir = Path(args.out).parent if config.checkpoint_interval else None
    result = train(scenes, config, checkpoint_dir=ckpt_dir)
    save_checkpoint(args.out, result.params)
    if args.loss_curve:
        with open(args.loss_curve, "w") as fh:
            fh.write("step,loss\n")
            for step, loss in result.loss_curve:
                fh.write(f"{step},{loss!r}\n")
    final = result.loss_curve[-1][1] if result.loss_curve else float("nan")
    print(f"trained {len(result.loss_curve)} steps, final loss {final:.6f}")
    if result.diverged:
        print("warning: training diverged; kept last finite parameters",
              file=sys.stderr)
    return 0


def _cmd_eval(args) -> int:
    config = _apply_ablation(_load_pipeline_config(args.config), args.ablation)
    scenes = _load_bundles(args.data)
    params, _ = load_checkpoint(args.ckpt, config)
    report = evaluate(params, scenes, config)
    print(report.table())
    _print_gain(report, args.baseline)
    if args.report:
        formats.save_kv(args.report, report.to_kv())
    return 0


def _print_gain(report, baseline_path: str | None) -> None:
    """Gain over a baseline report, in mIoU points and percent of baseline."""
    if not baseline_path:
        return
    base = report_from_kv(formats.load_kv(baseline_path))
    delta, pct = relative_gain(base.miou, report.miou)
    print(f"{'gain vs baseline':<24}{100 * delta:+.2f} ({pct:.2f}%)")


def _cmd_miou(args) -> int:
    pred_raw = formats.read_bfg(args.pred)
    gt_raw = formats.read_bfg(args.gt)
    for path, raw in ((args.pred, pred_raw), (args.gt, gt_raw)):
        if raw.shape[0] != 1:
            raise ValueError(f"{path}: label volumes must have C=1")
    k = args.num_classes
    names = tuple(f"class{i}" for i in range(k))
    dynamic = tuple(int(v) for v in args.dynamic.split(",")) if args.dynamic else ()
    pred = OccupancyVolume(np.rint(pred_raw[0]).astype(np.int32), names, k, dynamic)
    gt = OccupancyVolume(np.rint(gt_raw[0]).astype(np.int32), names, k, dynamic)
    report = miou(pred, gt)
    print(report.table())
    _print_gain(report, args.baseline)
    if args.report:
        formats.save_kv(args.report, report.to_kv())
    return 0


def _cmd_export_bev(args) -> int:
    dense = formats.read_bfg(args.infile)
    c, z, _, _ = dense.shape
    if not 0 <= args.z < z:
        raise ValueError(f"z index {args.z} out of range for depth {z}")
    plane = dense[:, args.z]
    if args.argmax:
        # C=1 inputs hold class ids directly; otherwise take the channel argmax
        ids = (np.rint(plane[0]).astype(np.int64) if c == 1
               else np.argmax(plane, axis=0))
        formats.write_ppm(args.out, ids)
    else:
        if not 0 <= args.channel < c:
            raise ValueError(f"channel {args.channel} out of range for C={c}")
        formats.write_pgm(args.out, plane[args.channel])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="radarfuse",
                     description="radar enrichment + camera-radar occupancy pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", parents=[], help="generate scene bundles")
    p.add_argument("--config", help="scene config (key=value)")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth_gen)

    def add_encoder_flags(p):
        p.add_argument("--channels", type=int, default=16)
        p.add_argument("--hidden", type=int, default=16)

    p = sub.add_parser("pillarize", help="points CSV -> pillar feature BFG")
    p.add_argument("--points", required=True)
    p.add_argument("--grid-config", required=True)
    p.add_argument("--out", required=True)
    add_encoder_flags(p)
    p.set_defaults(func=_cmd_pillarize)

    p = sub.add_parser("densify", help="points CSV -> densified feature BFG")
    p.add_argument("--points", required=True)
    p.add_argument("--grid-config", required=True)
    p.add_argument("--densifier-config", required=True)
    p.add_argument("--out", required=True)
    add_encoder_flags(p)
    p.set_defaults(func=_cmd_densify)

    p = sub.add_parser("amplify", help="amplify a radar BEV grid with trained params")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_amplify)

    p = sub.add_parser("fuse", help="fuse camera volume and radar BEV BFGs")
    p.add_argument("--img", required=True)
    p.add_argument("--radar", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("train", help="train the pipeline on scene bundles")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--ablation")
    p.add_argument("--loss-curve")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on scene bundles")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--ablation")
    p.add_argument("--report")
    p.add_argument("--baseline")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("miou", help="compare two class-id volumes")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--num-classes", type=int, required=True)
    p.add_argument("--dynamic", default="")
    p.add_argument("--report")
    p.add_argument("--baseline")
    p.set_defaults(func=_cmd_miou)

    p = sub.add_parser("export-bev", help="render a BFG slice as PGM/PPM")
    p.add_argument("--in", dest="infile", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--channel", type=int, default=None)
    group.add_argument("--argmax", action="store_true")
    p.add_argument("--z", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_bev)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single reporting point
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
