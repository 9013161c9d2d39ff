"""Command line interface: one executable exposing the pipeline stages.

    lanegen synth   --layout grid --preset desk --seed 1 --out scene.lgs
    lanegen tiles   --scene scene.lgs --out tiles/
    lanegen raster  --tiles tiles/ --size 128 --out rasters/
    lanegen train   --data tiles/ --out run1/
    lanegen eval    --checkpoint run1/ --tiles val_tiles/ --out results/
    lanegen render  --tiles tiles/ --checkpoint run1/ --out figs/

Config values resolve as: preset defaults < config file (--config) < explicit
flags/--set overrides. Every run writes its resolved config next to its
outputs. Exits 0 on success; on failure prints one line
``error: <ErrorClass>: <message>`` and exits 1 (argparse usage errors exit 2).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .config import Config, apply_overrides, load_config, preset_config, write_config
from .errors import LaneGenError

SCENE_PRESETS = ("desk", "paper", "internal", "nuscenes", "nuplan")


def _effective_threads(args) -> int:
    if getattr(args, "threads", 0):
        return args.threads
    env = os.environ.get("LANEGEN_THREADS")
    if env and env.isdigit() and int(env) > 0:
        return int(env)
    return os.cpu_count() or 1


def _resolve_config(args) -> Config:
    preset = getattr(args, "preset", None) or "desk"
    if preset not in ("desk", "paper"):
        # density preset names (synth) ride on the desk config scale
        preset = "desk"
    cfg = preset_config(preset)
    if getattr(args, "config", None):
        cfg = load_config(args.config, base=cfg)
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, _, value = item.partition("=")
        if not _:
            raise LaneGenError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    cfg = apply_overrides(cfg, overrides)
    if getattr(args, "threads", None):
        cfg = replace(cfg, threads=args.threads)
    return cfg


def _load_tiles_dir(path):
    from .tiling import load_tile

    files = sorted(
        f for f in os.listdir(path) if f.endswith(".json") and f != "index.json"
    )
    if not files:
        raise LaneGenError(f"no tile files found in {path}")
    return [load_tile(os.path.join(path, f)) for f in files]


def _tiles_from_data(path, cfg: Config, split: str):
    """Accept either a directory of tile .json files or of .lgs scenes
    (scenes are tiled on the fly with the config's extraction settings)."""
    from .scene import import_scene
    from .tiling import TileExtractor

    if os.path.isfile(path) and path.endswith(".lgs"):
        scene_files = [path]
    else:
        scene_files = sorted(
            os.path.join(path, f) for f in os.listdir(path) if f.endswith(".lgs")
        )
    if not scene_files:
        return _load_tiles_dir(path)
    extractor = TileExtractor(
        extent=cfg.extent,
        m_points=cfg.m_points,
        tau_align=cfg.tau_align,
        delta_prune=cfg.delta_prune,
        n_extra_per_tile=cfg.n_extra_per_tile if split == "train" else 0,
        jitter_radius=cfg.jitter_radius,
        split_tag=split,
        seed=cfg.seed,
    )
    tiles = []
    for f in scene_files:
        tiles += extractor.transform(import_scene(f))
    if not tiles:
        raise LaneGenError(f"no valid tiles extracted from scenes in {path}")
    return tiles


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .scene import DENSITY_PRESETS, export_scene, generate_scene

    cfg = _resolve_config(args)
    density, noise = cfg.density, cfg.noise_sigma
    if args.preset in DENSITY_PRESETS:
        density = DENSITY_PRESETS[args.preset]["density"]
        noise = DENSITY_PRESETS[args.preset]["noise_sigma"]
    if args.density is not None:
        density = args.density
    if args.noise_sigma is not None:
        noise = args.noise_sigma
    layout = args.layout or cfg.layout
    scene = generate_scene(
        layout, density=density, noise_sigma=noise, seed=cfg.seed, lane_width=cfg.lane_width
    )
    export_scene(scene, args.out)
    print(f"wrote {args.out}: layout={layout} trajectories={len(scene.trajectories)}")
    return 0


def cmd_tiles(args) -> int:
    from .scene import import_scene
    from .tiling import TileExtractor, save_tile

    cfg = _resolve_config(args)
    scene = import_scene(args.scene)
    extractor = TileExtractor(
        extent=cfg.extent,
        m_points=cfg.m_points,
        tau_align=cfg.tau_align,
        delta_prune=cfg.delta_prune,
        n_extra_per_tile=cfg.n_extra_per_tile if args.split == "train" else 0,
        jitter_radius=cfg.jitter_radius,
        split_tag=args.split,
        seed=cfg.seed,
    )
    tiles = extractor.transform(scene)
    os.makedirs(args.out, exist_ok=True)
    write_config(cfg, os.path.join(args.out, "resolved.cfg"))
    for i, tile in enumerate(tiles):
        save_tile(tile, os.path.join(args.out, f"{i:05d}_{tile.tile_id}.json"))
    print(f"wrote {len(tiles)} tiles to {args.out}")
    return 0


def cmd_raster(args) -> int:
    from concurrent.futures import ThreadPoolExecutor

    from .raster import rasterize, save_raster, write_png

    cfg = _resolve_config(args)
    size = args.size or cfg.raster_size
    tiles = _load_tiles_dir(args.tiles)
    os.makedirs(args.out, exist_ok=True)
    write_config(replace(cfg, raster_size=size), os.path.join(args.out, "resolved.cfg"))

    def work(item):
        i, tile = item
        raster = rasterize(tile, size, size, v_max=cfg.v_max, intensity_scale=cfg.intensity_scale)
        save_raster(raster, os.path.join(args.out, f"{i:05d}_{tile.tile_id}.lgrt"))
        if args.png:
            write_png(os.path.join(args.out, f"{i:05d}_{tile.tile_id}.png"), raster.rgb())
        return i

    with ThreadPoolExecutor(max_workers=_effective_threads(args)) as pool:
        list(pool.map(work, enumerate(tiles)))
    print(f"wrote {len(tiles)} rasters to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .training import train_loop

    cfg = _resolve_config(args)
    train_tiles = _tiles_from_data(args.data, cfg, "train")
    val_tiles = _tiles_from_data(args.val, cfg, "val") if args.val else None
    result = train_loop(train_tiles, cfg, val_tiles=val_tiles, out_dir=args.out)
    print(
        f"trained {cfg.n_steps} steps; checkpoint at "
        f"{os.path.join(args.out, 'checkpoint.lgcp')}"
    )
    if result.final_report is not None:
        print(f"final total loss {result.final_report.total:.6f}")
    return 0


def _load_model(checkpoint_dir, cfg):
    from .model import LaneNetwork, load_checkpoint
    from .training import model_config_from

    run_cfg_path = os.path.join(checkpoint_dir, "resolved.cfg")
    if os.path.exists(run_cfg_path):
        cfg = load_config(run_cfg_path, base=cfg)
    model = LaneNetwork(model_config_from(cfg))
    load_checkpoint(model, os.path.join(checkpoint_dir, "checkpoint.lgcp"))
    return model.eval(), cfg


def cmd_eval(args) -> int:
    from .evaluation import evaluate_tiles, write_breakdown, write_results

    cfg = _resolve_config(args)
    model, cfg = _load_model(args.checkpoint, cfg)
    source = args.tiles or args.scenes
    if source is None:
        raise LaneGenError("eval needs --tiles or --scenes")
    tiles = _tiles_from_data(source, cfg, "val")
    result, breakdown = evaluate_tiles(
        model, tiles, cfg.raster_size, v_max=cfg.v_max,
        thresholds=cfg.thresholds(), intensity_scale=cfg.intensity_scale,
    )
    os.makedirs(args.out, exist_ok=True)
    write_config(cfg, os.path.join(args.out, "resolved.cfg"))
    write_results(
        os.path.join(args.out, "results.txt"), result, extra={"n_tiles": len(tiles)}
    )
    write_breakdown(os.path.join(args.out, "per_tile.tsv"), breakdown)
    if args.render:
        os.makedirs(args.render, exist_ok=True)
        _render_tiles(model, tiles, cfg, args.render)
    print(
        f"ap={result.ap:.6f} ap_c={result.ap_c:.6f} ap_ld={result.ap_ld:.6f} "
        f"-> {os.path.join(args.out, 'results.txt')}"
    )
    return 0


def _render_tiles(model, tiles, cfg: Config, out_dir):
    from .evaluation import render_tile_svg
    from .raster import rasterize

    for i, tile in enumerate(tiles):
        raster = rasterize(
            tile, cfg.raster_size, cfg.raster_size,
            v_max=cfg.v_max, intensity_scale=cfg.intensity_scale,
        )
        pred = model.predict(raster)
        render_tile_svg(
            os.path.join(out_dir, f"{i:05d}_{tile.tile_id}.svg"),
            tile,
            pred,
            score_threshold=cfg.score_threshold,
        )


def cmd_render(args) -> int:
    from .evaluation import render_tile_svg

    cfg = _resolve_config(args)
    tiles = _load_tiles_dir(args.tiles)
    os.makedirs(args.out, exist_ok=True)
    if args.checkpoint:
        model, cfg = _load_model(args.checkpoint, cfg)
        _render_tiles(model, tiles, cfg, args.out)
    else:
        for i, tile in enumerate(tiles):
            render_tile_svg(
                os.path.join(args.out, f"{i:05d}_{tile.tile_id}.svg"), tile, None
            )
    print(f"rendered {len(tiles)} tiles to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, preset_choices=("desk", "paper")):
    p.add_argument("--preset", choices=preset_choices, default="desk",
                   help="config scale preset")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a single config key (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="RNG seed")
    p.add_argument("--threads", type=int, default=0,
                   help="worker threads (default: machine parallelism, or LANEGEN_THREADS)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lanegen",
        description="Lane prediction from rasterized vehicle trajectories",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    _add_common(p, preset_choices=SCENE_PRESETS)
    p.add_argument("--layout", choices=("straight", "curve", "merge", "intersection", "grid"))
    p.add_argument("--density", type=float, help="trajectories per lane")
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--out", required=True, help="output .lgs scene file")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("tiles", help="extract, filter and prune tiles from a scene")
    _add_common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--split", choices=("train", "val"), default="train")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_tiles)

    p = sub.add_parser("raster", help="rasterize tiles to 6-channel tensors")
    _add_common(p)
    p.add_argument("--tiles", required=True, help="tile directory")
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--png", action="store_true", help="also write RGB previews")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_raster)

    p = sub.add_parser("train", help="train the lane prediction model")
    _add_common(p)
    p.add_argument("--data", required=True, help="training tile directory")
    p.add_argument("--val", help="validation tile directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with Chamfer-AP")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="run directory with checkpoint.lgcp")
    p.add_argument("--tiles", help="validation tile directory")
    p.add_argument("--scenes", help="directory of .lgs scenes to tile and evaluate")
    p.add_argument("--out", required=True)
    p.add_argument("--render", help="also render SVGs into this directory")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("render", help="render tiles (optionally with predictions) to SVG")
    _add_common(p)
    p.add_argument("--tiles", required=True)
    p.add_argument("--checkpoint", help="run directory; omit to render GT only")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_render)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except LaneGenError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: FileNotFound: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
