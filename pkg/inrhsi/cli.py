"""Command-line experiments: synth, train, reconstruct, evaluate, diffmap, gradcheck, ablate.

Every artifact-producing command writes ``<command>_manifest.json`` next to its outputs and
appends a row to the run history database.
"""
import argparse
import hashlib
import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from inrhsi import __version__, dataio, diffcore, hypernet, metrics, pipeline
from inrhsi.checkpoint import Checkpoint, load_checkpoint
from inrhsi.config_store import DEFAULT_TRAIN_CONFIG, TrainConfig, load_train_config, save_train_config
from inrhsi.diffcore import Precision
from inrhsi.errors import EXIT_DATA, ConfigurationError, InrHsiError, NumericError
from inrhsi.history_service import save_run_entry
from inrhsi.paths import resolve_output_dir

logger = logging.getLogger(__name__)

GRID_SWEEP = (2, 4, 8, 16)
ENCODING_SWEEP = (0, 1, 3, 5)
GRADCHECK_TOLERANCE = 1e-6


# manifests


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as file_handle:
        for chunk in iter(lambda: file_handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir, command, config, seed, inputs, outputs, started, extra=None):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "inputs": {str(path): file_sha256(path) for path in inputs},
        "wall_clock_seconds": round(time.monotonic() - started, 3),
        "outputs": [str(path) for path in outputs],
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / f"{command}_manifest.json"
    with open(path, "w", encoding="utf-8") as file_handle:
        json.dump(manifest, file_handle, indent=2)
    return path, manifest


def _finish(command, out_dir, config, seed, inputs, outputs, started, summary, extra=None, status="success"):
    manifest_path, manifest = write_manifest(out_dir, command, config, seed, inputs, outputs, started, extra)
    save_run_entry({
        "command": command,
        "status": status,
        "seed": seed,
        "wall_clock": manifest["wall_clock_seconds"],
        "manifest_path": manifest_path,
        "summary": summary,
    })
    return {"command": command, "status": status, "manifest_path": manifest_path, "summary": summary}


def format_result_summary(result):
    lines = [f"{result['command']}: {result.get('status', 'success')}"]
    for key, value in result.get("summary", {}).items():
        if isinstance(value, float):
            value = "inf" if math.isinf(value) else f"{value:.6g}"
        lines.append(f"  {key}: {value}")
    if result.get("manifest_path"):
        lines.append(f"  manifest: {result['manifest_path']}")
    return "\n".join(lines)


def _parse_int_list(text):
    try:
        return [int(item) for item in str(text).split(",") if item.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"Expected a comma-separated list of integers, got {text!r}") from exc


# commands


def cmd_synth(args):
    started = time.monotonic()
    if args.size < 1 or args.bands < 1 or args.count < 1:
        raise ConfigurationError("--size, --bands and --count must be positive")
    out_dir = resolve_output_dir(args.out)
    outputs = []
    for offset in range(args.count):
        seed = args.seed + offset
        cube = dataio.synth_scene(args.size, args.size, args.bands, seed, high_frequency=args.high_frequency)
        rgb = dataio.project_rgb(cube, dataio.gaussian_response(cube.wavelengths))
        cube_path = out_dir / f"scene_{seed}.hsrc"
        dataio.save_cube(cube, cube_path)
        if args.rgb_format == "ppm":
            rgb_path = out_dir / f"scene_{seed}_rgb.ppm"
            dataio.save_ppm(rgb, rgb_path)
        else:
            rgb_path = out_dir / f"scene_{seed}_rgb.hsrc"
            dataio.save_rgb(rgb, rgb_path)
        outputs += [cube_path, rgb_path]
    config = {"size": args.size, "bands": args.bands, "count": args.count,
              "high_frequency": args.high_frequency, "rgb_format": args.rgb_format}
    summary = {"scenes": args.count, "size": args.size, "bands": args.bands}
    return _finish("synth", out_dir, config, args.seed, [], outputs, started, summary)


def _train_overrides(args):
    return {
        "lr0": args.lr,
        "epochs": args.epochs,
        "decay_factor": args.decay_factor,
        "decay_every": args.decay_every,
        "patch": args.patch,
        "patches_per_image": args.patches_per_image,
        "batch_size": args.batch_size,
        "seed": args.seed,
        "S": args.s,
        "n_freqs": args.n_freqs,
        "encoding_enabled": False if args.no_encoding else None,
        "hidden_width": args.hidden,
        "bands": args.bands,
        "channels": _parse_int_list(args.channels) if args.channels else None,
        "slope": args.slope,
        "activation": args.activation,
        "output_activation": args.output_activation,
        "loss": args.loss,
        "precision": args.precision,
        "checkpoint_every": args.checkpoint_every,
    }


def _load_scenes(cube_paths, rgb_paths):
    if rgb_paths and len(rgb_paths) != len(cube_paths):
        raise ConfigurationError(f"{len(rgb_paths)} RGB files given for {len(cube_paths)} cubes")
    scenes = []
    for index, path in enumerate(cube_paths):
        cube = dataio.load_cube(path)
        if rgb_paths:
            rgb = dataio.load_rgb(rgb_paths[index])
        else:
            rgb = dataio.project_rgb(cube, dataio.gaussian_response(cube.wavelengths))
        scenes.append((cube, rgb))
    return scenes


def cmd_train(args):
    started = time.monotonic()
    cfg = load_train_config(args.config, _train_overrides(args))
    scenes = _load_scenes(args.cubes, args.rgb)
    if args.bands is None and scenes[0][0].bands != cfg.bands:
        cfg.bands = scenes[0][0].bands
        cfg.validate()
    split_names = None
    if args.split:
        split = dataio.split_dataset(list(zip(args.cubes, scenes)), seed=cfg.seed)
        split_names = {part: [str(path) for path, _ in getattr(split, part)] for part in ("train", "val", "test")}
        scenes = [scene for _, scene in split.train]
        if not scenes:
            raise ConfigurationError("The training split is empty; pass more scenes or drop --split")

    out_dir = resolve_output_dir(args.out)
    checkpoint_path = out_dir / "checkpoint.inrc"
    log_path = out_dir / "train_log.txt"
    config_path = out_dir / "train_config.json"
    save_train_config(cfg, config_path)
    result = pipeline.train(
        cfg, scenes, checkpoint_path=checkpoint_path, log_path=log_path,
        resume_from=args.resume, wavelengths=scenes[0][0].wavelengths,
    )
    inputs = list(args.cubes) + list(args.rgb or []) + ([args.resume] if args.resume else [])
    summary = {
        "epochs": result.epoch,
        "final_loss": result.losses[-1] if result.losses else float("nan"),
        "parameters": hypernet.count_parameters(result.weights),
    }
    extra = {"split": split_names} if split_names else None
    return _finish("train", out_dir, cfg.to_dict(), cfg.seed, inputs,
                   [checkpoint_path, log_path, config_path], started, summary, extra)


def cmd_reconstruct(args):
    started = time.monotonic()
    checkpoint = load_checkpoint(args.checkpoint)
    rgb = dataio.load_rgb(args.rgb)
    cube = pipeline.reconstruct(rgb, checkpoint, workers=args.workers)
    out_dir = resolve_output_dir(args.out)
    cube_path = out_dir / args.name
    dataio.save_cube(cube, cube_path)
    summary = {"width": cube.width, "height": cube.height, "bands": cube.bands, "tiles": cube.metadata["tiles"]}
    return _finish("reconstruct", out_dir, checkpoint.config.to_dict(), checkpoint.config.seed,
                   [args.checkpoint, args.rgb], [cube_path], started, summary, {"tiling": cube.metadata})


def cmd_evaluate(args):
    started = time.monotonic()
    reference = dataio.load_cube(args.reference)
    estimate = dataio.load_cube(args.estimate)
    report = metrics.evaluate(reference, estimate, per_image_peak=args.per_image_peak)
    out_dir = resolve_output_dir(args.out)
    text_path, json_path = metrics.write_report(report, out_dir)
    print(metrics.format_report_text(report))
    summary = {"psnr_db": report.psnr, "ssim": report.ssim, "sam_deg": report.sam}
    return _finish("evaluate", out_dir, {"per_image_peak": args.per_image_peak}, None,
                   [args.reference, args.estimate], [text_path, json_path], started, summary)


def cmd_diffmap(args):
    started = time.monotonic()
    reference = dataio.load_cube(args.reference)
    estimate = dataio.load_cube(args.estimate)
    bands = _parse_int_list(args.bands)
    if not bands:
        raise ConfigurationError("--bands needs at least one band index")
    maps = metrics.diff_map(reference, estimate, bands)
    out_dir = resolve_output_dir(args.out)
    written = metrics.write_diff_maps(maps, out_dir, reference.wavelengths, png=args.png)
    summary = {"maps": len(maps), "max_abs_diff": max(float(image.max()) for image in maps.values())}
    return _finish("diffmap", out_dir, {"bands": bands, "png": args.png}, None,
                   [args.reference, args.estimate], written, started, summary)


def gradcheck_config(args):
    return TrainConfig(
        patch=args.patch, S=args.s, n_freqs=args.n_freqs, hidden_width=args.hidden, bands=args.bands,
        channels=tuple(_parse_int_list(args.channels)), seed=args.seed, precision=Precision.VERIFICATION.value,
    ).validate()


def run_gradcheck(cfg, step=1e-6, max_coords=None, head_std=0.1):
    """Max relative gradient error of the full model loss on one synthetic patch."""
    rng = np.random.default_rng(cfg.seed)
    cube = dataio.synth_scene(cfg.patch, cfg.patch, cfg.bands, cfg.seed)
    rgb = dataio.project_rgb(cube, dataio.gaussian_response(cube.wavelengths))
    weights = hypernet.init_weights(cfg.hypernet_config(), rng, Precision.VERIFICATION, head_std=head_std)
    objective, theta = pipeline.flat_objective(weights, [(rgb, cube.data)], cfg)
    return diffcore.grad_check(objective, theta, h=step, max_coords=max_coords, rng=rng), theta.size


def cmd_gradcheck(args):
    started = time.monotonic()
    cfg = gradcheck_config(args)
    error, count = run_gradcheck(cfg, step=args.step, max_coords=args.max_coords)
    passed = error <= args.tolerance
    out_dir = resolve_output_dir(args.out)
    summary = {"max_relative_error": error, "parameters": count, "passed": passed}
    result = _finish("gradcheck", out_dir, cfg.to_dict(), cfg.seed, [], [], started, summary,
                     status="success" if passed else "failed")
    if not passed:
        raise NumericError(f"Gradient check failed: max relative error {error:.3e} > {args.tolerance:.1e}")
    return result


def run_sweep(sweep, values, seeds, size, bands, steps, lr=1e-3, hidden=32):
    """Median final PSNR (and seam score for grids) per sweep value over seeds."""
    rows = []
    for value in values:
        psnrs, seams = [], []
        for seed in seeds:
            overrides = {"patch": size, "bands": bands, "seed": seed, "hidden_width": hidden,
                         "lr0": lr, "patches_per_image": 1, "channels": (16, 32, 32, 64, 64)}
            if sweep == "grid":
                overrides["S"] = value
                cube = dataio.synth_scene(size, size, bands, seed)
            else:
                overrides.update(S=4, n_freqs=value, encoding_enabled=value > 0)
                cube = dataio.synth_scene(size, size, bands, seed, high_frequency=True)
            cfg = TrainConfig(**overrides).validate()
            rgb = dataio.project_rgb(cube, dataio.gaussian_response(cube.wavelengths))
            fit = pipeline.fit_scene(cfg, cube, rgb, steps)
            estimate = pipeline.reconstruct(rgb, Checkpoint(cfg, cube.wavelengths, fit.weights, {}))
            psnrs.append(metrics.psnr(cube, estimate)[1])
            if sweep == "grid":
                seams.append(metrics.block_seam_score(estimate, size // value))
        row = {"value": value, "psnr_db": float(np.median(psnrs)), "psnr_runs": psnrs}
        if seams:
            row.update(seam_score=float(np.median(seams)), seam_runs=seams)
        logger.info("%s sweep value %s: median PSNR %.3f dB", sweep, value, row["psnr_db"])
        rows.append(row)
    return rows


def cmd_ablate(args):
    started = time.monotonic()
    seeds = _parse_int_list(args.seeds)
    if args.values:
        values = _parse_int_list(args.values)
    else:
        values = [value for value in GRID_SWEEP if args.size // value >= 2] if args.sweep == "grid" else list(ENCODING_SWEEP)
    rows = run_sweep(args.sweep, values, seeds, args.size, args.bands, args.steps, lr=args.lr, hidden=args.hidden)
    out_dir = resolve_output_dir(args.out)
    results_path = out_dir / f"ablate_{args.sweep}.json"
    with open(results_path, "w", encoding="utf-8") as file_handle:
        json.dump(rows, file_handle, indent=2)
    for row in rows:
        label = "off" if args.sweep == "encoding" and row["value"] == 0 else row["value"]
        seam = f" seam={row['seam_score']:.6f}" if "seam_score" in row else ""
        print(f"{args.sweep}={label} psnr_db={row['psnr_db']:.4f}{seam}")
    config = {"sweep": args.sweep, "values": values, "seeds": seeds, "size": args.size,
              "bands": args.bands, "steps": args.steps, "lr": args.lr, "hidden": args.hidden}
    summary = {"runs": len(values) * len(seeds), "best_value": max(rows, key=lambda row: row["psnr_db"])["value"]}
    return _finish("ablate", out_dir, config, seeds[0] if seeds else None, [], [results_path], started, summary)


# parser


def _add_train_flags(parser):
    defaults = DEFAULT_TRAIN_CONFIG
    parser.add_argument("cubes", nargs="+", help="HSRC training cubes")
    parser.add_argument("--rgb", nargs="+", help="Aligned RGB inputs (default: project each cube)")
    parser.add_argument("--config", help="JSON file with training config values")
    parser.add_argument("--lr", type=float, help=f"Initial learning rate (default {defaults['lr0']})")
    parser.add_argument("--epochs", type=int, help=f"Epoch count (default {defaults['epochs']})")
    parser.add_argument("--decay-factor", type=float, help="Learning-rate decay factor")
    parser.add_argument("--decay-every", type=int, help="Epochs between decays")
    parser.add_argument("--patch", type=int, help=f"Training patch size (default {defaults['patch']})")
    parser.add_argument("--patches-per-image", type=int, help="Patches sampled per scene")
    parser.add_argument("--batch-size", type=int, help="Patches per Adam step")
    parser.add_argument("--seed", type=int, help="RNG seed")
    parser.add_argument("--s", type=int, help=f"Grid factor S (default {defaults['S']})")
    parser.add_argument("--n-freqs", type=int, help=f"Encoding frequencies N (default {defaults['n_freqs']})")
    parser.add_argument("--no-encoding", action="store_true", help="Feed raw coordinates instead of the encoding")
    parser.add_argument("--hidden", type=int, help="Cell MLP hidden width")
    parser.add_argument("--bands", type=int, help="Output bands (default: taken from the data)")
    parser.add_argument("--channels", help="Comma-separated extractor channel widths")
    parser.add_argument("--slope", type=float, help="Leaky-ReLU slope")
    parser.add_argument("--activation", choices=("leaky_relu", "relu"))
    parser.add_argument("--output-activation", choices=("sigmoid", "clamp"))
    parser.add_argument("--loss", choices=("l1", "mse"))
    parser.add_argument("--precision", choices=[mode.value for mode in Precision])
    parser.add_argument("--checkpoint-every", type=int, help="Epochs between checkpoints")
    parser.add_argument("--split", action="store_true", help="Train on the 60%% split of the given scenes")
    parser.add_argument("--resume", help="Checkpoint to resume from")


def build_parser():
    parser = argparse.ArgumentParser(prog="inrhsi", description="RGB to hyperspectral reconstruction experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Synthesise a scene and its RGB projection")
    synth.add_argument("--size", type=int, default=64)
    synth.add_argument("--bands", type=int, default=31)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--count", type=int, default=1, help="Number of scenes (seeds seed, seed+1, ...)")
    synth.add_argument("--high-frequency", action="store_true", help="Use fine spatial patterns")
    synth.add_argument("--rgb-format", choices=("hsrc", "ppm"), default="hsrc")
    synth.add_argument("--out")
    synth.set_defaults(handler=cmd_synth)

    train = sub.add_parser("train", help="Train the hypernetwork")
    _add_train_flags(train)
    train.add_argument("--out")
    train.set_defaults(handler=cmd_train)

    recon = sub.add_parser("reconstruct", help="Reconstruct a cube from an RGB image")
    recon.add_argument("--checkpoint", required=True)
    recon.add_argument("--rgb", required=True)
    recon.add_argument("--workers", type=int, default=1)
    recon.add_argument("--name", default="reconstruction.hsrc")
    recon.add_argument("--out")
    recon.set_defaults(handler=cmd_reconstruct)

    evaluate = sub.add_parser("evaluate", help="PSNR, SSIM and SAM between two cubes")
    evaluate.add_argument("reference")
    evaluate.add_argument("estimate")
    evaluate.add_argument("--per-image-peak", action="store_true", help="Use max(Y) per band as the PSNR peak")
    evaluate.add_argument("--out")
    evaluate.set_defaults(handler=cmd_evaluate)

    diffmap = sub.add_parser("diffmap", help="Absolute difference images for selected bands")
    diffmap.add_argument("reference")
    diffmap.add_argument("estimate")
    diffmap.add_argument("--bands", default=",".join(str(band) for band in metrics.FIGURE_BANDS))
    diffmap.add_argument("--png", action="store_true", help="Also render PNGs with a colour bar")
    diffmap.add_argument("--out")
    diffmap.set_defaults(handler=cmd_diffmap)

    gradcheck = sub.add_parser("gradcheck", help="Finite-difference check of the full model gradient")
    gradcheck.add_argument("--patch", type=int, default=8)
    gradcheck.add_argument("--s", type=int, default=2)
    gradcheck.add_argument("--n-freqs", type=int, default=2)
    gradcheck.add_argument("--hidden", type=int, default=8)
    gradcheck.add_argument("--bands", type=int, default=4)
    gradcheck.add_argument("--channels", default="4,4")
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--step", type=float, default=1e-6)
    gradcheck.add_argument("--max-coords", type=int)
    gradcheck.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    gradcheck.add_argument("--out")
    gradcheck.set_defaults(handler=cmd_gradcheck)

    ablate = sub.add_parser("ablate", help="Grid-size or encoding-frequency trend at desk scale")
    ablate.add_argument("--sweep", choices=("grid", "encoding"), required=True)
    ablate.add_argument("--values", help="Comma-separated S or N values (0 = encoding off)")
    ablate.add_argument("--seeds", default="0,1,2")
    ablate.add_argument("--size", type=int, default=32)
    ablate.add_argument("--bands", type=int, default=8)
    ablate.add_argument("--steps", type=int, default=300)
    ablate.add_argument("--lr", type=float, default=1e-3)
    ablate.add_argument("--hidden", type=int, default=32)
    ablate.add_argument("--out")
    ablate.set_defaults(handler=cmd_ablate)
    return parser


def main_cli(argv=None):
    """Parse, dispatch and map failures onto exit codes; returns the process exit status."""
    args = build_parser().parse_args(argv)
    try:
        result = args.handler(args)
    except InrHsiError as exc:
        logger.error("%s failed: %s", args.command, exc)
        _record_failure(args.command, exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("%s failed: %s", args.command, exc)
        _record_failure(args.command, exc)
        return EXIT_DATA
    print(format_result_summary(result))
    return 0


def _record_failure(command, exc):
    try:
        save_run_entry({"command": command, "status": "error", "error_message": str(exc)})
    except Exception:
        logger.debug("Could not record failed run in history", exc_info=True)

