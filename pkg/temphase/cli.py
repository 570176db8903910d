"""temphase command line: analyze, stack, batch, radial, synth, eval and export."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import multiprocessing
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any, NoReturn

import numpy as np
from pydantic import ValidationError

from temphase import __version__
from temphase.core.errors import TemphaseError
from temphase.core.runtime_paths import ensure_output_dir
from temphase.core.settings import get_settings
from temphase.schemas.run_config import RunConfig, build_run_config
from temphase.services.image_io import DSpacingDB, Image2D, read_dspacing_db, read_mrc, read_pgm, write_image, write_mrc
from temphase.services.phase_matching import SCALE_MODE_CHOICES, find_peaks, radial_profile
from temphase.services.pipeline import PipelineConfig, analyze_image, prepare_fft, write_artifacts
from temphase.services.reports import (
    component_column_name,
    emit_report,
    format_d,
    format_seconds,
    radial_csv,
    write_json,
)
from temphase.services.spot_detection import (
    MASK_FOREGROUND_LEVEL,
    BinaryMask,
    confusion,
    dice,
    import_mask,
    import_probability_map,
    soft_dice,
    threshold_mask,
    write_mask,
)
from temphase.services.synthgen import (
    AugmentParams,
    FringeSpec,
    SpotSpec,
    StackFringe,
    export_training_set,
    synth_fft_spots,
    synth_lattice,
    synth_stack,
)
from temphase.services.timeline import frame_time, process_stack

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_EMPTY = 2
IMAGE_SUFFIXES = (".pgm", ".mrc")


class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"[ERROR] {self.prog}: {message}\n")


# --- argument wiring ------------------------------------------------------------


def _add_common_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="JSON run config; CLI flags take precedence")
    parser.add_argument("--out", dest="out_dir", type=Path, default=None, help="Output directory")
    parser.add_argument("--log-level", default=None, help="Logging level (default TEMPHASE_LOG_LEVEL or INFO)")
    parser.add_argument("--seed", type=int, default=None)


def _add_fft_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--pixel-size", type=float, default=None, help="Calibration in nm/px (required)")
    parser.add_argument(
        "--scale-mode", choices=SCALE_MODE_CHOICES, default=None, help="paper_compat (alias compat) or generalized"
    )
    parser.add_argument("--crop-size", type=int, default=None, help="Centre crop of the FFT image (default: full)")
    parser.add_argument("--final-size", type=int, default=None, help="Resized FFT image size (default: min(crop, 1024))")
    parser.add_argument("--gamma", type=float, default=None, help="Factor-map radial exponent")
    parser.add_argument("--gain", type=float, default=None, help="Brightness/contrast amplification")


def _add_pipeline_args(parser: argparse.ArgumentParser) -> None:
    _add_fft_args(parser)
    parser.add_argument("--db", dest="db_path", type=Path, default=None, help="d-spacing database CSV")
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--mask", dest="mask_path", type=Path, default=None, help="Binary P5 feature mask")
    source.add_argument("--prob-map", dest="prob_map_path", type=Path, default=None, help="P5 probability map")
    parser.add_argument("--half", action="store_true", default=None, help="Mask covers the top half only")
    parser.add_argument("--prob-threshold", type=float, default=None)
    parser.add_argument("--blur-sigma", type=float, default=None)
    parser.add_argument("--dc-radius", type=float, default=None)
    parser.add_argument("--k-sigma", type=float, default=None)
    parser.add_argument("--symmetry-tolerance", type=float, default=None)
    parser.add_argument("--min-blob-area", type=int, default=None)
    parser.add_argument("--fg-fraction", type=float, default=None)
    parser.add_argument("--open-iters", type=int, default=None)
    parser.add_argument("--dilate-iters", type=int, default=None)
    parser.add_argument("--match-tolerance", type=float, default=None)
    parser.add_argument("--map-threshold", type=float, default=None)
    parser.add_argument("--map-radius-scale", type=float, default=None)
    parser.add_argument("--map-intensity", choices=("envelope", "magnitude"), default=None)
    parser.add_argument("--peak-prominence", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="temphase", description="HRTEM FFT phase identification and mapping")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    analyze = sub.add_parser("analyze", help="Single image: FFT, features, components, maps")
    analyze.add_argument("image", type=Path)
    _add_common_args(analyze)
    _add_pipeline_args(analyze)
    analyze.add_argument("--dump-labels", action="store_true", default=None, help="Write labels.pgm")

    stack = sub.add_parser("stack", help="MRC stack: per-frame analysis and intensity profile")
    stack.add_argument("mrc", type=Path)
    _add_common_args(stack)
    _add_pipeline_args(stack)
    stack.add_argument("--frame-time", dest="frame_period_s", type=float, default=None, help="Seconds per frame")
    stack.add_argument("--workers", type=int, default=None)
    stack.add_argument("--intensity-metric", choices=("linear", "pixel-count"), default=None)

    batch = sub.add_parser("batch", help="Many images in parallel, one output directory each")
    batch.add_argument("inputs", type=Path, nargs="+", help="Image files or directories")
    _add_common_args(batch)
    _add_pipeline_args(batch)
    batch.add_argument("--workers", type=int, default=None)
    batch.add_argument("--dump-labels", action="store_true", default=None)

    radial = sub.add_parser("radial", help="Diffraction-like profile of one image")
    radial.add_argument("image", type=Path)
    _add_common_args(radial)
    _add_fft_args(radial)
    radial.add_argument("--mask", dest="mask_path", type=Path, default=None)

    synth = sub.add_parser("synth", help="Synthetic fringe images, stacks or FFT spot fixtures")
    _add_common_args(synth)
    synth.add_argument("--fringes", default=None, help="d:theta_deg:amplitude[:onset[:growth]],... ")
    synth.add_argument("--spots", default=None, help="FFT spot fixture: x:y[:amplitude[:sigma]],...")
    synth.add_argument("--size", type=int, default=1024)
    synth.add_argument("--pixel-size", type=float, default=None)
    synth.add_argument("--noise", type=float, default=0.0)
    synth.add_argument("--frames", type=int, default=None, help="Write an MRC stack with this many frames")
    synth.add_argument("--frame-time", dest="frame_period_s", type=float, default=None)

    evaluate = sub.add_parser("eval", help="Dice and confusion counts of predicted vs truth masks")
    _add_common_args(evaluate)
    evaluate.add_argument("--pred", type=Path, required=True, help="Mask/probability map or directory")
    evaluate.add_argument("--truth", type=Path, required=True, help="Truth mask or directory")
    evaluate.add_argument("--prob", action="store_true", help="Treat predictions as probability maps")
    evaluate.add_argument("--prob-threshold", type=float, default=None)

    export = sub.add_parser("export", help="Augmented half-image training pairs")
    _add_common_args(export)
    export.add_argument("--images", type=Path, nargs="*", default=(), help="Source FFT images (P5)")
    export.add_argument("--masks", type=Path, nargs="*", default=(), help="Masks matching --images")
    export.add_argument("--synthetic", type=int, default=0, help="Generate this many spot fixtures as sources")
    export.add_argument("--count", type=int, required=True)
    export.add_argument("--target-size", type=int, choices=(256, 512, 1024), default=1024)
    export.add_argument("--workers", type=int, default=None)
    return parser


_NON_CONFIG_KEYS = {
    "command", "config", "log_level", "image", "mrc", "inputs", "fringes", "spots", "size", "noise", "frames",
    "pred", "truth", "prob", "images", "masks", "synthetic", "count", "target_size",
}


def _run_config(args: argparse.Namespace, **extra: Any) -> RunConfig:
    values = {key: value for key, value in vars(args).items() if key not in _NON_CONFIG_KEYS}
    values.update(extra)
    return build_run_config(values, args.config)


def _configure_logging(level: str | None) -> None:
    name = (level or get_settings().log_level).upper()
    logging.basicConfig(
        level=getattr(logging, name, logging.INFO),
        format="[%(levelname)s] %(name)s: %(message)s",
    )


# --- helpers ------------------------------------------------------------------------


def load_image(path: Path, pixel_size: float | None = None) -> tuple[Image2D, dict[str, Any]]:
    """PGM, or the first frame of an MRC stack."""
    if path.suffix.lower() == ".mrc":
        stack = read_mrc(path, pixel_size=pixel_size)
        if len(stack) > 1:
            logger.warning("%s holds %d frames; analysing frame 1 (use 'stack' for all)", path, len(stack))
        meta = {"mrc_frames": len(stack), "mrc_cell_angstrom": stack.cell_angstrom}
        return stack.frames[0], meta
    return read_pgm(path).with_pixel_size(pixel_size), {}


def _load_db(cfg: RunConfig) -> DSpacingDB:
    path = cfg.db_path or get_settings().db_file
    db = read_dspacing_db(path)
    if len(db) == 0:
        raise ValueError(f"d-spacing database {path} has no entries")
    return db


def _print_components(result_matches) -> None:
    for match in result_matches:
        print(
            f"[INFO] {component_column_name(match.key)}: d_calc={format_d(match.d_calc)} "
            f"d_ref={format_d(match.d_ref)} match={match.match_pct:.2f}%"
        )


# --- subcommands -----------------------------------------------------------------------


def cmd_analyze(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    pipeline_cfg = cfg.to_pipeline_config()
    db = _load_db(cfg)
    image, meta = load_image(args.image, cfg.pixel_size)
    result = analyze_image(image, pipeline_cfg, db)
    write_artifacts(
        result,
        pipeline_cfg,
        cfg.out_dir,
        dump_labels=bool(cfg.dump_labels),
        extra={"input": str(args.image), **meta},
    )
    _print_components(result.matches)
    print(f"[INFO] {len(result.features)} features, {len(result.matches)} components -> {cfg.out_dir}")
    if len(result.features) == 0:
        print("[WARN] No features detected", file=sys.stderr)
        return EXIT_EMPTY
    return EXIT_OK


def cmd_stack(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    pipeline_cfg = cfg.to_pipeline_config()
    db = _load_db(cfg)
    stack = read_mrc(args.mrc, frame_period_s=cfg.frame_period_s, pixel_size=cfg.pixel_size)
    profile = process_stack(stack, pipeline_cfg, db, workers=cfg.workers, out_dir=cfg.out_dir)
    first = {
        component_column_name(key): (
            {"frame": frame, "time_s": frame_time(frame, profile.frame_period_s)} if frame else None
        )
        for key, frame in profile.first_detection_frame.items()
    }
    emit_report(
        cfg.out_dir,
        components=profile.components,
        radial_profile=None,
        intensity_profile=profile,
        params={
            "input": str(args.mrc),
            "config": pipeline_cfg.as_report(),
            "frames": len(stack),
            "frame_period_s": stack.frame_period_s,
            "mrc_cell_angstrom": stack.cell_angstrom,
            "first_detection": first,
            "failed_frames": list(profile.failed_frames),
            "workers": cfg.workers,
        },
    )
    for name, detection in sorted(first.items()):
        when = f"frame {detection['frame']} ({format_seconds(detection['time_s'])} s)" if detection else "never"
        print(f"[INFO] {name}: first detected {when}")
    if profile.failed_frames:
        print(f"[WARN] {len(profile.failed_frames)} frame(s) failed", file=sys.stderr)
    if not profile.component_keys:
        print("[WARN] No components matched in any frame", file=sys.stderr)
        return EXIT_EMPTY
    return EXIT_OK


# batch worker state, set by _init_batch_worker
_batch_state: dict[str, Any] = {}


def _init_batch_worker(cfg: PipelineConfig, db: DSpacingDB, dump_labels: bool) -> None:
    _batch_state.update(cfg=cfg, db=db, dump_labels=dump_labels)


def _batch_one(job: tuple[Path, Path]) -> list[str]:
    path, out_dir = job
    cfg: PipelineConfig = _batch_state["cfg"]
    try:
        image, meta = load_image(path, cfg.pixel_size)
        result = analyze_image(image, cfg, _batch_state["db"])
        write_artifacts(result, cfg, out_dir, dump_labels=_batch_state["dump_labels"], extra={"input": str(path), **meta})
    except (TemphaseError, ValueError, OSError) as exc:
        logger.warning("Batch item %s failed: %s", path, exc)
        return [str(path), "error", "0", "0", f"{type(exc).__name__}: {exc}"]
    components = ";".join(component_column_name(match.key) for match in result.matches)
    return [str(path), "ok", str(len(result.features)), str(len(result.matches)), components]


def _collect_inputs(inputs: Sequence[Path]) -> list[Path]:
    files: list[Path] = []
    for item in inputs:
        if item.is_dir():
            files.extend(sorted(p for p in item.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES))
        else:
            files.append(item)
    return files


def cmd_batch(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    pipeline_cfg = cfg.to_pipeline_config()
    db = _load_db(cfg)
    files = _collect_inputs(args.inputs)
    if not files:
        raise ValueError("batch found no input images")
    root = ensure_output_dir(cfg.out_dir)
    used: dict[str, int] = {}
    jobs = []
    for path in files:
        count = used.get(path.stem, 0)
        used[path.stem] = count + 1
        jobs.append((path, root / (path.stem if count == 0 else f"{path.stem}_{count}")))

    dump = bool(cfg.dump_labels)
    if cfg.workers > 1 and len(jobs) > 1:
        with multiprocessing.Pool(cfg.workers, initializer=_init_batch_worker, initargs=(pipeline_cfg, db, dump)) as pool:
            rows = pool.map(_batch_one, jobs)
    else:
        _init_batch_worker(pipeline_cfg, db, dump)
        rows = [_batch_one(job) for job in jobs]

    with (root / "batch_summary.csv").open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(("file", "status", "n_features", "n_components", "components"))
        writer.writerows(rows)
    failed = sum(1 for row in rows if row[1] != "ok")
    print(f"[INFO] {len(rows) - failed}/{len(rows)} images analysed -> {root}")
    if failed:
        print(f"[ERROR] {failed} image(s) failed; see batch_summary.csv", file=sys.stderr)
        return EXIT_USAGE
    if all(row[3] == "0" for row in rows):
        return EXIT_EMPTY
    return EXIT_OK


def cmd_radial(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    pipeline_cfg = cfg.to_pipeline_config()
    image, _ = load_image(args.image, cfg.pixel_size)
    product = prepare_fft(image, pipeline_cfg)
    mask = None
    if cfg.mask_path is not None:
        size = product.chain.final_size
        mask = import_mask(cfg.mask_path, size, size)
    profile = radial_profile(product.enhanced, product.chain, mask)
    out = ensure_output_dir(cfg.out_dir)
    (out / "radial_profile.csv").write_text(radial_csv(profile), encoding="utf-8", newline="")
    peaks = find_peaks(profile, cfg.peak_prominence)
    for peak in peaks[:10]:
        print(f"[INFO] peak d={format_d(peak.d_angstrom)} A intensity={peak.intensity:.6g}")
    return EXIT_OK if peaks else EXIT_EMPTY


def _parse_fields(text: str, minimum: int, maximum: int, what: str) -> list[list[float]]:
    items = []
    for chunk in filter(None, (part.strip() for part in text.split(","))):
        fields = chunk.split(":")
        if not minimum <= len(fields) <= maximum:
            raise ValueError(f"{what} entry {chunk!r} needs {minimum} to {maximum} ':'-separated values")
        try:
            items.append([float(value) for value in fields])
        except ValueError as exc:
            raise ValueError(f"{what} entry {chunk!r} is not numeric") from exc
    return items


def parse_fringes(text: str) -> list[StackFringe]:
    fringes = []
    for values in _parse_fields(text, 1, 5, "--fringes"):
        d, theta, amplitude, onset, growth = (values + [0.0, 1.0, 1.0, 0.0][len(values) - 1 :])[:5]
        spec = FringeSpec(d_spacing=d, orientation=math.radians(theta), amplitude=amplitude)
        fringes.append(StackFringe(spec, onset_frame=int(onset), growth=growth))
    return fringes


def parse_spots(text: str) -> list[SpotSpec]:
    spots = []
    for values in _parse_fields(text, 2, 4, "--spots"):
        x, y, amplitude, sigma = (values + [0.4, 2.0][len(values) - 2 :])[:4]
        spots.append(SpotSpec(x, y, amplitude, sigma))
    return spots


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    out = ensure_output_dir(cfg.out_dir)
    if args.spots is not None:
        spots = parse_spots(args.spots)
        image, mask = synth_fft_spots(spots, (args.size, args.size), args.noise, seed=cfg.seed)
        write_image(image, out / "fft.pgm")
        write_mask(mask, out / "mask.pgm")
        write_json(
            out / "manifest.json",
            {"kind": "fft_spots", "size": args.size, "seed": cfg.seed, "spots": [vars(spot) for spot in spots]},
        )
        print(f"[INFO] FFT spot fixture -> {out}")
        return EXIT_OK

    pixel_size = cfg.require_pixel_size()
    fringes = parse_fringes(args.fringes or "")
    if args.frames is not None:
        stack, truth = synth_stack(
            fringes, args.frames, args.size, pixel_size, args.noise, seed=cfg.seed, frame_period_s=cfg.frame_period_s
        )
        write_mrc(out / "stack.mrc", np.stack([frame.pixels for frame in stack.frames]).astype(np.float32))
        artifact = "stack.mrc"
    else:
        image, truth = synth_lattice(
            [item.fringe for item in fringes], (args.size, args.size), pixel_size, args.noise, seed=cfg.seed
        )
        pixels = image.pixels
        span = float(pixels.max() - pixels.min())
        write_image(image.with_pixels((pixels - pixels.min()) / span if span > 0 else pixels * 0.0), out / "lattice.pgm")
        artifact = "lattice.pgm"
    write_json(
        out / "manifest.json",
        {
            "kind": "stack" if args.frames is not None else "lattice",
            "artifact": artifact,
            "size": args.size,
            "pixel_size_nm": pixel_size,
            "seed": cfg.seed,
            "fringes": [
                {
                    "d_requested": item.d_requested,
                    "d_realized": item.d_realized,
                    "radius_px": item.radius_px,
                    "spots": item.spots,
                    "onset_frame": fringe.onset_frame,
                    "growth": fringe.growth,
                }
                for item, fringe in zip(truth, fringes)
            ],
        },
    )
    for item in truth:
        print(f"[INFO] d={item.d_realized:.5f} A -> spot radius {item.radius_px:.2f} px at {item.spots}")
    return EXIT_OK


def _pair_paths(pred: Path, truth: Path) -> list[tuple[Path, Path]]:
    if pred.is_dir() != truth.is_dir():
        raise ValueError("--pred and --truth must both be files or both be directories")
    if not pred.is_dir():
        return [(pred, truth)]
    pairs = []
    for candidate in sorted(pred.iterdir()):
        if candidate.suffix.lower() != ".pgm":
            continue
        match = truth / candidate.name
        if not match.exists():
            raise FileNotFoundError(f"No truth mask {match} for prediction {candidate}")
        pairs.append((candidate, match))
    if not pairs:
        raise ValueError(f"No .pgm predictions in {pred}")
    return pairs


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    rows = []
    totals = np.zeros(4, dtype=np.int64)
    for pred_path, truth_path in _pair_paths(args.pred, args.truth):
        truth_image = read_pgm(truth_path)
        truth = BinaryMask(np.rint(truth_image.pixels * 255.0) >= MASK_FOREGROUND_LEVEL)
        row: dict[str, Any] = {"pred": str(pred_path), "truth": str(truth_path)}
        if args.prob:
            prob = import_probability_map(pred_path, truth.width, truth.height)
            pred = threshold_mask(prob, cfg.prob_threshold)
            row["soft_dice"] = soft_dice(prob, truth)
        else:
            pred = import_mask(pred_path, truth.width, truth.height)
        counts = confusion(pred, truth)
        totals += np.asarray(counts, dtype=np.int64)
        row.update(dice=dice(pred, truth), **counts._asdict())
        rows.append(row)
        print(f"[INFO] {pred_path.name}: dice={row['dice']:.4f} tp={counts.tp} fp={counts.fp} fn={counts.fn} tn={counts.tn}")

    scores = np.asarray([row["dice"] for row in rows])
    summary = {
        "pairs": rows,
        "dice_summary": {
            "count": int(scores.size),
            "min": float(scores.min()),
            "median": float(np.median(scores)),
            "mean": float(scores.mean()),
            "max": float(scores.max()),
        },
        "confusion_total": dict(zip(("tp", "fp", "fn", "tn"), totals.tolist())),
    }
    out = ensure_output_dir(cfg.out_dir)
    write_json(out / "eval.json", summary)
    print(f"[INFO] mean dice {summary['dice_summary']['mean']:.4f} over {scores.size} pair(s) -> {out / 'eval.json'}")
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    if len(args.images) != len(args.masks):
        raise ValueError("--images and --masks must have the same length")
    sources: list[tuple[Image2D, BinaryMask]] = []
    for image_path, mask_path in zip(args.images, args.masks):
        image = read_pgm(image_path)
        sources.append((image, import_mask(mask_path, image.width, image.height)))
    rng = np.random.default_rng(cfg.seed)
    for _ in range(args.synthetic):
        size = args.target_size
        spots = []
        for _ in range(int(rng.integers(1, 4))):
            radius = rng.uniform(0.15, 0.4) * size
            angle = rng.uniform(0.0, math.pi)
            spots.append(SpotSpec((size - 1) / 2 + radius * math.cos(angle), (size - 1) / 2 + radius * math.sin(angle)))
        sources.append(synth_fft_spots(spots, (size, size), seed=int(rng.integers(0, 2**31 - 1))))
    if not sources:
        raise ValueError("export needs --images/--masks or --synthetic N")
    manifest = export_training_set(
        sources,
        args.count,
        cfg.out_dir,
        AugmentParams(seed=cfg.seed),
        target_size=args.target_size,
        workers=cfg.workers,
    )
    print(f"[INFO] {args.count} training pairs -> {manifest}")
    return EXIT_OK


COMMANDS = {
    "analyze": cmd_analyze,
    "stack": cmd_stack,
    "batch": cmd_batch,
    "radial": cmd_radial,
    "synth": cmd_synth,
    "eval": cmd_eval,
    "export": cmd_export,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"[ERROR] invalid configuration: {exc}", file=sys.stderr)
    except (TemphaseError, ValueError, OSError) as exc:
        print(f"[ERROR] {exc}", file=sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
