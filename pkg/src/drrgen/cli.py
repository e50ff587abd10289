"""Command-line interface.

    drr generate <volume> -o <png> [--threshold HU] [--translate tx ty tz]
                 [--rotate rx ry rz] [--view frontal|lateral] [--size W H]
                 [--spacing du dv] [--scd mm] [--sdd mm] [--keep-energy]
    drr batch <manifest.csv> --out <dir> [--views ...] [--workers N]
    drr stats <labels.csv> [--meta <meta.csv>] [--json <path>]
    drr export <labels.csv> --images <dir> -o <out.csv>

Flag semantics of --threshold / --translate / --rotate follow the
generation protocol exactly: `--threshold -100 --translate 0 300 0
--rotate 0 0 -90` reproduces a lateral-view render.  DRR_WORKERS
overrides the worker count.  Exit codes: 0 success, 1 fatal error,
2 partial failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import DrrError
from .geometry import RigidTransform, default_frontal_geometry
from .pipeline import (
    BatchConfig,
    dataset_stats,
    export_classifier_manifest,
    format_stats_table,
    run_batch,
    write_report,
    LATERAL_RZ_DEG,
    PROTOCOL_THRESHOLD_HU,
)
from .render import NormalizationSpec, encode_png, normalize, render_drr
from .siddon import AttenuationModel

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_PARTIAL = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drr", description="DRR synthesis from CT volumes")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="render a single volume to PNG")
    gen.add_argument("volume", help="input volume (.nii, .nii.gz, or .raw)")
    gen.add_argument("-o", "--output", required=True, help="output PNG path")
    gen.add_argument("--threshold", type=float, default=PROTOCOL_THRESHOLD_HU,
                     help="attenuation cutoff in HU (default %(default)s)")
    gen.add_argument("--translate", type=float, nargs=3, default=(0.0, 0.0, 0.0),
                     metavar=("TX", "TY", "TZ"), help="volume translation in mm")
    gen.add_argument("--rotate", type=float, nargs=3, default=None,
                     metavar=("RX", "RY", "RZ"),
                     help="volume rotation in degrees, applied x then y then z")
    gen.add_argument("--view", choices=("frontal", "lateral"), default="frontal",
                     help="named preset; lateral = rz -90 (ignored if --rotate is given)")
    gen.add_argument("--size", type=int, nargs=2, default=None, metavar=("W", "H"))
    gen.add_argument("--spacing", type=float, nargs=2, default=None, metavar=("DU", "DV"))
    gen.add_argument("--scd", type=float, default=None, help="source-isocenter distance, mm")
    gen.add_argument("--sdd", type=float, default=None, help="source-detector distance, mm")
    gen.add_argument("--invert", action="store_true",
                     help="render the transmission-style negative (air bright)")
    gen.add_argument("--fixed-range", type=float, nargs=2, default=None, metavar=("LO", "HI"),
                     help="normalize against fixed energy bounds instead of per-image min-max")
    gen.add_argument("--keep-energy", action="store_true",
                     help="also write the raw float32 energy image")
    gen.add_argument("--workers", type=int, default=None)

    bat = sub.add_parser("batch", help="run the generation protocol over a manifest")
    bat.add_argument("manifest", help="CSV with volume_name (+ optional volume_path) rows")
    bat.add_argument("--out", required=True, help="output directory")
    bat.add_argument("--views", nargs="+", choices=("frontal", "lateral"),
                     default=["frontal"], help="views to render (default: frontal)")
    bat.add_argument("--threshold", type=float, default=PROTOCOL_THRESHOLD_HU)
    bat.add_argument("--translate", type=float, nargs=3, default=(0.0, 300.0, 0.0),
                     metavar=("TX", "TY", "TZ"))
    bat.add_argument("--size", type=int, nargs=2, default=None, metavar=("W", "H"))
    bat.add_argument("--volume-root", default=None,
                     help="directory volume names resolve against (default: manifest dir)")
    bat.add_argument("--workers", type=int, default=None)
    bat.add_argument("--keep-energy", action="store_true")
    bat.add_argument("--no-resume", action="store_true",
                     help="re-render even when a matching sidecar exists")
    bat.add_argument("--report", default=None,
                     help="report JSON path (default: <out>/report.json)")

    st = sub.add_parser("stats", help="label distribution and patient summaries")
    st.add_argument("labels", help="CSV with split and the 18 label columns")
    st.add_argument("--meta", default=None, help="CSV with split/age/sex columns")
    st.add_argument("--json", dest="json_out", default=None, help="also write the report as JSON")

    ex = sub.add_parser("export", help="write a classifier-ready image manifest")
    ex.add_argument("labels", help="CSV with volume_name, split, and the 18 label columns")
    ex.add_argument("--images", required=True, help="directory of rendered PNGs")
    ex.add_argument("-o", "--output", required=True, help="output CSV path")
    ex.add_argument("--view", default="frontal", choices=("frontal", "lateral"))
    return parser


def _cmd_generate(args) -> int:
    from .nifti import load_nifti
    from .volume import load_raw

    path = Path(args.volume)
    volume = load_raw(path) if path.suffix == ".raw" else load_nifti(path)

    geom = default_frontal_geometry(volume)
    overrides = {}
    if args.size:
        overrides["detector_px"] = tuple(args.size)
    if args.spacing:
        overrides["detector_spacing"] = tuple(args.spacing)
    if args.scd is not None:
        overrides["scd"] = args.scd
    if args.sdd is not None:
        overrides["sdd"] = args.sdd
    if overrides:
        from dataclasses import replace

        geom = replace(geom, **overrides)

    if args.rotate is not None:
        rotation = tuple(args.rotate)
    elif args.view == "lateral":
        rotation = (0.0, 0.0, LATERAL_RZ_DEG)
    else:
        rotation = (0.0, 0.0, 0.0)
    transform = RigidTransform(rotation=rotation, translation=tuple(args.translate))

    if args.fixed_range:
        norm = NormalizationSpec(mode="fixed-range", bounds=tuple(args.fixed_range),
                                 invert=args.invert)
    else:
        norm = NormalizationSpec(invert=args.invert)

    image = render_drr(
        volume, geom, transform, AttenuationModel(threshold=args.threshold),
        workers=args.workers, volume_source=str(path.resolve()),
    )
    gray = normalize(image, norm)
    encode_png(gray, args.output, image.provenance, norm,
               energies=image.energies if args.keep_energy else None)
    print(f"wrote {args.output} ({gray.shape[0]}x{gray.shape[1]})")
    return EXIT_OK


def _cmd_batch(args) -> int:
    config = BatchConfig(
        output_dir=Path(args.out),
        views=tuple(args.views),
        threshold=args.threshold,
        translation=tuple(args.translate),
        detector_px=tuple(args.size) if args.size else None,
        workers=args.workers,
        keep_energy=args.keep_energy,
        volume_root=Path(args.volume_root) if args.volume_root else None,
        resume=not args.no_resume,
    )
    report = run_batch(args.manifest, config)
    report_path = Path(args.report) if args.report else config.output_dir / "report.json"
    write_report(report, report_path)
    counts = report.counts
    print(
        f"rendered {counts['rendered']}, skipped {counts['skipped']}, "
        f"failed {counts['failed']} (report: {report_path})"
    )
    return EXIT_PARTIAL if counts["failed"] else EXIT_OK


def _cmd_stats(args) -> int:
    report = dataset_stats(args.labels, args.meta)
    sys.stdout.write(format_stats_table(report))
    if args.json_out:
        with open(args.json_out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
    return EXIT_OK


def _cmd_export(args) -> int:
    written, omitted = export_classifier_manifest(
        args.labels, args.images, args.output, view=args.view
    )
    print(f"wrote {written} rows to {args.output}" + (f", {omitted} omitted (no image)" if omitted else ""))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handler = {
        "generate": _cmd_generate,
        "batch": _cmd_batch,
        "stats": _cmd_stats,
        "export": _cmd_export,
    }[args.command]
    try:
        return handler(args)
    except (DrrError, ValueError) as exc:
        # ValueError covers contract violations on user-supplied parameters
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
