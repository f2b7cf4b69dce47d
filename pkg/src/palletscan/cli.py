"""``palletscan`` command line: synth, convert, augment, train, tune, eval, detect, track.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines whose keys
are the long flag names (``learning-rate = 0.05``). Flags given on the command
line override the file. Reports go to the output directory as ``<name>.tsv``
and ``<name>.json`` (``--format`` picks one or both); nothing is written
anywhere else.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .augment import ELEMENTS, apply_dihedral, transform_box
from .detect import Detector, DetectorConfig, format_detections, iou
from .nn import NumericalError, WeightFileError, load_classifier, save_classifier
from .raster import GridSpec, downscale, scan_to_image, write_pgm
from .scan_core import Frame, ParseError, ScanLabel, load_frames, save_frame, write_label
from .synth import Pallet, Sampling, WorldSpec, generate_dataset
from .track import DEFAULT_GATE, MAX_MISSES, format_tracks, track_sequence
from .train_eval import AXES, HyperParams, cross_validate, evaluate, normalize_axis, sweep, train_classifier
from .workflow import (
    CLASSIFIER_SIDE,
    background_sequence,
    classifier_inputs,
    detector_split,
    fit_detector,
    hit_rate,
    static_pallet_sequence,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---- shared option groups ----

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; command-line flags take precedence")
    p.add_argument("--seed", type=int, default=0, help="seed for every stochastic step (default 0)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes; results do not depend on it")
    p.add_argument("--format", choices=["tsv", "json", "both"], default="both", help="report format")


def _grid(p):
    p.add_argument("--side", type=int, default=250, help="raster side in pixels (default 250)")
    p.add_argument("--extent", type=float, default=5.0, help="raster half-extent in meters (default 5)")


def _data_in(p):
    p.add_argument("--data", required=True, help="directory of .scan/.label files")


def _out(p):
    p.add_argument("--out", required=True, help="output directory (created if missing)")


def _hyper(p):
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--filters", type=int, default=15)
    p.add_argument("--layers", type=int, default=1, help="convolutional layers")
    p.add_argument("--no-augment", action="store_true", help="train without the 8 dihedral copies")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="palletscan", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"palletscan {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate labeled synthetic scans")
    _common(p), _out(p), _grid(p)
    p.add_argument("--kind", choices=["dataset", "static", "background"], default="dataset",
                   help="shuffled labeled dataset, or an ordered sequence with a parked pallet / no pallet")
    p.add_argument("--pallets", type=int, default=340, help="pallet frames in a dataset")
    p.add_argument("--empty", type=int, default=225, help="empty frames in a dataset")
    p.add_argument("--frames", type=int, default=10, help="frames in a sequence")
    p.add_argument("--room-half-x", type=float, default=5.0)
    p.add_argument("--room-half-y", type=float, default=5.0)
    p.add_argument("--beams", type=int, default=360)
    p.add_argument("--noise-sigma", type=float, default=0.01)
    p.add_argument("--pallet-width", type=float, default=1.2)
    p.add_argument("--pallet-depth", type=float, default=0.8)
    p.add_argument("--pocket-width", type=float, default=0.2)
    p.add_argument("--heading-jitter", type=float, default=10.0,
                   help="degrees of jitter around the room axes; negative draws any heading")
    p.add_argument("--min-distance", type=float, default=1.0, help="closest pallet face, meters")
    p.add_argument("--max-distance", type=float, default=3.0, help="farthest pallet face, meters")

    p = sub.add_parser("convert", help="rasterize scans to PGM images")
    _common(p), _data_in(p), _out(p), _grid(p)
    p.add_argument("--resize", type=int, default=0, help="block-max downscale to this side (0 keeps --side)")

    p = sub.add_parser("augment", help="write the 8 dihedral variants of every labeled raster")
    _common(p), _data_in(p), _out(p), _grid(p)

    p = sub.add_parser("train", help="train the scan classifier or the detector")
    _common(p), _data_in(p), _out(p), _grid(p), _hyper(p)
    p.add_argument("--model", choices=["classifier", "detector"], default="classifier")

    p = sub.add_parser("tune", help="cross-validated sweep of one hyperparameter")
    _common(p), _data_in(p), _out(p), _grid(p), _hyper(p)
    p.add_argument("--axis", required=True, help=f"one of {', '.join(sorted(AXES))} (dashes allowed)")
    p.add_argument("--values", required=True, help="comma-separated values")

    p = sub.add_parser("eval", help="score a saved model, or cross-validate when none is given")
    _common(p), _data_in(p), _out(p), _grid(p), _hyper(p)
    p.add_argument("--classifier", help="classifier weight file (.psdw)")
    p.add_argument("--detector", help="detector directory; scores the held-out pallet frames")

    p = sub.add_parser("detect", help="run the detector on every scan")
    _common(p), _data_in(p), _out(p), _grid(p)
    p.add_argument("--detector", required=True, help="detector directory from `train --model detector`")

    p = sub.add_parser("track", help="detect and associate pallets over an ordered scan directory")
    _common(p), _data_in(p), _out(p), _grid(p)
    p.add_argument("--detector", required=True)
    p.add_argument("--classifier", help="whole-scan classifier; frames it rejects skip proposals")
    p.add_argument("--gate", type=float, default=DEFAULT_GATE, help="association gate in pixels")
    p.add_argument("--max-misses", type=int, default=MAX_MISSES)
    return parser


# ---- config file ----

def read_config(path: str) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}: line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _apply_config(sub: argparse.ArgumentParser, config: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(config) - set(actions))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    defaults = {}
    for key, value in config.items():
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() not in ("0", "1", "true", "false", "yes", "no"):
                raise UsageError(f"config key {key} expects a boolean")
            defaults[key] = value.lower() in ("1", "true", "yes")
        else:
            defaults[key] = value  # argparse applies the action's type to string defaults
    sub.set_defaults(**defaults)


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        command = next((a for a in argv if not a.startswith("-") and a in _subparsers(parser)), None)
        if command is not None:
            _apply_config(_subparsers(parser)[command], read_config(known.config))
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_usage().strip() + "\npalletscan: error: a command is required")
    return args


def _subparsers(parser) -> dict:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


# ---- helpers ----

def _grid_spec(args) -> GridSpec:
    return GridSpec(args.side, args.extent)


def _hyperparams(args) -> HyperParams:
    return HyperParams(
        learning_rate=args.learning_rate, max_epochs=args.epochs, folds=args.folds,
        batch_size=args.batch_size, filters=args.filters, conv_layers=args.layers,
        seed=args.seed, augment=not args.no_augment,
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out {out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _input_dir(path: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"{p}: no such directory")
    return p


def _frames(args, require_labels: bool = False) -> list[Frame]:
    frames = load_frames(_input_dir(args.data), require_labels)
    if not frames:
        raise DataError(f"{args.data}: no .scan files")
    return frames


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{p}: {what} not found")
    return p


def write_report(out: Path, name: str, tsv: str, data: dict, fmt: str) -> None:
    if fmt in ("tsv", "both"):
        (out / f"{name}.tsv").write_text(tsv)
    if fmt in ("json", "both"):
        (out / f"{name}.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _tsv(rows: list[tuple]) -> str:
    return "".join("\t".join(_cell(v) for v in row) + "\n" for row in rows)


def _cell(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return "NA" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def _note(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---- subcommands ----

def cmd_synth(args) -> int:
    if not 0 < args.min_distance <= args.max_distance:
        raise UsageError("need 0 < --min-distance <= --max-distance")
    try:
        grid = _grid_spec(args)
        pallet = Pallet((0.0, 0.0), 0.0, args.pallet_width, args.pallet_depth, args.pocket_width)
        world = WorldSpec(args.room_half_x, args.room_half_y, None, beams=args.beams,
                          noise_sigma=args.noise_sigma, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    jitter = None if args.heading_jitter < 0 else math.radians(args.heading_jitter)
    sampling = Sampling(heading_jitter=jitter, pallet_distance=(args.min_distance, args.max_distance))
    out = _out_dir(args)
    if args.kind == "dataset":
        # the world's pallet is a template: only its dimensions are kept, poses are sampled
        frames = generate_dataset(args.pallets, args.empty, replace(world, pallet=pallet), args.seed, grid, sampling)
    elif args.kind == "static":
        frames = static_pallet_sequence(args.frames, args.seed, replace(world, pallet=pallet), grid, sampling)
    else:
        frames = background_sequence(args.frames, args.seed, world, grid)
    for f in frames:
        save_frame(out, f)
    n_pos = sum(f.label.has_pallet for f in frames)
    rows = [("frames", len(frames)), ("pallet", n_pos), ("empty", len(frames) - n_pos)]
    write_report(out, "synth", _tsv(rows), {"kind": args.kind, "seed": args.seed, **dict(rows)}, args.format)
    return EXIT_OK


def cmd_convert(args) -> int:
    grid = _grid_spec(args)
    frames = _frames(args)
    out = _out_dir(args)
    for f in frames:
        img = scan_to_image(f.scan, grid)
        if args.resize:
            img = downscale(img, args.resize)
        write_pgm(out / f"{f.stem}.pgm", img)
    return EXIT_OK


def cmd_augment(args) -> int:
    grid = _grid_spec(args)
    frames = _frames(args, require_labels=True)
    out = _out_dir(args)
    for f in frames:
        img = scan_to_image(f.scan, grid)
        for g in ELEMENTS:
            stem = f"{f.stem}__g{g.index}"
            write_pgm(out / f"{stem}.pgm", apply_dihedral(img, g))
            boxes = tuple(transform_box(b, grid.side_pixels, g) for b in f.label.boxes)
            (out / f"{stem}.label").write_bytes(write_label(ScanLabel(f.label.has_pallet, boxes)))
    return EXIT_OK


def cmd_train(args) -> int:
    grid, hp = _grid_spec(args), _hyperparams(args)
    frames = _frames(args, require_labels=True)
    out = _out_dir(args)
    if args.model == "classifier":
        images, labels = classifier_inputs(frames, grid)
        model, losses = train_classifier(images, labels, hp)
        save_classifier(out / "classifier.psdw", model)
        rows = [("epoch", "loss")] + [(i + 1, l) for i, l in enumerate(losses)]
        data = {"model": "classifier", "examples": len(labels), "hyperparams": asdict(hp), "epoch_loss": losses}
    else:
        split = detector_split(frames, args.seed)
        if not split.train:
            raise DataError(f"{args.data}: no labeled pallet boxes to train the detector on")
        det = fit_detector(split.train, split.background, grid, DetectorConfig(), args.seed)
        det.save(out / "detector")
        rows = [("train_pallet", len(split.train)), ("train_background", len(split.background)),
                ("held_out", len(split.test))]
        data = {"model": "detector", "config": asdict(det.config), **dict(rows)}
    write_report(out, "train", _tsv(rows), data, args.format)
    return EXIT_OK


def cmd_tune(args) -> int:
    grid, hp = _grid_spec(args), _hyperparams(args)
    try:
        axis = normalize_axis(args.axis)
        values = [AXES[axis][2](v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    frames = _frames(args, require_labels=True)
    out = _out_dir(args)
    images, labels = classifier_inputs(frames, grid)
    report = sweep(images, labels, hp, axis, values, jobs=args.jobs)
    if args.format in ("tsv", "both"):
        (out / "tune.tsv").write_text(report.to_tsv())
    if args.format in ("json", "both"):
        (out / "tune.json").write_text(report.to_json())
    return EXIT_OK


def cmd_eval(args) -> int:
    grid, hp = _grid_spec(args), _hyperparams(args)
    frames = _frames(args, require_labels=True)
    out = _out_dir(args)
    data, rows = {}, []
    if args.detector:
        det = Detector.load(_existing(args.detector, "detector directory"))
        test = detector_split(frames, args.seed).test
        rate = hit_rate(det, test, grid)
        data["detector"] = {"held_out": len(test), "hit_rate": rate}
        rows += [("detector_held_out", len(test)), ("detector_hit_rate", rate)]
    if args.classifier or not args.detector:
        images, labels = classifier_inputs(frames, grid)
        if args.classifier:
            model = load_classifier(_existing(args.classifier, "classifier"))
            m = evaluate(model, images, labels)
            data["classifier"] = m.as_dict()
            rows += [(k, v) for k, v in m.as_dict().items()]
        else:
            cv = cross_validate(images, labels, hp, jobs=args.jobs)
            data["cross_validation"] = {
                "hyperparams": asdict(hp),
                "mean": asdict(cv.mean),
                "folds": [m.as_dict() for m in cv.folds],
            }
            rows += [("cv_accuracy", cv.mean.accuracy), ("cv_precision", cv.mean.precision),
                     ("cv_recall", cv.mean.recall)]
    write_report(out, "eval", _tsv(rows), data, args.format)
    return EXIT_OK


def cmd_detect(args) -> int:
    grid = _grid_spec(args)
    det = Detector.load(_existing(args.detector, "detector directory"))
    frames = _frames(args)
    out = _out_dir(args)
    lines, hits, scored = [], 0, 0
    for k, f in enumerate(frames):
        dets = det(scan_to_image(f.scan, grid))
        lines.append(format_detections(k, dets))
        if f.label is not None and f.label.boxes:
            scored += 1
            hits += any(iou(d.box, b) >= 0.5 for d in dets for b in f.label.boxes)
    (out / "detections.tsv").write_text("".join(lines))
    summary = {"frames": len(frames), "detections": sum(l.count("\n") for l in lines),
               "labeled_pallet_frames": scored, "hit_rate": hits / scored if scored else None}
    write_report(out, "detect", _tsv(list(summary.items())), summary, args.format)
    return EXIT_OK


def cmd_track(args) -> int:
    grid = _grid_spec(args)
    if args.gate <= 0:
        raise UsageError("--gate must be positive")
    det = Detector.load(_existing(args.detector, "detector directory"))
    classifier = load_classifier(_existing(args.classifier, "classifier")) if args.classifier else None
    if classifier is not None and classifier.config.input_side != CLASSIFIER_SIDE:
        raise DataError(f"{args.classifier}: expected a {CLASSIFIER_SIDE}px classifier")
    frames = _frames(args)
    out = _out_dir(args)
    result = track_sequence([f.scan for f in frames], det, args.gate, classifier, grid,
                            max_misses=args.max_misses)
    (out / "tracks.tsv").write_text(format_tracks(result.tracks))
    summary = {
        "frames": result.frames,
        "tracks": len(result.tracks),
        "longest_track": max((len(t) for t in result.tracks), default=0),
        "proposal_calls": result.proposal_calls,
        "gated_frames": result.gated_frames,
    }
    write_report(out, "track", _tsv(list(summary.items())), summary, args.format)
    if result.frame_seconds:  # timing stays out of the reports so they remain reproducible
        _note(f"mean frame time {1000 * float(np.mean(result.frame_seconds)):.1f} ms")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "convert": cmd_convert, "augment": cmd_augment, "train": cmd_train,
    "tune": cmd_tune, "eval": cmd_eval, "detect": cmd_detect, "track": cmd_track,
}


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        _note(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if getattr(args, "jobs", 1) < 1:
        _note("--jobs must be at least 1")
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        _note(f"palletscan {args.command}: {exc}")
        return EXIT_USAGE
    except NumericalError as exc:
        _note(f"palletscan {args.command}: numeric failure: {exc}")
        return EXIT_NUMERIC
    except (DataError, ParseError, WeightFileError, UnicodeDecodeError, OSError) as exc:
        _note(f"palletscan {args.command}: {exc}")
        return EXIT_DATA
    except ValueError as exc:
        _note(f"palletscan {args.command}: {exc}")
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
