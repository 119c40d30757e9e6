"""Command-line entry point: ``fullband <command> ...``.

Exit status is 0 on success, 2 when inputs fail validation and 3 when files
cannot be read or written.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import torch

from . import codec as codec_mod
from . import metrics
from . import pipeline as pl
from . import prior as prior_mod
from .planner import PhraseDB, PlannerWeights, entries_from_piece
from .score import (Piece, load_leadsheet, load_piece, mixture_track, parse_phrases, read_midi,
                    to_common_time, write_midi)
from .smf import MidiParseError
from .toydata import bundled_aabb

log = logging.getLogger("fullband")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 2, 3


class CliError(ValueError):
    pass


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("shared options")
    g.add_argument("--config", type=Path, help="JSON file of training/sampling settings")
    g.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")
    g.add_argument("--codec-checkpoint", type=Path)
    g.add_argument("--prior-checkpoint", type=Path)
    g.add_argument("--beta", type=float, default=None, help="context noise weight in [0, 1]")
    g.add_argument("--nucleus-p", type=float, default=None)
    g.add_argument("--temperature", type=float, default=None)
    g.add_argument("--instruments", help='comma-separated instrument classes, e.g. "0,5,12"')
    g.add_argument("--prompt", type=Path, help="2-bar multi-track MIDI whose groupings open the piece")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="fullband", description=__doc__.splitlines()[0],
                                     epilog="shared options go after the command name")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="segment a MIDI folder and write a manifest")
    p.add_argument("corpus", type=Path)
    p.add_argument("out", type=Path)
    p.add_argument("--split", default="95/5", help='song-level split, e.g. "95/5" or "8:1:1"')
    p.add_argument("--segment-bars", type=int, default=pl.SEGMENT_BARS)

    p = sub.add_parser("build-db", parents=[common], help="build a piano phrase database")
    p.add_argument("sources", type=Path, help="folder of MIDI files, each with a <name>.phrases sidecar")
    p.add_argument("out", type=Path)
    p.add_argument("--min-voices", type=float)
    p.add_argument("--max-voices", type=float)
    p.add_argument("--min-onsets-per-bar", type=float)
    p.add_argument("--max-onsets-per-bar", type=float)

    p = sub.add_parser("train-codec", parents=[common], help="train the function codec")
    p.add_argument("data", type=Path, help="manifest (or its folder) written by ingest")
    p.add_argument("out", type=Path)
    p.add_argument("--split", default="train")

    p = sub.add_parser("train-prior", parents=[common], help="train the code prior (needs --codec-checkpoint)")
    p.add_argument("data", type=Path)
    p.add_argument("out", type=Path)
    p.add_argument("--split", default="train")
    p.add_argument("--val-split", default=None)

    p = sub.add_parser("arrange", parents=[common], help="lead sheet to band score")
    p.add_argument("out", type=Path)
    p.add_argument("--lead", type=Path, help="lead-sheet JSON (default: the bundled AABB tune)")
    p.add_argument("--db", type=Path, required=True)
    p.add_argument("--sketch-out", type=Path, help="also write the piano sketch")

    p = sub.add_parser("orchestrate", parents=[common], help="piano MIDI to band score")
    p.add_argument("piano", type=Path)
    p.add_argument("out", type=Path)
    p.add_argument("--downmix", action="store_true", help="merge a multi-track input into one piano track")

    p = sub.add_parser("donor-search", parents=[common], help="find a texture donor for a piano piece")
    p.add_argument("piano", type=Path)
    p.add_argument("data", type=Path, help="manifest (or its folder) of multi-track segments")
    p.add_argument("out", type=Path, help="where to write the donor's first 2 bars")
    p.add_argument("--continuation-out", type=Path)
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--split", default=None)

    p = sub.add_parser("evaluate", parents=[common], help="objective metrics for generated MIDI")
    p.add_argument("results", type=Path, nargs="+")
    p.add_argument("--piano", type=Path, help="piano reference for the orchestration metrics")
    p.add_argument("--lead", type=Path, help="lead-sheet JSON for chord accuracy and phrases")
    p.add_argument("--phrases", help='phrase annotation such as "A8A8B8B8"')
    p.add_argument("--json", type=Path, help="write the reports and summary here")
    return parser


# ---------------------------------------------------------------------------
# helpers


def _load_config(args) -> dict:
    if args.config is None:
        return {}
    cfg = json.loads(args.config.read_text())
    if not isinstance(cfg, dict):
        raise CliError(f"{args.config} must hold a JSON object")
    return cfg


def _dataclass_from(cls, cfg: dict, seed: int | None):
    names = {f.name for f in fields(cls)}
    unknown = set(cfg) - names
    if unknown:
        raise CliError(f"unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
    values = dict(cfg)
    if seed is not None:
        values["seed"] = seed
    if "beta_range" in values:
        values["beta_range"] = tuple(values["beta_range"])
    return cls(**values)


def _sampling(args, cfg: dict) -> pl.SamplingConfig:
    sampling = cfg.get("sampling", {})
    beta = args.beta if args.beta is not None else sampling.get("beta", 0.5)
    p = args.nucleus_p if args.nucleus_p is not None else sampling.get("nucleus_p", 0.1)
    temp = args.temperature if args.temperature is not None else sampling.get("temperature", 4.0)
    if not 0.0 <= beta <= 1.0:
        raise CliError("--beta must lie in [0, 1]")
    if not 0.0 < p <= 1.0 or temp < 0:
        raise CliError("--nucleus-p must lie in (0, 1] and --temperature must be non-negative")
    return pl.SamplingConfig(beta, p, temp)


def _seed(args, cfg: dict) -> int:
    return args.seed if args.seed is not None else int(cfg.get("seed", 0))


def _instruments(args) -> list[int]:
    if not args.instruments:
        raise CliError("--instruments is required")
    try:
        return [int(x) for x in args.instruments.split(",") if x.strip()]
    except ValueError:
        raise CliError(f"bad --instruments value {args.instruments!r}") from None


def _models(args):
    if args.codec_checkpoint is None or args.prior_checkpoint is None:
        raise CliError("--codec-checkpoint and --prior-checkpoint are required")
    return codec_mod.load_codec(args.codec_checkpoint), prior_mod.load_prior(args.prior_checkpoint)


def _read_piece(path: Path) -> Piece:
    return load_piece(path) if path.suffix.lower() == ".json" else read_midi(path)


def _prompt(args) -> Piece | None:
    return None if args.prompt is None else _read_piece(args.prompt)


def _manifest_pieces(path: Path, split: str | None) -> list[Piece]:
    pieces = pl.manifest_pieces(pl.load_manifest(path), split)
    if not pieces:
        raise CliError(f"no segments in split {split!r} of {path}")
    return pieces


def _write(piece: Piece, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    write_midi(piece, path)


def _print(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args, cfg):
    codec = codec_mod.load_codec(args.codec_checkpoint) if args.codec_checkpoint else None
    manifest = pl.ingest(args.corpus, args.out, args.split, args.segment_bars, codec, _seed(args, cfg))
    _print(manifest["counts"])


def cmd_build_db(args, cfg):
    if not args.sources.is_dir():
        raise FileNotFoundError(f"{args.sources} is not a directory")
    entries = []
    for path in sorted(args.sources.glob("*.mid")):
        sidecar = path.with_suffix(".phrases")
        if not sidecar.exists():
            log.warning("skipping %s: no %s", path.name, sidecar.name)
            continue
        entries += entries_from_piece(path.stem, read_midi(path), parse_phrases(sidecar.read_text().strip()))
    db = PhraseDB(entries).filter(args.min_voices, args.max_voices, args.min_onsets_per_bar,
                                  args.max_onsets_per_bar)
    if not len(db):
        raise CliError("no phrases survived; check the sidecars and filters")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    db.save(args.out)
    _print({"entries": len(db)})


def cmd_train_codec(args, cfg):
    config = _dataclass_from(codec_mod.CodecConfig, cfg.get("codec", {}), args.seed)
    pieces = _manifest_pieces(args.data, args.split)
    model, history = codec_mod.train_codec(pieces, config)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    codec_mod.save_codec(model, args.out)
    _print({"epochs": len(history), "final_loss": history[-1]})


def _cached_or_none(manifest: dict, split: str | None):
    root = Path(manifest["root"])
    segs = pl.manifest_segments(manifest, split)
    return [pl.load_codes(root / s["codes"]) if "codes" in s else None for s in segs]


def cmd_train_prior(args, cfg):
    if args.codec_checkpoint is None:
        raise CliError("--codec-checkpoint is required")
    codec = codec_mod.load_codec(args.codec_checkpoint)
    config = _dataclass_from(prior_mod.PriorConfig, cfg.get("prior", {}), args.seed)
    manifest = pl.load_manifest(args.data)

    def segments(split):
        pieces = pl.manifest_pieces(manifest, split)
        return pl.prior_segments(codec, pieces, config.max_steps, _cached_or_none(manifest, split))

    train = segments(args.split)
    if not train:
        raise CliError(f"no usable segments in split {args.split!r}")
    val = segments(args.val_split) if args.val_split else None
    model, history = prior_mod.train_prior(train, config, val)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    prior_mod.save_prior(model, args.out)
    _print({"steps": len(history.step_loss), "final_loss": history.step_loss[-1],
            "val_nll": history.val_nll[-1] if history.val_nll else None})


def cmd_arrange(args, cfg):
    lead = load_leadsheet(args.lead) if args.lead else bundled_aabb()
    db = PhraseDB.load(args.db)
    codec, prior = _models(args)
    weights = PlannerWeights(**cfg.get("planner", {}))
    result = pl.arrange(lead, db, _instruments(args), codec, prior, _prompt(args), _sampling(args, cfg),
                        weights, _seed(args, cfg))
    _write(result.piece, args.out)
    if args.sketch_out:
        _write(result.sketch.piece, args.sketch_out)
    _print({"bars": result.piece.bar_count, "tracks": result.piece.n_tracks,
            "phrases": [f"{e.source_id}:{e.label}{e.length}" for e in result.sketch.selection],
            "plan_score": result.sketch.score})


def cmd_orchestrate(args, cfg):
    piano = to_common_time(_read_piece(args.piano))
    if args.downmix and piano.n_tracks != 1:
        piano = Piece((4, 4), piano.bar_count, (mixture_track(piano),))
    codec, prior = _models(args)
    out = pl.orchestrate(piano, _instruments(args), codec, prior, _prompt(args), _sampling(args, cfg),
                         _seed(args, cfg))
    _write(out, args.out)
    _print({"bars": out.bar_count, "tracks": out.n_tracks})


def cmd_donor_search(args, cfg):
    x = _read_piece(args.piano)
    pieces = _manifest_pieces(args.data, args.split)
    match = pl.donor_search(x, pieces, args.alpha, _seed(args, cfg))
    _write(match.segment, args.out)
    if args.continuation_out:
        _write(match.continuation, args.continuation_out)
    _print({"index": match.index, "score": match.score})


def cmd_evaluate(args, cfg):
    piano = _read_piece(args.piano) if args.piano else None
    lead = load_leadsheet(args.lead) if args.lead else None
    phrases = parse_phrases(args.phrases) if args.phrases else None
    reports = {}
    for path in args.results:
        reports[str(path)] = metrics.evaluate_piece(_read_piece(path), piano, lead, phrases)
    summary = metrics.summarize(reports.values())
    blob = {"reports": {k: r.as_dict() for k, r in reports.items()}, "summary": asdict(summary)}
    if args.json:
        args.json.parent.mkdir(parents=True, exist_ok=True)
        args.json.write_text(json.dumps(blob, indent=1, sort_keys=True))
    _print(blob)
    print(metrics.format_table(summary))


COMMANDS = {"ingest": cmd_ingest, "build-db": cmd_build_db, "train-codec": cmd_train_codec,
            "train-prior": cmd_train_prior, "arrange": cmd_arrange, "orchestrate": cmd_orchestrate,
            "donor-search": cmd_donor_search, "evaluate": cmd_evaluate}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        cfg = _load_config(args)
        COMMANDS[args.command](args, cfg)
    except (OSError, MidiParseError) as exc:
        print(f"fullband: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:
        print(f"fullband: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
