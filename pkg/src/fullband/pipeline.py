"""End-to-end orchestration, full arrangement, donor search and corpus ingestion."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import codec as codec_mod
from . import prior as prior_mod
from .codec import Codec, EncodedPiece, decode_piece, encode_mixture_piece, encode_piece
from .features import cosine, track_function
from .planner import PhraseDB, PianoSketch, PlannerWeights, arrange_piano
from .prior import Prior, PriorSegment, clip_timing, segments_from_encoded
from .score import (CLIP_BARS, CLIP_STEPS, N_PITCH, STEPS_PER_BAR, LeadSheet, Piece, ScoreError, Track, downmix,
                    load_piece, piece_to_dict, read_midi, slice_piece, to_clips, to_common_time)

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "fullband-manifest"
SEGMENT_BARS = 32


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class SamplingConfig:
    beta: float = 0.5
    nucleus_p: float = 0.1
    temperature: float = 4.0


def _check_instruments(instruments: Sequence[int]) -> list[int]:
    instruments = [int(i) for i in instruments]
    if not 1 <= len(instruments) <= codec_mod.MAX_TRACKS:
        raise PipelineError(f"between 1 and {codec_mod.MAX_TRACKS} instruments required, got {len(instruments)}")
    return instruments


def prompt_groupings(codec: Codec, prompt: Piece, n_tracks: int) -> np.ndarray:
    """Encode the first 2-bar clip of a multi-track prompt to (N, 1, 9) groupings."""
    if prompt.n_tracks != n_tracks:
        raise PipelineError(f"prompt has {prompt.n_tracks} tracks but {n_tracks} instruments were requested")
    clip = to_clips(prompt)[0]
    groupings, _, _ = codec.encode_functions([track_function(clip, n) for n in range(n_tracks)])
    return np.stack([g.as_array() for g in groupings])[:, None, :]


def sample_codes(prior: Prior, mix: np.ndarray, instruments: Sequence[int], song_bars: int,
                 prompt: np.ndarray | None = None, sampling: SamplingConfig = SamplingConfig(),
                 seed: int = 0) -> np.ndarray:
    """Sample (N, T, 9) groupings for T clips of context, in windows of the prior's length.

    Consecutive windows overlap by one clip; the overlapping clip's codes are the
    prompt of the next window. One noise draw covers the whole piece.
    """
    t_len = len(mix)
    window = prior.config.max_steps
    noise = prior_mod.context_noise((t_len, mix.shape[1]), seed).numpy()
    codes = np.zeros((len(instruments), t_len, codec_mod.GROUPING_SIZE), dtype=np.int64)
    start, head = 0, prompt
    while True:
        stop = min(start + window, t_len)
        if head is not None and head.shape[1] >= stop - start:
            # the whole window is already fixed by the prompt
            codes[:, start:stop] = head[:, :stop - start]
        else:
            codes[:, start:stop] = prior_mod.sample(
                prior, mix[start:stop], instruments, clip_timing(song_bars, start, stop - start),
                beta=sampling.beta, prompt=head, nucleus_p=sampling.nucleus_p,
                temperature=sampling.temperature, seed=seed + start, noise=noise[start:stop])
        if stop == t_len:
            return codes
        start = stop - 1
        head = codes[:, start:start + 1]


def orchestrate(piano: Piece, instruments: Sequence[int], codec: Codec, prior: Prior,
                prompt: Piece | None = None, sampling: SamplingConfig = SamplingConfig(),
                seed: int = 0) -> Piece:
    """Re-voice a single-track piano piece for the given instrument classes."""
    if piano.n_tracks != 1:
        raise PipelineError(f"piano input must have exactly one track, got {piano.n_tracks}; downmix it first")
    if piano.meter != (4, 4):
        raise PipelineError("piano input must be in 4/4")
    instruments = _check_instruments(instruments)
    mix = encode_mixture_piece(codec, piano)
    head = None if prompt is None else prompt_groupings(codec, prompt, len(instruments))
    codes = sample_codes(prior, mix, instruments, piano.bar_count, head, sampling, seed)
    return decode_piece(codec, mix, codes, instruments, piano.bar_count)


@dataclass
class Arrangement:
    piece: Piece
    sketch: PianoSketch


def arrange(lead: LeadSheet, db: PhraseDB, instruments: Sequence[int], codec: Codec, prior: Prior,
            prompt: Piece | None = None, sampling: SamplingConfig = SamplingConfig(),
            weights: PlannerWeights = PlannerWeights(), seed: int = 0) -> Arrangement:
    """Plan a piano sketch, orchestrate its accompaniment and put the melody back on top."""
    sketch = arrange_piano(lead, db, weights)
    piano = Piece((4, 4), lead.bar_count, (sketch.accompaniment,))
    band = orchestrate(piano, instruments, codec, prior, prompt, sampling, seed)
    piece = Piece((4, 4), lead.bar_count, (lead.melody,) + band.tracks, lead.phrases)
    return Arrangement(piece, sketch)


# ---------------------------------------------------------------------------
# donor search


def first_clip_vector(piece: Piece) -> np.ndarray:
    """Concatenated pitch/time function of the downmixed first 2-bar clip."""
    clip = to_clips(piece)[0]
    if clip.n_tracks == 0:
        return np.zeros(N_PITCH + CLIP_STEPS)
    return track_function(downmix(clip), 0).vector()


@dataclass
class DonorMatch:
    index: int
    score: float
    segment: Piece        # the donor's first 2 bars
    continuation: Piece   # the donor bars that follow, cycled to the query length


def donor_scores(x: Piece, db: Sequence[Piece], alpha: float = 0.2, seed: int = 0) -> np.ndarray:
    if not db:
        raise PipelineError("donor database is empty")
    query = first_clip_vector(x)
    noise = np.random.default_rng(seed).standard_normal(len(db))
    return np.array([cosine(first_clip_vector(y), query) for y in db]) + alpha * noise


def _cycled_bars(piece: Piece, first_bar: int, bars: int) -> Piece:
    piece = to_common_time(piece)
    tracks = [Track(t.instrument, (), t.program) for t in piece.tracks]
    done = 0
    while done < bars:
        src = (first_bar + done) % piece.bar_count
        take = min(bars - done, piece.bar_count - src)
        part = slice_piece(piece, src, take)
        shift = done * STEPS_PER_BAR
        tracks = [acc.with_notes(acc.notes + p.shifted(shift).notes) for acc, p in zip(tracks, part.tracks)]
        done += take
    return Piece((4, 4), bars, tuple(tracks))


def donor_search(x: Piece, db: Sequence[Piece], alpha: float = 0.2, seed: int = 0) -> DonorMatch:
    """Pick the donor whose opening clip texture best matches the query, with noise of weight alpha."""
    scores = donor_scores(x, db, alpha, seed)
    best = int(np.argmax(scores))
    donor = to_common_time(db[best])
    head = min(CLIP_BARS, donor.bar_count)
    rest = max(to_common_time(x).bar_count - CLIP_BARS, 1)
    tail_start = head % donor.bar_count
    return DonorMatch(best, float(scores[best]), slice_piece(donor, 0, head),
                      _cycled_bars(donor, tail_start, rest))


# ---------------------------------------------------------------------------
# ingestion


def parse_split(spec: str) -> list[float]:
    """'95/5' or '8:1:1' to normalized fractions."""
    try:
        parts = [float(p) for p in spec.replace(":", "/").split("/")]
    except ValueError:
        raise PipelineError(f"bad split spec {spec!r}") from None
    if len(parts) not in (2, 3) or any(p < 0 for p in parts) or sum(parts) <= 0:
        raise PipelineError(f"bad split spec {spec!r}")
    total = sum(parts)
    return [p / total for p in parts]


SPLIT_NAMES = {2: ("train", "test"), 3: ("train", "val", "test")}


def assign_splits(names: Sequence[str], spec: str, seed: int = 0) -> dict[str, str]:
    """Seeded song-level split; counts come from rounding the cumulative fractions."""
    fractions = parse_split(spec)
    order = sorted(names)
    perm = np.random.default_rng(seed).permutation(len(order))
    bounds = np.rint(np.cumsum(fractions) * len(order)).astype(int)
    labels = SPLIT_NAMES[len(fractions)]
    out = {}
    for rank, idx in enumerate(perm):
        out[order[idx]] = labels[int(np.searchsorted(bounds, rank, side="right"))]
    return out


def segment_bounds(bar_count: int, segment_bars: int = SEGMENT_BARS) -> list[tuple[int, int]]:
    return [(b, min(segment_bars, bar_count - b)) for b in range(0, bar_count, segment_bars)]


def save_codes(enc: EncodedPiece, path: Path) -> None:
    np.savez(path, mix=enc.mix, codes=enc.codes, instruments=enc.instruments,
             bar_count=np.array(enc.bar_count), programs=np.array(enc.programs, dtype=np.int64))


def load_codes(path: str | Path) -> EncodedPiece:
    with np.load(path) as z:
        return EncodedPiece(z["mix"], z["codes"], z["instruments"], int(z["bar_count"]),
                            tuple(int(p) for p in z["programs"]))


def ingest(corpus_dir: str | Path, out_dir: str | Path, split: str = "95/5", segment_bars: int = SEGMENT_BARS,
           codec: Codec | None = None, seed: int = 0) -> dict:
    """Read every MIDI file under ``corpus_dir`` into segments and a manifest in ``out_dir``."""
    if segment_bars < CLIP_BARS or segment_bars % CLIP_BARS:
        raise PipelineError(f"segment_bars must be a positive multiple of {CLIP_BARS}")
    corpus_dir, out_dir = Path(corpus_dir), Path(out_dir)
    if not corpus_dir.is_dir():
        raise FileNotFoundError(f"{corpus_dir} is not a directory")
    seg_dir = out_dir / "segments"
    seg_dir.mkdir(parents=True, exist_ok=True)
    files = sorted(p for p in corpus_dir.rglob("*") if p.suffix.lower() in (".mid", ".midi"))
    records, songs = [], {}
    for path in files:
        rel = path.relative_to(corpus_dir).as_posix()
        try:
            piece = to_common_time(read_midi(path))
            if piece.n_tracks == 0:
                raise ScoreError("no notes")
        except (ScoreError, ValueError, OSError) as exc:
            log.warning("skipping %s: %s", rel, exc)
            records.append({"file": rel, "status": "skipped", "reason": str(exc)})
            continue
        songs[rel] = piece
        records.append({"file": rel, "status": "ok", "bars": piece.bar_count, "tracks": piece.n_tracks})
    splits = assign_splits(list(songs), split, seed)
    for record in records:
        if record["status"] != "ok":
            continue
        rel = record["file"]
        piece = songs[rel]
        record["split"] = splits[rel]
        stem = rel.rsplit(".", 1)[0].replace("/", "__")
        segments = []
        for k, (first, bars) in enumerate(segment_bounds(piece.bar_count, segment_bars)):
            seg = slice_piece(piece, first, bars)
            name = f"{stem}_{k:03d}"
            (seg_dir / f"{name}.json").write_text(json.dumps(piece_to_dict(seg)))
            entry = {"piece": f"segments/{name}.json", "first_bar": first, "bars": bars}
            if codec is not None:
                save_codes(encode_piece(codec, seg), seg_dir / f"{name}.npz")
                entry["codes"] = f"segments/{name}.npz"
            segments.append(entry)
        record["segments"] = segments
    manifest = {"format": MANIFEST_FORMAT, "version": 1, "split": split, "seed": seed,
                "segment_bars": segment_bars, "files": records,
                "counts": {"ok": len(songs), "skipped": len(records) - len(songs)}}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_manifest(path: str | Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise PipelineError(f"{path} is not a dataset manifest")
    manifest["root"] = str(path.parent)
    return manifest


def manifest_segments(manifest: dict, split: str | None = None) -> list[dict]:
    return [seg for rec in manifest["files"] if rec["status"] == "ok" and split in (None, rec["split"])
            for seg in rec["segments"]]


def manifest_pieces(manifest: dict, split: str | None = None) -> list[Piece]:
    root = Path(manifest["root"])
    return [load_piece(root / seg["piece"]) for seg in manifest_segments(manifest, split)]


def prior_segments(codec: Codec, pieces: Sequence[Piece], max_steps: int,
                   cached: Sequence[EncodedPiece | None] | None = None) -> list[PriorSegment]:
    """Prior training windows, reusing cached encodings where available."""
    out = []
    for i, piece in enumerate(pieces):
        enc = cached[i] if cached is not None and cached[i] is not None else encode_piece(codec, piece)
        if enc.n_tracks == 0 or enc.n_tracks > codec_mod.MAX_TRACKS:
            continue
        out.extend(segments_from_encoded(enc, max_steps))
    return out
