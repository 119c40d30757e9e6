"""Small VQ query-and-answer codec.

Three learned pieces share one parameter container:

* a mixture encoder that turns a downmixed 2-bar clip into a 256-D code,
* a function encoder with a pitch branch (FC bottleneck, then one 128-D code from
  a 64-entry book) and a time branch (stride-4 conv into eight 16-D frames, each
  quantized against a 128-entry book, then flattened and projected),
* a track decoder that answers "what does instrument i play here?" from the mixture
  code, the two function latents and an instrument embedding.

Every track is decoded independently, so permuting (grouping, instrument) pairs
permutes the decoded tracks the same way.
"""
from __future__ import annotations

import json
import logging
import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .features import TrackFunction, track_function
from .score import (CLIP_STEPS, N_INSTRUMENTS, N_PITCH, ClipGrid, Piece, ScoreError,
                    downmix, from_clips, to_clips)
from .vq import COMMITMENT_WEIGHT, Codebook, commitment_loss

log = logging.getLogger(__name__)

N_TIME_FRAMES = 8
GROUPING_SIZE = 1 + N_TIME_FRAMES
MAX_TRACKS = 16
CHECKPOINT_FORMAT = "fullband-codec"
CHECKPOINT_VERSION = 1
# Onset and sustain cells are sparse (a few percent), so the head starts near their base rate.
INITIAL_BIAS = -4.0


@dataclass
class CodecConfig:
    mix_dim: int = 256
    enc_hidden: int = 128
    dec_hidden: int = 256
    pitch_dim: int = 128
    pitch_codes: int = 64
    frame_dim: int = 16
    time_codes: int = 128
    time_latent: int = 128
    inst_dim: int = 16
    rank: int = 16
    transpose: int = 0          # random pitch shift of up to +-transpose semitones per training row
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0

    @classmethod
    def micro(cls, **overrides) -> CodecConfig:
        """A few-hundred-parameter configuration used for gradient checks."""
        base = dict(mix_dim=6, enc_hidden=4, dec_hidden=6, pitch_dim=5, pitch_codes=4,
                    frame_dim=3, time_codes=5, time_latent=4, inst_dim=3, rank=2)
        base.update(overrides)
        return cls(**base)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> CodecConfig:
        return cls(**json.loads(text))


@dataclass(frozen=True)
class CodeGrouping:
    """One track clip's function as 9 discrete indices."""

    pitch_code: int
    time_codes: tuple[int, ...]

    def __post_init__(self):
        if len(self.time_codes) != N_TIME_FRAMES:
            raise ValueError(f"expected {N_TIME_FRAMES} time codes, got {len(self.time_codes)}")
        object.__setattr__(self, "time_codes", tuple(int(c) for c in self.time_codes))
        object.__setattr__(self, "pitch_code", int(self.pitch_code))

    def as_array(self) -> np.ndarray:
        return np.array((self.pitch_code,) + self.time_codes, dtype=np.int64)

    @classmethod
    def from_array(cls, codes) -> CodeGrouping:
        codes = [int(c) for c in codes]
        if len(codes) != GROUPING_SIZE:
            raise ValueError(f"a grouping has {GROUPING_SIZE} codes, got {len(codes)}")
        return cls(codes[0], tuple(codes[1:]))


@dataclass
class EncodedPiece:
    """Codec view of a piece: per-clip mixture codes and per-track groupings."""

    mix: np.ndarray          # (T, mix_dim) float32
    codes: np.ndarray        # (N, T, 9) int64
    instruments: np.ndarray  # (N,) int64
    bar_count: int
    programs: tuple = field(default_factory=tuple)

    @property
    def n_tracks(self) -> int:
        return self.codes.shape[0]

    @property
    def n_clips(self) -> int:
        return self.mix.shape[0]


def clip_tensor(clip: ClipGrid, dtype=torch.float32) -> torch.Tensor:
    """(N, 2, 32, 128) tensor with onset in channel 0 and sustain in channel 1."""
    return torch.from_numpy(np.stack([clip.onset, clip.sustain], axis=1).astype(np.float32)).to(dtype)


def _function_tensors(fns: Sequence[TrackFunction], dtype) -> tuple[torch.Tensor, torch.Tensor]:
    pitch = torch.tensor(np.stack([f.pitch_fn for f in fns]), dtype=dtype)
    time = torch.tensor(np.stack([f.time_fn for f in fns]), dtype=dtype)
    return pitch, time


@dataclass
class CodecOutput:
    logits: torch.Tensor        # (B, 2, 32, 128)
    pitch_latent: torch.Tensor  # (B, pitch_dim), pre-VQ
    pitch_idx: torch.Tensor     # (B,)
    time_frames: torch.Tensor   # (B, 8, frame_dim), pre-VQ
    time_idx: torch.Tensor      # (B, 8)
    commitment: torch.Tensor


class Codec(nn.Module):
    def __init__(self, config: CodecConfig | None = None):
        super().__init__()
        cfg = self.config = config or CodecConfig()
        h = cfg.enc_hidden
        self.mix_conv = nn.Sequential(
            nn.Conv1d(2 * N_PITCH, h, kernel_size=3, padding=1), nn.ReLU(),
            nn.Conv1d(h, h, kernel_size=4, stride=4), nn.ReLU(),
        )
        self.mix_out = nn.Linear(h * (CLIP_STEPS // 4), cfg.mix_dim)
        # unit-scale codes, so the prior's noise blend mixes comparable magnitudes
        self.mix_norm = nn.LayerNorm(cfg.mix_dim, elementwise_affine=False)

        self.pitch_pre = nn.Sequential(nn.Linear(N_PITCH, h), nn.ReLU(), nn.Linear(h, cfg.pitch_dim))
        self.pitch_bottleneck = nn.Linear(cfg.pitch_dim, cfg.pitch_dim)
        self.pitch_book = Codebook(cfg.pitch_codes, cfg.pitch_dim)

        self.time_conv = nn.Conv1d(1, cfg.frame_dim, kernel_size=4, stride=4)
        self.time_book = Codebook(cfg.time_codes, cfg.frame_dim)
        self.time_fc = nn.Linear(N_TIME_FRAMES * cfg.frame_dim, cfg.time_latent)

        self.instrument = nn.Embedding(N_INSTRUMENTS, cfg.inst_dim)
        d_in = cfg.mix_dim + cfg.pitch_dim + cfg.time_latent + cfg.inst_dim
        self.decoder = nn.Sequential(
            nn.Linear(d_in, cfg.dec_hidden), nn.ReLU(),
            nn.Linear(cfg.dec_hidden, cfg.dec_hidden), nn.ReLU(),
        )
        # low-rank answer head: logits[c, s, p] = <time factor[c, s], pitch factor[c, p]> + bias[c]
        self.head_time = nn.Linear(cfg.dec_hidden, 2 * CLIP_STEPS * cfg.rank)
        self.head_pitch = nn.Linear(cfg.dec_hidden, 2 * N_PITCH * cfg.rank)
        self.head_bias = nn.Parameter(torch.full((2,), INITIAL_BIAS))

    @property
    def dtype(self) -> torch.dtype:
        return self.mix_out.weight.dtype

    # -- encoders ----------------------------------------------------------

    def mixture_codes(self, rolls: torch.Tensor) -> torch.Tensor:
        """(B, 2, 32, 128) downmixed rolls -> (B, mix_dim)."""
        b = rolls.shape[0]
        x = rolls.to(self.dtype).permute(0, 1, 3, 2).reshape(b, 2 * N_PITCH, CLIP_STEPS)
        return self.mix_norm(self.mix_out(self.mix_conv(x).flatten(1)))

    def encode_mixture(self, clip: ClipGrid) -> torch.Tensor:
        if clip.n_tracks != 1:
            raise ValueError(f"mixture encoder takes a single downmixed track, got {clip.n_tracks}")
        return self.mixture_codes(clip_tensor(clip))[0]

    def pitch_branch(self, pitch_fn: torch.Tensor):
        latent = self.pitch_bottleneck(self.pitch_pre(pitch_fn.to(self.dtype)))
        idx, code = self.pitch_book.quantize(latent)
        return latent, idx, code

    def time_branch(self, time_fn: torch.Tensor):
        frames = self.time_conv(time_fn.to(self.dtype)[:, None, :]).transpose(1, 2)  # (B, 8, frame_dim)
        idx, codes = self.time_book.quantize(frames)
        return frames, idx, codes

    def encode_functions(self, fns: Sequence[TrackFunction]) -> tuple[list[CodeGrouping], torch.Tensor, torch.Tensor]:
        """Groupings plus the continuous pre-VQ pitch latents and time frames."""
        pitch, time = _function_tensors(fns, self.dtype)
        p_lat, p_idx, _ = self.pitch_branch(pitch)
        frames, t_idx, _ = self.time_branch(time)
        groupings = [CodeGrouping(int(p), tuple(t.tolist())) for p, t in zip(p_idx, t_idx)]
        return groupings, p_lat, frames

    def encode_function(self, fn: TrackFunction) -> tuple[CodeGrouping, torch.Tensor, torch.Tensor]:
        groupings, p_lat, frames = self.encode_functions([fn])
        return groupings[0], p_lat[0], frames[0]

    # -- decoder -------------------------------------------------------------

    def track_logits(self, mix: torch.Tensor, pitch_code: torch.Tensor, time_codes: torch.Tensor,
                     instruments: torch.Tensor) -> torch.Tensor:
        """Row-wise decoding. ``time_codes`` are the quantized frames, shape (B, 8, frame_dim)."""
        time_latent = self.time_fc(time_codes.flatten(1))
        h = torch.cat([mix.to(self.dtype), pitch_code, time_latent, self.instrument(instruments)], dim=-1)
        h = self.decoder(h)
        r = self.config.rank
        t = self.head_time(h).reshape(-1, 2, CLIP_STEPS, r)
        p = self.head_pitch(h).reshape(-1, 2, N_PITCH, r)
        return torch.einsum("bcsr,bcpr->bcsp", t, p) / r ** 0.5 + self.head_bias[None, :, None, None]

    def logits_from_indices(self, mix: torch.Tensor, codes: torch.Tensor, instruments: torch.Tensor) -> torch.Tensor:
        """``codes`` is (B, 9): pitch index then 8 time indices."""
        codes = torch.as_tensor(codes, dtype=torch.int64)
        pitch = self.pitch_book.lookup(codes[:, 0]).to(self.dtype)
        time = self.time_book.lookup(codes[:, 1:]).to(self.dtype)
        return self.track_logits(mix, pitch, time, torch.as_tensor(instruments, dtype=torch.int64))

    @torch.no_grad()
    def decode(self, mix: torch.Tensor, groupings: Sequence[CodeGrouping], instruments: Sequence[int]) -> ClipGrid:
        n = len(groupings)
        if not 1 <= n <= MAX_TRACKS:
            raise ValueError(f"track count must lie in [1, {MAX_TRACKS}], got {n}")
        if len(instruments) != n:
            raise ValueError(f"{len(instruments)} instruments for {n} groupings")
        codes = torch.tensor(np.stack([g.as_array() for g in groupings]))
        mix = torch.as_tensor(mix).reshape(1, -1).expand(n, -1)
        logits = self.logits_from_indices(mix, codes, torch.tensor(list(instruments)))
        return grid_from_logits(logits)

    # -- training forward ------------------------------------------------------

    def forward(self, mix_rolls: torch.Tensor, pitch_fn: torch.Tensor, time_fn: torch.Tensor,
                instruments: torch.Tensor) -> CodecOutput:
        mix = self.mixture_codes(mix_rolls)
        p_lat, p_idx, p_code = self.pitch_branch(pitch_fn)
        frames, t_idx, t_codes = self.time_branch(time_fn)
        logits = self.track_logits(mix, p_code, t_codes, instruments)
        commit = commitment_loss(p_lat, p_code) + commitment_loss(frames, t_codes)
        return CodecOutput(logits, p_lat, p_idx, frames, t_idx, commit)


def grid_from_logits(logits: torch.Tensor) -> ClipGrid:
    """Threshold sigmoid at 0.5 (logit > 0). Sustain cells under an onset are dropped."""
    on = (logits[:, 0] > 0).cpu().numpy().astype(np.uint8)
    sus = (logits[:, 1] > 0).cpu().numpy().astype(np.uint8) & (1 - on)
    return ClipGrid(on, sus)


def reconstruction_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))


def codec_loss(out: CodecOutput, target: torch.Tensor) -> torch.Tensor:
    return reconstruction_loss(out.logits, target) + COMMITMENT_WEIGHT * out.commitment


# ---------------------------------------------------------------------------
# data


@dataclass
class TrackSamples:
    """Flattened (clip, track) training rows. ``clip_index`` points into ``mix``."""

    mix: torch.Tensor         # (C, 2, 32, 128) downmixed rolls
    target: torch.Tensor      # (S, 2, 32, 128)
    pitch_fn: torch.Tensor    # (S, 128)
    time_fn: torch.Tensor     # (S, 32)
    instruments: torch.Tensor  # (S,)
    clip_index: torch.Tensor  # (S,)

    def __len__(self) -> int:
        return len(self.target)

    @classmethod
    def from_pieces(cls, pieces: Sequence[Piece], dtype=torch.float32) -> TrackSamples:
        mixes, targets, fns, insts, owner = [], [], [], [], []
        for piece in pieces:
            if piece.n_tracks == 0:
                continue
            for clip in to_clips(piece):
                c = len(mixes)
                mixes.append(clip_tensor(downmix(clip), dtype)[0])
                rolls = clip_tensor(clip, dtype)
                for n, track in enumerate(piece.tracks):
                    targets.append(rolls[n])
                    fns.append(track_function(clip, n))
                    insts.append(track.instrument)
                    owner.append(c)
        if not targets:
            raise ValueError("corpus has no tracks to train on")
        pitch, time = _function_tensors(fns, dtype)
        return cls(torch.stack(mixes), torch.stack(targets), pitch, time,
                   torch.tensor(insts, dtype=torch.int64), torch.tensor(owner, dtype=torch.int64))

    def batch(self, rows: torch.Tensor):
        return (self.mix[self.clip_index[rows]], self.pitch_fn[rows], self.time_fn[rows],
                self.instruments[rows], self.target[rows])


def shift_pitch(x: torch.Tensor, shifts: torch.Tensor) -> torch.Tensor:
    """Move each row's last (pitch) axis up by ``shifts[i]`` semitones; vacated cells are zero."""
    n_pitch = x.shape[-1]
    src = torch.arange(n_pitch)[None, :] - shifts[:, None]  # (B, P)
    valid = (src >= 0) & (src < n_pitch)
    shape = (x.shape[0],) + (1,) * (x.dim() - 2) + (n_pitch,)
    index = src.clamp(0, n_pitch - 1).reshape(shape).expand_as(x)
    return torch.gather(x, -1, index) * valid.reshape(shape).to(x.dtype)


def train_codec(pieces: Sequence[Piece], config: CodecConfig | None = None,
                on_epoch: Callable[[int, float], None] | None = None) -> tuple[Codec, list[float]]:
    """Mixture-separation training. Returns the codec and its per-epoch mean loss."""
    config = config or CodecConfig()
    if not pieces:
        raise ValueError("empty corpus")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    codec = Codec(config)
    data = TrackSamples.from_pieces(pieces, codec.dtype)
    opt = torch.optim.Adam(codec.parameters(), lr=config.lr)
    history = []
    for epoch in range(config.epochs):
        codec.train()
        codec.pitch_book.reset_usage()
        codec.time_book.reset_usage()
        order = torch.randperm(len(data), generator=gen)
        pitch_pool, time_pool, total = [], [], 0.0
        for i in range(0, len(data), config.batch_size):
            rows = order[i:i + config.batch_size]
            mix, pitch, time, inst, target = data.batch(rows)
            if config.transpose:
                shifts = torch.randint(-config.transpose, config.transpose + 1, (len(rows),), generator=gen)
                mix, pitch, target = shift_pitch(mix, shifts), shift_pitch(pitch, shifts), shift_pitch(target, shifts)
            out = codec(mix, pitch, time, inst)
            loss = codec_loss(out, target)
            opt.zero_grad()
            loss.backward()
            opt.step()
            codec.pitch_book.ema_update(out.pitch_latent, out.pitch_idx)
            codec.time_book.ema_update(out.time_frames, out.time_idx)
            pitch_pool.append(out.pitch_latent.detach())
            time_pool.append(out.time_frames.detach())
            total += float(loss.detach()) * len(rows)
        codec.pitch_book.random_restart(torch.cat(pitch_pool), generator=gen)
        codec.time_book.random_restart(torch.cat(time_pool), generator=gen)
        history.append(total / len(data))
        log.info("codec epoch %d loss %.5f", epoch, history[-1])
        if on_epoch:
            on_epoch(epoch, history[-1])
    codec.eval()
    return codec, history


# ---------------------------------------------------------------------------
# piece-level helpers


@torch.no_grad()
def encode_piece(codec: Codec, piece: Piece) -> EncodedPiece:
    clips = to_clips(piece)
    mix = codec.mixture_codes(torch.cat([clip_tensor(downmix(c)) if c.n_tracks else
                                         torch.zeros(1, 2, CLIP_STEPS, N_PITCH) for c in clips]))
    codes = np.zeros((piece.n_tracks, len(clips), GROUPING_SIZE), dtype=np.int64)
    for t, clip in enumerate(clips):
        if piece.n_tracks:
            groupings, _, _ = codec.encode_functions([track_function(clip, n) for n in range(piece.n_tracks)])
            codes[:, t] = np.stack([g.as_array() for g in groupings])
    bars = -(-piece.bar_count // 2) if piece.meter == (2, 4) else piece.bar_count
    return EncodedPiece(mix.float().numpy(), codes, np.array([t.instrument for t in piece.tracks], dtype=np.int64),
                        bars, tuple(t.program for t in piece.tracks))


@torch.no_grad()
def encode_mixture_piece(codec: Codec, piece: Piece) -> np.ndarray:
    """Per-clip mixture codes of a piece (all tracks downmixed), shape (T, mix_dim)."""
    clips = to_clips(piece)
    if piece.n_tracks == 0:
        rolls = torch.zeros(len(clips), 2, CLIP_STEPS, N_PITCH)
    else:
        rolls = torch.cat([clip_tensor(downmix(c)) for c in clips])
    return codec.mixture_codes(rolls).float().numpy()


@torch.no_grad()
def decode_piece(codec: Codec, mix: np.ndarray, codes: np.ndarray, instruments: Sequence[int],
                 bar_count: int | None = None, programs: Sequence[int] | None = None) -> Piece:
    """Decode (N, T, 9) groupings over T clips of mixture codes into an N-track piece."""
    codes = np.asarray(codes)
    n, t_len = codes.shape[:2]
    if not 1 <= n <= MAX_TRACKS:
        raise ValueError(f"track count must lie in [1, {MAX_TRACKS}], got {n}")
    if len(mix) != t_len:
        raise ValueError(f"{len(mix)} mixture codes for {t_len} clips of groupings")
    mix_t = torch.as_tensor(np.asarray(mix), dtype=codec.dtype)
    clips = []
    for t in range(t_len):
        logits = codec.logits_from_indices(mix_t[t].expand(n, -1), torch.as_tensor(codes[:, t]),
                                           torch.as_tensor(np.asarray(instruments)))
        clips.append(grid_from_logits(logits))
    try:
        return from_clips(clips, list(instruments), bar_count, programs)
    except ScoreError as exc:
        raise ValueError(str(exc)) from exc


def onset_f1(pred: np.ndarray, truth: np.ndarray) -> float:
    """F1 of predicted onset cells against ground-truth onset cells."""
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    tp = int((pred & truth).sum())
    if tp == 0:
        return 1.0 if not pred.any() and not truth.any() else 0.0
    precision = tp / pred.sum()
    recall = tp / truth.sum()
    return float(2 * precision * recall / (precision + recall))


@torch.no_grad()
def codebook_usage(codec: Codec, pieces: Sequence[Piece]) -> tuple[float, float]:
    """Fraction of pitch and time codebook entries selected when encoding ``pieces``."""
    pitch, time = set(), set()
    for piece in pieces:
        enc = encode_piece(codec, piece)
        pitch.update(enc.codes[..., 0].ravel().tolist())
        time.update(enc.codes[..., 1:].ravel().tolist())
    return len(pitch) / codec.config.pitch_codes, len(time) / codec.config.time_codes


def save_codec(codec: Codec, path: str | Path) -> None:
    torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "config": asdict(codec.config), "state_dict": codec.state_dict()}, path)


def load_codec(path: str | Path) -> Codec:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except (RuntimeError, pickle.UnpicklingError, EOFError) as exc:
        raise ValueError(f"{path} is not a codec checkpoint ({exc})") from None
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a codec checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported codec checkpoint version {blob.get('version')}")
    codec = Codec(CodecConfig(**blob["config"]))
    codec.load_state_dict(blob["state_dict"])
    codec.eval()
    return codec
