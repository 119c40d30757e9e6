"""Autoregressive prior over per-track code groupings.

The decoder state is a (tracks x steps) grid. Attention alternates between two
axes and never forms a joint (N*T) x (N*T) matrix:

* track layers: each step's N track states attend to each other, with Shaw-style
  relative-position logits so two tracks with the same instrument stay distinct;
* time layers: each track attends causally over its own past steps, then
  cross-attends to the context memory built from the mixture codes.

Nine categorical heads (one 64-way pitch code, eight 128-way time codes) read
each cell; the nine codes of a step are conditionally independent given the
history and the memory.
"""
from __future__ import annotations

import contextlib
import json
import logging
import math
import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .codec import GROUPING_SIZE, N_TIME_FRAMES, EncodedPiece
from .score import CLIP_BARS, N_INSTRUMENTS

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "fullband-prior"
CHECKPOINT_VERSION = 1
LENGTH_SCALE = 64.0  # song length in bars is divided by this before projection
CUTOFF_TOL = 1e-12


@dataclass
class PriorConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    context_layers: int = 2
    decoder_layers: int = 2
    dropout: float = 0.1
    mix_dim: int = 256
    pitch_codes: int = 64
    time_codes: int = 128
    max_tracks: int = 8
    max_steps: int = 8
    relative_positions: bool = True
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    lr_final: float = 1e-5
    beta_range: tuple = (0.0, 1.0)
    val_beta: float = 0.5
    stop_below: float | None = None  # end training once a step loss falls under this
    seed: int = 0

    def __post_init__(self):
        self.beta_range = tuple(self.beta_range)
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @classmethod
    def paper_scale(cls, **overrides) -> PriorConfig:
        base = dict(d_model=256, n_heads=8, d_ff=1024, context_layers=2, decoder_layers=4,
                    max_tracks=16, max_steps=16)
        base.update(overrides)
        return cls(**base)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> PriorConfig:
        return cls(**json.loads(text))


def uniform_nll(pitch_codes: int = 64, time_codes: int = 128) -> float:
    """Per-code NLL of uniform heads: (ln 64 + 8 ln 128) / 9 for the shipped books."""
    return (math.log(pitch_codes) + N_TIME_FRAMES * math.log(time_codes)) / GROUPING_SIZE


# ---------------------------------------------------------------------------
# attention-shape audit

_audit_log: list | None = None


@contextlib.contextmanager
def audit_attention() -> Iterator[list[tuple[str, tuple[int, ...]]]]:
    """Record (kind, logits shape) for every attention matrix formed inside the block."""
    global _audit_log
    previous, _audit_log = _audit_log, []
    try:
        yield _audit_log
    finally:
        _audit_log = previous


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float, kind: str, max_relative: int = 0):
        super().__init__()
        self.kind = kind
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)
        self.max_relative = max_relative
        self.relative = nn.Embedding(2 * max_relative - 1, self.d_head) if max_relative else None

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, x: torch.Tensor, source: torch.Tensor | None = None, causal: bool = False,
                key_padding: torch.Tensor | None = None) -> torch.Tensor:
        source = x if source is None else source
        q, k, v = self._split(self.q(x)), self._split(self.k(source)), self._split(self.v(source))
        scale = 1.0 / math.sqrt(self.d_head)
        logits = q @ k.transpose(-1, -2) * scale  # (B, H, L, S)
        lq, lk = logits.shape[-2:]
        if self.relative is not None:
            offsets = torch.arange(lk)[None, :] - torch.arange(lq)[:, None]
            offsets = offsets.clamp(-self.max_relative + 1, self.max_relative - 1) + self.max_relative - 1
            rel = self.relative(offsets)  # (L, S, d_head)
            logits = logits + torch.einsum("bhld,lsd->bhls", q, rel) * scale
        if _audit_log is not None:
            _audit_log.append((self.kind, tuple(logits.shape)))
        if causal:
            future = torch.ones(lq, lk, dtype=torch.bool).triu(1)
            logits = logits.masked_fill(future, float("-inf"))
        if key_padding is not None:
            logits = logits.masked_fill(key_padding[:, None, None, :], float("-inf"))
        weights = self.drop(torch.softmax(logits, dim=-1))
        out = (weights @ v).transpose(1, 2).reshape(x.shape[0], lq, -1)
        return self.out(out)


class FeedForward(nn.Sequential):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__(nn.Linear(d_model, d_ff), nn.GELU(), nn.Dropout(dropout),
                         nn.Linear(d_ff, d_model), nn.Dropout(dropout))


class EncoderLayer(nn.Module):
    """Pre-LN self-attention block over a (B, L, d) sequence."""

    def __init__(self, cfg: PriorConfig, kind: str, max_relative: int = 0):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg.d_model, cfg.n_heads, cfg.dropout, kind, max_relative)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, key_padding=None):
        x = x + self.drop(self.attn(self.norm1(x), key_padding=key_padding))
        return x + self.ff(self.norm2(x))


class TrackLayer(EncoderLayer):
    def __init__(self, cfg: PriorConfig):
        super().__init__(cfg, "track", cfg.max_tracks if cfg.relative_positions else 0)

    def forward(self, x, track_padding=None):
        b, n, t, d = x.shape
        y = x.transpose(1, 2).reshape(b * t, n, d)
        pad = None
        if track_padding is not None:
            pad = track_padding[:, None, :].expand(b, t, n).reshape(b * t, n)
        y = super().forward(y, pad)
        return y.reshape(b, t, n, d).transpose(1, 2)


class TimeLayer(nn.Module):
    """Causal self-attention along steps, cross-attention to memory, feed-forward."""

    def __init__(self, cfg: PriorConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = Attention(cfg.d_model, cfg.n_heads, cfg.dropout, "time")
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = Attention(cfg.d_model, cfg.n_heads, cfg.dropout, "cross")
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, memory, memory_padding=None):
        b, n, t, d = x.shape
        y = x.reshape(b * n, t, d)
        mem = memory[:, None].expand(b, n, *memory.shape[1:]).reshape(b * n, *memory.shape[1:])
        pad = None
        if memory_padding is not None:
            pad = memory_padding[:, None, :].expand(b, n, -1).reshape(b * n, -1)
        y = y + self.drop(self.self_attn(self.norm1(y), causal=True))
        y = y + self.drop(self.cross_attn(self.norm2(y), mem, key_padding=pad))
        y = y + self.ff(self.norm3(y))
        return y.reshape(b, n, t, d)


def sinusoid(length: int, d_model: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float64) * (-math.log(10000.0) / d_model))
    pe = torch.zeros(length, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : d_model // 2]
    return pe


@dataclass
class PriorBatch:
    mix: torch.Tensor          # (B, T, mix_dim)
    codes: torch.Tensor        # (B, N, T, 9) int64
    instruments: torch.Tensor  # (B, N) int64
    timing: torch.Tensor       # (B, T, 3): song length in bars, start fraction, end fraction
    track_mask: torch.Tensor   # (B, N) bool, True for real tracks
    step_mask: torch.Tensor    # (B, T) bool, True for real steps


@dataclass
class PriorSegment:
    mix: np.ndarray            # (T, mix_dim)
    codes: np.ndarray          # (N, T, 9)
    instruments: np.ndarray    # (N,)
    timing: np.ndarray         # (T, 3)


def clip_timing(song_bars: int, first_clip: int, n_clips: int) -> np.ndarray:
    """Timing rows for clips ``first_clip .. first_clip+n_clips-1`` of a ``song_bars``-bar song."""
    rows = []
    for t in range(first_clip, first_clip + n_clips):
        start = t * CLIP_BARS / song_bars
        end = min((t + 1) * CLIP_BARS, song_bars) / song_bars
        rows.append((float(song_bars), start, end))
    return np.array(rows, dtype=np.float64)


def segments_from_encoded(enc: EncodedPiece, max_steps: int) -> list[PriorSegment]:
    """Cut an encoded piece into windows of at most ``max_steps`` clips."""
    out = []
    for t0 in range(0, enc.n_clips, max_steps):
        t1 = min(t0 + max_steps, enc.n_clips)
        out.append(PriorSegment(enc.mix[t0:t1], enc.codes[:, t0:t1], enc.instruments,
                                clip_timing(enc.bar_count, t0, t1 - t0)))
    return out


def collate(segments: Sequence[PriorSegment], dtype=torch.float32) -> PriorBatch:
    b = len(segments)
    n = max(s.codes.shape[0] for s in segments)
    t = max(s.codes.shape[1] for s in segments)
    m = segments[0].mix.shape[1]
    mix = torch.zeros(b, t, m, dtype=dtype)
    codes = torch.zeros(b, n, t, GROUPING_SIZE, dtype=torch.int64)
    inst = torch.zeros(b, n, dtype=torch.int64)
    timing = torch.zeros(b, t, 3, dtype=dtype)
    track_mask = torch.zeros(b, n, dtype=torch.bool)
    step_mask = torch.zeros(b, t, dtype=torch.bool)
    for i, s in enumerate(segments):
        sn, st = s.codes.shape[:2]
        mix[i, :st] = torch.as_tensor(s.mix, dtype=dtype)
        codes[i, :sn, :st] = torch.as_tensor(s.codes)
        inst[i, :sn] = torch.as_tensor(s.instruments)
        timing[i, :st] = torch.as_tensor(s.timing, dtype=dtype)
        track_mask[i, :sn] = True
        step_mask[i, :st] = True
    return PriorBatch(mix, codes, inst, timing, track_mask, step_mask)


class Prior(nn.Module):
    def __init__(self, config: PriorConfig | None = None):
        super().__init__()
        cfg = self.config = config or PriorConfig()
        d = cfg.d_model
        self.pitch_embed = nn.Embedding(cfg.pitch_codes, d)
        self.time_embed = nn.Embedding(cfg.time_codes, d)
        self.slot_embed = nn.Parameter(torch.randn(GROUPING_SIZE, d) * 0.02)
        self.start = nn.Parameter(torch.randn(d) * 0.02)
        self.instrument = nn.Embedding(N_INSTRUMENTS, d)
        self.timing = nn.Linear(3, d)
        self.context_in = nn.Linear(cfg.mix_dim, d)
        self.context_timing = nn.Linear(3, d)
        self.context_layers = nn.ModuleList(EncoderLayer(cfg, "context") for _ in range(cfg.context_layers))
        self.context_norm = nn.LayerNorm(d)
        self.track_layers = nn.ModuleList(TrackLayer(cfg) for _ in range(cfg.decoder_layers))
        self.time_layers = nn.ModuleList(TimeLayer(cfg) for _ in range(cfg.decoder_layers))
        self.out_norm = nn.LayerNorm(d)
        self.pitch_head = nn.Linear(d, cfg.pitch_codes)
        self.time_heads = nn.ModuleList(nn.Linear(d, cfg.time_codes) for _ in range(N_TIME_FRAMES))
        self.register_buffer("pe", sinusoid(cfg.max_steps, d).float(), persistent=False)

    @property
    def dtype(self) -> torch.dtype:
        return self.start.dtype

    def zero_heads(self) -> None:
        """Make every head output constant zero logits (a uniform model)."""
        with torch.no_grad():
            for head in [self.pitch_head, *self.time_heads]:
                head.weight.zero_()
                head.bias.zero_()

    def _scaled_timing(self, timing: torch.Tensor) -> torch.Tensor:
        scale = torch.tensor([1.0 / LENGTH_SCALE, 1.0, 1.0], dtype=self.dtype)
        return timing.to(self.dtype) * scale

    def _check(self, n: int, t: int) -> None:
        if not 1 <= t <= self.config.max_steps:
            raise ValueError(f"step count {t} outside [1, {self.config.max_steps}]")
        if not 1 <= n <= self.config.max_tracks:
            raise ValueError(f"track count {n} outside [1, {self.config.max_tracks}]")

    def encode_context(self, mix: torch.Tensor, timing: torch.Tensor, beta, noise: torch.Tensor | None = None,
                       step_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Blend (1-beta) z + beta eps, project, add timing and position, run the encoder."""
        b, t, _ = mix.shape
        if t > self.config.max_steps:
            raise ValueError(f"context length {t} exceeds the configured maximum {self.config.max_steps}")
        beta = torch.as_tensor(beta, dtype=self.dtype).reshape(-1, 1, 1)
        if ((beta < 0) | (beta > 1)).any():
            raise ValueError("beta must lie in [0, 1]")
        z = mix.to(self.dtype)
        if noise is not None:
            z = (1 - beta) * z + beta * noise.to(self.dtype)
        elif (beta != 0).any():
            raise ValueError("noise is required when beta > 0")
        h = self.context_in(z) + self.context_timing(self._scaled_timing(timing)) + self.pe[:t].to(self.dtype)
        pad = None if step_mask is None else ~step_mask
        for layer in self.context_layers:
            h = layer(h, pad)
        return self.context_norm(h)

    def embed_groupings(self, codes: torch.Tensor) -> torch.Tensor:
        """Sum of the 9 code embeddings, each offset by its slot embedding."""
        e = self.pitch_embed(codes[..., 0]) + self.slot_embed[0]
        for k in range(N_TIME_FRAMES):
            e = e + self.time_embed(codes[..., 1 + k]) + self.slot_embed[1 + k]
        return e

    def decode(self, memory: torch.Tensor, codes: torch.Tensor, instruments: torch.Tensor, timing: torch.Tensor,
               track_mask: torch.Tensor | None = None, memory_mask: torch.Tensor | None = None):
        """Logits for every (track, step) given teacher-forced ``codes`` (B, N, T, 9).

        Step t sees the start embedding (t = 0) or the grouping at t-1, so the
        prediction at t depends on groupings before t only.
        """
        b, n, t, _ = codes.shape
        self._check(n, t)
        prev = self.embed_groupings(codes[:, :, :-1])
        start = self.start.expand(b, n, 1, -1)
        x = torch.cat([start, prev], dim=2)
        x = x + self.instrument(instruments)[:, :, None, :]
        x = x + (self.timing(self._scaled_timing(timing)) + self.pe[:t].to(self.dtype))[:, None]
        track_pad = None if track_mask is None else ~track_mask
        mem_pad = None if memory_mask is None else ~memory_mask
        for track_layer, time_layer in zip(self.track_layers, self.time_layers):
            x = track_layer(x, track_pad)
            x = time_layer(x, memory, mem_pad)
        x = self.out_norm(x)
        pitch = self.pitch_head(x)
        time = torch.stack([head(x) for head in self.time_heads], dim=3)
        return pitch, time  # (B, N, T, 64), (B, N, T, 8, 128)

    def forward(self, batch: PriorBatch, beta, noise: torch.Tensor | None = None):
        memory = self.encode_context(batch.mix, batch.timing, beta, noise, batch.step_mask)
        return self.decode(memory, batch.codes, batch.instruments, batch.timing, batch.track_mask, batch.step_mask)

    def loss(self, batch: PriorBatch, beta, noise: torch.Tensor | None = None) -> torch.Tensor:
        pitch, time = self(batch, beta, noise)
        return grouping_nll(pitch, time, batch.codes, batch.track_mask, batch.step_mask)


def grouping_nll(pitch_logits: torch.Tensor, time_logits: torch.Tensor, targets: torch.Tensor,
                 track_mask: torch.Tensor | None = None, step_mask: torch.Tensor | None = None) -> torch.Tensor:
    """-(1/9N) sum_n sum_k log p per step, then the mean over real steps and batch items."""
    b, n, t, _ = targets.shape
    lp = -torch.log_softmax(pitch_logits, -1).gather(-1, targets[..., :1]).squeeze(-1)
    lt = -torch.log_softmax(time_logits, -1).gather(-1, targets[..., 1:, None]).squeeze(-1).sum(-1)
    per_cell = (lp + lt) / GROUPING_SIZE  # (B, N, T)
    tm = torch.ones(b, n, dtype=torch.bool) if track_mask is None else track_mask
    sm = torch.ones(b, t, dtype=torch.bool) if step_mask is None else step_mask
    tmf = tm.to(per_cell.dtype)[:, :, None]
    per_step = (per_cell * tmf).sum(1) / tmf.sum(1)  # (B, T)
    smf = sm.to(per_cell.dtype)
    per_item = (per_step * smf).sum(1) / smf.sum(1)
    return per_item.mean()


# ---------------------------------------------------------------------------
# sampling


def nucleus_probs(logits: torch.Tensor, p: float, temperature: float) -> torch.Tensor:
    """Temperature-scaled distribution restricted to its top-p nucleus and renormalised.

    The nucleus is the smallest prefix of the probability-sorted vocabulary (ties
    broken by index) whose mass reaches ``p``. Temperature 0 means argmax.
    """
    if not 0 < p <= 1:
        raise ValueError("nucleus p must lie in (0, 1]")
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    logits = logits.to(torch.float64)
    if temperature == 0:
        return F.one_hot(logits.argmax(-1), logits.shape[-1]).to(torch.float64)
    probs = torch.softmax(logits / temperature, dim=-1)
    ordered, order = torch.sort(probs, dim=-1, descending=True, stable=True)
    before = ordered.cumsum(-1) - ordered
    keep = before < p - CUTOFF_TOL
    kept = torch.zeros_like(probs).scatter(-1, order, ordered * keep)
    return kept / kept.sum(-1, keepdim=True)


def _draw(probs: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    flat = probs.reshape(-1, probs.shape[-1])
    return torch.multinomial(flat, 1, generator=generator).reshape(probs.shape[:-1])


def context_noise(shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    """The per-piece noise draw used at inference (one generator per seed)."""
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=gen, dtype=torch.float64).to(dtype)


@torch.no_grad()
def sample(prior: Prior, mix: np.ndarray, instruments: Sequence[int], timing: np.ndarray, beta: float = 0.5,
           prompt: np.ndarray | None = None, nucleus_p: float = 0.1, temperature: float = 4.0,
           seed: int = 0, noise: np.ndarray | None = None) -> np.ndarray:
    """Sample groupings (N, T, 9). Prompt steps (N, P, 9) are copied verbatim.

    The context noise is drawn once from ``seed`` unless ``noise`` (T, mix_dim) is given,
    which lets a long piece sampled in windows share one draw.
    """
    prior.eval()
    mix_t = torch.as_tensor(np.asarray(mix), dtype=prior.dtype)[None]
    t_len = mix_t.shape[1]
    n = len(instruments)
    prior._check(n, t_len)
    codes = torch.zeros(1, n, t_len, GROUPING_SIZE, dtype=torch.int64)
    first = 0
    if prompt is not None:
        prompt = np.asarray(prompt)
        if prompt.ndim != 3 or prompt.shape[0] != n or prompt.shape[2] != GROUPING_SIZE:
            raise ValueError(f"prompt must have shape ({n}, P, {GROUPING_SIZE}), got {prompt.shape}")
        if prompt.shape[1] >= t_len:
            raise ValueError("prompt must be shorter than the piece")
        first = prompt.shape[1]
        codes[0, :, :first] = torch.as_tensor(prompt)
    timing_t = torch.as_tensor(np.asarray(timing), dtype=prior.dtype)[None]
    inst = torch.as_tensor(list(instruments), dtype=torch.int64)[None]
    gen = torch.Generator().manual_seed(seed)
    if noise is None:
        eps = torch.randn(mix_t.shape, generator=gen, dtype=torch.float64).to(prior.dtype)
    else:
        eps = torch.as_tensor(np.asarray(noise), dtype=prior.dtype).reshape(mix_t.shape)
    memory = prior.encode_context(mix_t, timing_t, beta, eps)
    for t in range(first, t_len):
        pitch, time = prior.decode(memory, codes[:, :, :t + 1], inst, timing_t[:, :t + 1])
        pitch_probs = nucleus_probs(pitch[0, :, t], nucleus_p, temperature)
        time_probs = nucleus_probs(time[0, :, t], nucleus_p, temperature)
        codes[0, :, t, 0] = _draw(pitch_probs, gen)
        codes[0, :, t, 1:] = _draw(time_probs, gen)
    return codes[0].numpy()


# ---------------------------------------------------------------------------
# training


@dataclass
class PriorHistory:
    step_loss: list = field(default_factory=list)
    epoch_loss: list = field(default_factory=list)
    val_nll: list = field(default_factory=list)


@torch.no_grad()
def evaluate_nll(prior: Prior, segments: Sequence[PriorSegment], beta: float, seed: int = 0,
                 batch_size: int = 32) -> float:
    """Mean teacher-forced NLL over segments at a fixed beta (eval mode)."""
    prior.eval()
    gen = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    for i in range(0, len(segments), batch_size):
        chunk = segments[i:i + batch_size]
        batch = collate(chunk, prior.dtype)
        noise = torch.randn(batch.mix.shape, generator=gen, dtype=torch.float64).to(prior.dtype)
        total += float(prior.loss(batch, beta, noise)) * len(chunk)
        count += len(chunk)
    return total / count


def train_prior(segments: Sequence[PriorSegment], config: PriorConfig | None = None,
                val_segments: Sequence[PriorSegment] | None = None,
                on_epoch: Callable[[int, float, float | None], None] | None = None) -> tuple[Prior, PriorHistory]:
    config = config or PriorConfig()
    if not segments:
        raise ValueError("empty corpus")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    prior = Prior(config)
    opt = torch.optim.Adam(prior.parameters(), lr=config.lr)
    gamma = (config.lr_final / config.lr) ** (1.0 / max(config.steps - 1, 1))
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma)
    lo, hi = config.beta_range
    history = PriorHistory()
    step, epoch = 0, 0
    while step < config.steps:
        prior.train()
        order = torch.randperm(len(segments), generator=gen).tolist()
        running, seen = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            chunk = [segments[j] for j in order[i:i + config.batch_size]]
            batch = collate(chunk, prior.dtype)
            beta = lo + (hi - lo) * torch.rand(len(chunk), generator=gen, dtype=torch.float64).to(prior.dtype)
            noise = torch.randn(batch.mix.shape, generator=gen, dtype=torch.float64).to(prior.dtype)
            loss = prior.loss(batch, beta, noise)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            value = float(loss.detach())
            history.step_loss.append(value)
            running += value * len(chunk)
            seen += len(chunk)
            step += 1
            if step >= config.steps or (config.stop_below is not None and value < config.stop_below):
                break
        history.epoch_loss.append(running / seen)
        val = None
        if val_segments:
            val = evaluate_nll(prior, val_segments, config.val_beta, config.seed)
            history.val_nll.append(val)
        log.info("prior epoch %d step %d loss %.4f val %s", epoch, step, history.epoch_loss[-1], val)
        if on_epoch:
            on_epoch(epoch, history.epoch_loss[-1], val)
        epoch += 1
        if config.stop_below is not None and history.step_loss[-1] < config.stop_below:
            break
    prior.eval()
    return prior, history


def save_prior(prior: Prior, path: str | Path) -> None:
    torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "config": asdict(prior.config), "state_dict": prior.state_dict()}, path)


def load_prior(path: str | Path) -> Prior:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except (RuntimeError, pickle.UnpicklingError, EOFError) as exc:
        raise ValueError(f"{path} is not a prior checkpoint ({exc})") from None
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a prior checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported prior checkpoint version {blob.get('version')}")
    prior = Prior(PriorConfig(**blob["config"]))
    prior.load_state_dict(blob["state_dict"])
    prior.eval()
    return prior
