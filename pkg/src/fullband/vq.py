"""Vector-quantization codebook with EMA updates and dead-code random restart."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

EMA_DECAY = 0.99
EMA_EPS = 1e-5
RESTART_THRESHOLD = 1.0
COMMITMENT_WEIGHT = 0.25

_MAGIC = b"FBVQ"
_VERSION = 1


class Codebook(nn.Module):
    """K x D codebook. Entries are never trained by gradient, only by EMA.

    ``usage`` counts assignments made by :meth:`quantize` in training mode since
    the last :meth:`reset_usage`; restart decisions are based on it.
    """

    def __init__(self, num_codes: int, dim: int, decay: float = EMA_DECAY, eps: float = EMA_EPS,
                 dtype: torch.dtype = torch.float32, generator: torch.Generator | None = None):
        super().__init__()
        self.num_codes = num_codes
        self.dim = dim
        self.decay = decay
        self.eps = eps
        entries = torch.randn(num_codes, dim, generator=generator, dtype=dtype)
        self.register_buffer("entries", entries)
        self.register_buffer("ema_counts", torch.ones(num_codes, dtype=dtype))
        self.register_buffer("ema_sums", entries.clone())
        self.register_buffer("usage", torch.zeros(num_codes, dtype=torch.int64))

    def nearest(self, x: torch.Tensor, chunk: int = 2048) -> torch.Tensor:
        """Index of the closest entry (Euclidean) for each row; ties go to the lowest index."""
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected vectors of dimension {self.dim}, got {x.shape[-1]}")
        flat = x.detach().reshape(-1, self.dim).to(self.entries.dtype)
        out = []
        for i in range(0, len(flat), chunk):
            block = flat[i:i + chunk]
            dist = (block[:, None, :] - self.entries[None, :, :]).pow(2).sum(-1)
            out.append(dist.argmin(dim=1))
        idx = torch.cat(out) if out else torch.zeros(0, dtype=torch.int64)
        return idx.reshape(x.shape[:-1])

    def quantize(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (indices, codes). Codes carry a straight-through gradient to ``x``."""
        idx = self.nearest(x)
        codes = self.entries[idx].to(x.dtype)
        if self.training:
            self.usage += torch.bincount(idx.reshape(-1), minlength=self.num_codes)
        return idx, x + (codes - x).detach()

    def lookup(self, idx: torch.Tensor) -> torch.Tensor:
        return self.entries[idx]

    @torch.no_grad()
    def ema_update(self, batch: torch.Tensor, assignments: torch.Tensor, decay: float | None = None) -> None:
        decay = self.decay if decay is None else decay
        if not 0.0 < decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        batch = batch.detach().reshape(-1, self.dim).to(self.entries.dtype)
        assignments = assignments.reshape(-1)
        onehot = torch.zeros(len(batch), self.num_codes, dtype=batch.dtype)
        onehot[torch.arange(len(batch)), assignments] = 1
        counts = onehot.sum(0)
        sums = onehot.t() @ batch
        self.ema_counts.mul_(decay).add_((1 - decay) * counts)
        self.ema_sums.mul_(decay).add_((1 - decay) * sums)
        self.entries.copy_(self.ema_sums / (self.ema_counts[:, None] + self.eps))

    @torch.no_grad()
    def random_restart(self, pool: torch.Tensor, threshold: float = RESTART_THRESHOLD,
                       generator: torch.Generator | None = None) -> int:
        """Move entries used fewer than ``threshold`` times onto random pool vectors."""
        pool = pool.detach().reshape(-1, self.dim).to(self.entries.dtype)
        if len(pool) == 0:
            raise ValueError("restart pool is empty")
        dead = torch.nonzero(self.usage < threshold).flatten()
        if len(dead):
            pick = torch.randint(len(pool), (len(dead),), generator=generator)
            self.entries[dead] = pool[pick]
            self.ema_counts[dead] = 1.0
            self.ema_sums[dead] = pool[pick]
        return int(len(dead))

    def reset_usage(self) -> None:
        self.usage.zero_()

    # -- checkpoint container ------------------------------------------------
    # little-endian: magic "FBVQ", u32 version, u32 K, u32 D, f64 decay, f64 eps,
    # then float32 entries[K*D], float32 ema_counts[K], float32 ema_sums[K*D], int64 usage[K]

    def to_bytes(self) -> bytes:
        head = _MAGIC + struct.pack("<IIIdd", _VERSION, self.num_codes, self.dim, self.decay, self.eps)
        parts = [self.entries, self.ema_counts, self.ema_sums]
        body = b"".join(p.detach().cpu().numpy().astype("<f4").tobytes() for p in parts)
        return head + body + self.usage.cpu().numpy().astype("<i8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> Codebook:
        if buf[:4] != _MAGIC:
            raise ValueError("not a codebook checkpoint")
        version, k, d, decay, eps = struct.unpack("<IIIdd", buf[4:32])
        if version != _VERSION:
            raise ValueError(f"unsupported codebook version {version}")
        book = cls(k, d, decay, eps)
        pos = 32
        arrays = []
        for n in (k * d, k, k * d):
            arrays.append(np.frombuffer(buf, "<f4", n, pos).copy())
            pos += 4 * n
        usage = np.frombuffer(buf, "<i8", k, pos).copy()
        book.entries.copy_(torch.from_numpy(arrays[0].reshape(k, d)))
        book.ema_counts.copy_(torch.from_numpy(arrays[1]))
        book.ema_sums.copy_(torch.from_numpy(arrays[2].reshape(k, d)))
        book.usage.copy_(torch.from_numpy(usage))
        return book

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> Codebook:
        return cls.from_bytes(Path(path).read_bytes())


def commitment_loss(latent: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    """Mean squared distance pulling encoder outputs toward their (fixed) codes."""
    return (latent - codes.detach()).pow(2).mean()


def quantization_mse(book: Codebook, data: torch.Tensor) -> float:
    idx = book.nearest(data)
    return float((data.to(book.entries.dtype) - book.entries[idx]).pow(2).sum(-1).mean())


def fit_codebook(book: Codebook, data: torch.Tensor, epochs: int = 10, batch_size: int = 64,
                 threshold: float = RESTART_THRESHOLD, generator: torch.Generator | None = None) -> list[float]:
    """Standalone EMA training with epoch-end restarts; returns the per-epoch MSE."""
    data = data.reshape(-1, book.dim)
    history = []
    book.train()
    for _ in range(epochs):
        book.reset_usage()
        order = torch.randperm(len(data), generator=generator)
        for i in range(0, len(data), batch_size):
            batch = data[order[i:i + batch_size]]
            idx, _ = book.quantize(batch)
            book.ema_update(batch, idx)
        book.random_restart(data, threshold, generator)
        history.append(quantization_mse(book, data))
    return history
