"""Objective metrics for orchestration faithfulness/creativity and arrangement quality."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .features import bar_feature_arrays, cosine, recognize_chords
from .score import LeadSheet, Piece, to_common_time

METRIC_NAMES = ("s_pitch", "s_groove", "h_pitch", "h_groove", "a_chord", "g_mix", "g_track", "g_phrase")


class MetricError(ValueError):
    """Inputs cannot be compared (length mismatch)."""


class UndefinedMetricError(MetricError):
    """The metric has no finite value for this input."""


def _bar_counts_match(a: Piece, b: Piece) -> None:
    ka, kb = to_common_time(a).bar_count, to_common_time(b).bar_count
    if ka != kb:
        raise MetricError(f"bar count mismatch: {ka} vs {kb}")


def _mean_bar_cosine(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean([cosine(u, v) for u, v in zip(x, y)]))


def s_pitch(result: Piece, piano: Piece) -> float:
    _bar_counts_match(result, piano)
    return _mean_bar_cosine(bar_feature_arrays(result)[0], bar_feature_arrays(piano)[0])


def s_groove(result: Piece, piano: Piece) -> float:
    _bar_counts_match(result, piano)
    return _mean_bar_cosine(bar_feature_arrays(result)[1], bar_feature_arrays(piano)[1])


def _entropy(similarities: np.ndarray) -> float:
    total = similarities.sum()
    if total == 0:
        return math.log(len(similarities))
    p = similarities / total
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def _track_entropy(result: Piece, piano: Piece, which: int) -> float:
    _bar_counts_match(result, piano)
    if result.n_tracks < 1:
        raise MetricError("result has no tracks")
    ref = bar_feature_arrays(piano)[which]
    per_track = [bar_feature_arrays(result, n)[which] for n in range(result.n_tracks)]
    values = []
    for k in range(len(ref)):
        sims = np.array([cosine(track[k], ref[k]) for track in per_track])
        values.append(_entropy(sims))
    return float(np.mean(values))


def h_pitch(result: Piece, piano: Piece) -> float:
    """Mean per-bar entropy (nats) of the tracks' pitch-histogram similarity to the piano."""
    return _track_entropy(result, piano, 0)


def h_groove(result: Piece, piano: Piece) -> float:
    """Mean per-bar entropy (nats) of the tracks' voice-intensity similarity to the piano."""
    return _track_entropy(result, piano, 1)


def a_chord(arrangement: Piece, lead: LeadSheet) -> float:
    """Fraction of beats whose recognised chord equals the lead-sheet chord."""
    found = recognize_chords(arrangement)
    if len(found) != len(lead.chords):
        raise MetricError(f"beat count mismatch: {len(found)} vs {len(lead.chords)}")
    return sum(a == b for a, b in zip(found, lead.chords)) / len(found)


def consistency_matrix(grooves: np.ndarray) -> np.ndarray:
    """Pairwise groove consistency 1 - XOR/Q for all bar pairs, shape (K, K)."""
    g = grooves.astype(bool)
    xor = (g[:, None, :] ^ g[None, :, :]).sum(axis=-1)
    return 1.0 - xor / g.shape[1]


def g_mix(piece: Piece) -> float:
    return float(consistency_matrix(bar_feature_arrays(piece)[2]).mean())


def g_track(piece: Piece) -> float:
    if piece.n_tracks < 1:
        raise MetricError("piece has no tracks")
    return float(np.mean([consistency_matrix(bar_feature_arrays(piece, n)[2]).mean()
                          for n in range(piece.n_tracks)]))


def g_phrase(piece: Piece, phrases: Sequence[tuple[str, int]] | None = None) -> float:
    """Mean over phrases of intra-phrase over cross-phrase groove consistency."""
    phrases = tuple(phrases if phrases is not None else (piece.phrases or ()))
    piece = to_common_time(piece)
    k = piece.bar_count
    if sum(n for _, n in phrases) != k:
        raise MetricError("phrase lengths do not cover the piece")
    if len(phrases) < 2 or any(not 0 < n < k for _, n in phrases):
        raise UndefinedMetricError("phrase groove diversity needs at least two proper phrases")
    cons = consistency_matrix(bar_feature_arrays(piece)[2])
    ratios, start = [], 0
    for _, n in phrases:
        inside = np.zeros(k, dtype=bool)
        inside[start:start + n] = True
        intra = cons[np.ix_(inside, inside)].mean()
        inter = cons[np.ix_(inside, ~inside)].mean()
        if inter == 0:
            raise UndefinedMetricError(f"inter-phrase consistency is zero for phrase at bar {start}")
        ratios.append(intra / inter)
        start += n
    return float(np.mean(ratios))


@dataclass
class MetricReport:
    s_pitch: float | None = None
    s_groove: float | None = None
    h_pitch: float | None = None
    h_groove: float | None = None
    a_chord: float | None = None
    g_mix: float | None = None
    g_track: float | None = None
    g_phrase: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate_piece(result: Piece, piano: Piece | None = None, lead: LeadSheet | None = None,
                   phrases=None) -> MetricReport:
    """Every metric whose references are available; others stay None."""
    report = MetricReport(g_mix=g_mix(result), g_track=g_track(result) if result.n_tracks else None)
    if piano is not None:
        report.s_pitch = s_pitch(result, piano)
        report.s_groove = s_groove(result, piano)
        if result.n_tracks:
            report.h_pitch = h_pitch(result, piano)
            report.h_groove = h_groove(result, piano)
    if lead is not None:
        report.a_chord = a_chord(result, lead)
        phrases = phrases or lead.phrases
    phrases = phrases or result.phrases
    if phrases:
        try:
            report.g_phrase = g_phrase(result, phrases)
        except UndefinedMetricError:
            report.g_phrase = None
    return report


@dataclass
class CorpusSummary:
    n: dict = field(default_factory=dict)
    mean: dict = field(default_factory=dict)
    ci95: dict = field(default_factory=dict)


def summarize(reports: Iterable[MetricReport]) -> CorpusSummary:
    """Corpus mean and 95% CI half-width (1.96 standard errors) per metric."""
    reports = list(reports)
    out = CorpusSummary()
    for name in METRIC_NAMES:
        values = np.array([getattr(r, name) for r in reports if getattr(r, name) is not None], dtype=float)
        if len(values) == 0:
            continue
        out.n[name] = int(len(values))
        out.mean[name] = float(values.mean())
        out.ci95[name] = float(1.96 * values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
    return out


def format_table(summary: CorpusSummary) -> str:
    """Two-block text table: orchestration metrics, then arrangement metrics."""
    lines = []
    for title, names in (("Orchestration", ("s_pitch", "s_groove", "h_pitch", "h_groove")),
                         ("Arrangement", ("a_chord", "g_mix", "g_track", "g_phrase"))):
        present = [n for n in names if n in summary.mean]
        if not present:
            continue
        lines.append(title)
        lines.append("  " + "  ".join(f"{n:>16}" for n in present))
        lines.append("  " + "  ".join(f"{summary.mean[n]:>8.3f}±{summary.ci95[n]:<7.3f}" for n in present))
    return "\n".join(lines)
