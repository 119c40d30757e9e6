"""Brute-force reference implementations of the evaluation metrics.

Everything is recomputed from raw note tuples with plain loops; nothing here
imports the feature or metric modules.
"""
from __future__ import annotations

import itertools
import math

CHORD_TONES = {
    "M": (0, 4, 7), "m": (0, 3, 7), "dim": (0, 3, 6), "aug": (0, 4, 8),
    "7": (0, 4, 7, 10), "M7": (0, 4, 7, 11), "m7": (0, 3, 7, 10), "m7-5": (0, 3, 6, 10),
}
QUALITIES = ("M", "m", "dim", "aug", "7", "M7", "m7", "m7-5")


def notes_of(piece, track=None):
    tracks = piece.tracks if track is None else [piece.tracks[track]]
    return [(n.onset, n.duration, n.pitch) for t in tracks for n in t.notes]


def pitch_hist(notes, bar):
    h = [0.0] * 12
    for onset, dur, pitch in notes:
        for s in range(onset, onset + dur):
            if bar * 16 <= s < bar * 16 + 16:
                h[pitch % 12] += 1
    return h


def voice_intensity(notes, bar):
    v = [0] * 16
    for onset, _, _ in notes:
        if bar * 16 <= onset < bar * 16 + 16:
            v[onset - bar * 16] += 1
    return v


def groove(notes, bar):
    return [1 if x >= 1 else 0 for x in voice_intensity(notes, bar)]


def cos(u, v):
    nu = math.sqrt(sum(x * x for x in u))
    nv = math.sqrt(sum(x * x for x in v))
    if nu == 0 and nv == 0:
        return 1.0
    if nu == 0 or nv == 0:
        return 0.0
    return sum(a * b for a, b in zip(u, v)) / (nu * nv)


def similarity(result, piano, feature):
    total = 0.0
    for k in range(result.bar_count):
        total += cos(feature(notes_of(result), k), feature(notes_of(piano), k))
    return total / result.bar_count


def entropy_metric(result, piano, feature):
    total = 0.0
    n_tracks = len(result.tracks)
    for k in range(result.bar_count):
        ref = feature(notes_of(piano), k)
        sims = [cos(feature(notes_of(result, n), k), ref) for n in range(n_tracks)]
        s = sum(sims)
        if s == 0:
            probs = [1.0 / n_tracks] * n_tracks
        else:
            probs = [x / s for x in sims]
        total += -sum(p * math.log(p) for p in probs if p > 0)
    return total / result.bar_count


def consistency(g1, g2):
    return 1 - sum(1 for a, b in zip(g1, g2) if a != b) / 16


def groove_consistency(notes, bars):
    total = 0.0
    for i in range(bars):
        for j in range(bars):
            total += consistency(groove(notes, i), groove(notes, j))
    return total / bars ** 2


def g_mix(piece):
    return groove_consistency(notes_of(piece), piece.bar_count)


def g_track(piece):
    return sum(groove_consistency(notes_of(piece, n), piece.bar_count)
               for n in range(len(piece.tracks))) / len(piece.tracks)


def g_phrase(piece, phrases):
    notes = notes_of(piece)
    k_total = piece.bar_count
    grooves = [groove(notes, k) for k in range(k_total)]
    ratios = []
    start = 0
    for _, length in phrases:
        members = list(range(start, start + length))
        others = [k for k in range(k_total) if k not in members]
        intra = sum(consistency(grooves[i], grooves[j]) for i in members for j in members) / length ** 2
        inter = sum(consistency(grooves[i], grooves[j]) for i in members for j in others) / (length * (k_total - length))
        ratios.append(intra / inter)
        start += length
    return sum(ratios) / len(ratios)


def recognize(piece):
    """Per-beat template chord as (root, quality) pairs."""
    notes = notes_of(piece)
    out = []
    prev = (0, "M")
    for beat in range(piece.bar_count * 4):
        prof = [0.0] * 12
        for onset, dur, pitch in notes:
            for s in range(onset, onset + dur):
                if beat * 4 <= s < beat * 4 + 4:
                    prof[pitch % 12] += 1
        mass = sum(prof)
        if mass > 0:
            best, best_key = None, None
            for root in range(12):
                for quality in QUALITIES:
                    tones = {(root + i) % 12 for i in CHORD_TONES[quality]}
                    inside = sum(prof[c] for c in tones)
                    score = (inside - 0.5 * (mass - inside)) / mass
                    key = (-score, sum(1 for c in tones if prof[c] == 0))
                    if best_key is None or key < best_key:
                        best, best_key = (root, quality), key
            prev = best
        out.append(prev)
    return out


def a_chord(arrangement, lead):
    found = recognize(arrangement)
    target = [(c.root, c.quality) for c in lead.chords]
    return sum(1 for a, b in zip(found, target) if a == b) / len(target)


def brute_force_path(unary, pairwise, delta=0.3, gamma=0.7):
    """Best phrase path by enumerating every combination; the first strict maximum wins."""
    best, best_path = None, None
    for path in itertools.product(*[range(len(u)) for u in unary]):
        score = delta * sum(unary[l][i] for l, i in enumerate(path))
        score += gamma * sum(pairwise[l][path[l]][path[l + 1]] for l in range(len(path) - 1))
        if best is None or score > best + 1e-12:
            best, best_path = score, list(path)
    return best_path, best


def nearest_index(entries, v):
    best, best_d = 0, math.inf
    for k, e in enumerate(entries):
        d = sum((a - b) ** 2 for a, b in zip(v, e))
        if d < best_d:
            best, best_d = k, d
    return best
