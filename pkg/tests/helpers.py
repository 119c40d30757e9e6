"""Builders shared by the test modules: random scores, toy models and command-line runs."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from fullband import cli, toydata
from fullband import codec as C
from fullband import prior as P
from fullband.pipeline import prior_segments
from fullband.score import NoteEvent, Piece, Track, format_phrases, write_midi


def random_piece(rng: np.random.Generator, max_bars=8, max_tracks=4, meter=(4, 4),
                 min_tracks=0, max_notes=12, bars=None) -> Piece:
    bars = int(rng.integers(1, max_bars + 1)) if bars is None else bars
    total = bars * 4 * meter[0]
    tracks = []
    for _ in range(int(rng.integers(min_tracks, max_tracks + 1))):
        notes = []
        for _ in range(int(rng.integers(0, max_notes + 1))):
            on = int(rng.integers(0, total))
            dur = int(rng.integers(1, total - on + 1))
            notes.append(NoteEvent(on, min(dur, 20), int(rng.integers(0, 128))))
        tracks.append(Track(int(rng.integers(0, 34)), tuple(notes)))
    return Piece(meter, bars, tuple(tracks))


def write_cli_inputs(root, n_songs=8, n_sources=6, seed=0):
    """A toy MIDI corpus and a phrase-annotated source folder for the command line."""
    root = Path(root)
    corpus, sources = root / "corpus", root / "sources"
    corpus.mkdir(parents=True)
    sources.mkdir(parents=True)
    for i, piece in enumerate(toydata.toy_corpus(n_songs, seed=seed)):
        write_midi(piece, corpus / f"song{i:02d}.mid")
    for i, (lead, accomp) in enumerate(toydata.phrase_sources(n_sources, seed=seed + 1)):
        write_midi(Piece((4, 4), lead.bar_count, (lead.melody, accomp)), sources / f"tune{i:02d}.mid")
        (sources / f"tune{i:02d}.phrases").write_text(format_phrases(lead.phrases) + "\n")
    return corpus, sources


def train_toy_codec(seed=0):
    """Codec trained on toy band pieces plus piano-texture pieces, with key augmentation."""
    corpus = toydata.toy_corpus(40, seed=seed)
    pianos = [Piece((4, 4), lead.bar_count, (accomp,)) for lead, accomp in toydata.phrase_sources(20, seed=77)]
    codec, _ = C.train_codec(corpus + pianos, C.CodecConfig(epochs=40, transpose=6, seed=seed))
    return codec


def train_toy_prior(codec, n_pieces=40, steps=400, seed=0):
    corpus = toydata.toy_corpus(n_pieces, seed=seed)
    prior, _ = P.train_prior(prior_segments(codec, corpus, 8), P.PriorConfig(steps=steps, seed=seed))
    return corpus, prior


def planted_clusters(n=400, seed=0):
    """Four tight 2-D clusters at (+-6, +-6)."""
    g = torch.Generator().manual_seed(seed)
    centers = torch.tensor([[6.0, 6.0], [-6.0, 6.0], [6.0, -6.0], [-6.0, -6.0]], dtype=torch.float64)
    labels = torch.randint(4, (n,), generator=g)
    return centers[labels] + 0.3 * torch.randn(n, 2, generator=g, dtype=torch.float64)


def gradient_errors(model, loss_fn, skip=(), per_param=12, h=1e-4, seed=0):
    """Relative error between backprop and central differences, per parameter tensor.

    Tensors whose analytic and numeric gradients both vanish (rows never looked
    up, for instance) are left out.
    """
    model.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    errors = {}
    for name, param in model.named_parameters():
        if name.startswith(tuple(skip)):
            continue
        flat = param.data.view(-1)
        grad = param.grad.view(-1)
        picks = rng.choice(flat.numel(), size=min(per_param, flat.numel()), replace=False)
        analytic, numeric = [], []
        for i in picks:
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
            numeric.append((up - down) / (2 * h))
            analytic.append(grad[i].item())
        a, n = np.array(analytic), np.array(numeric)
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        if scale >= 1e-10:
            errors[name] = float(np.linalg.norm(a - n) / scale)
    return errors


def run_cli(argv):
    return cli.main([str(a) for a in argv])


TINY = {"codec": {"epochs": 3, "transpose": 2}, "prior": {"steps": 20, "batch_size": 8},
        "sampling": {"beta": 0.5, "nucleus_p": 0.3, "temperature": 1.0}}


def run_cli_chain(root, inputs):
    """Every subcommand once, on tiny settings; returns the output files to compare."""
    corpus, sources = inputs
    config = root / "config.json"
    config.write_text(json.dumps(TINY))
    data, ckpt = root / "data", root / "ckpt"
    shared = ["--config", config, "--seed", 5]
    models = ["--codec-checkpoint", ckpt / "codec.pt", "--prior-checkpoint", ckpt / "prior.pt"]
    steps = [
        ["ingest", corpus, data, "--split", "8:1:1", *shared],
        ["build-db", sources, root / "db.json", *shared],
        ["train-codec", data, ckpt / "codec.pt", *shared],
        ["train-prior", data, ckpt / "prior.pt", "--val-split", "val", "--codec-checkpoint", ckpt / "codec.pt",
         *shared],
        ["arrange", root / "arr.mid", "--db", root / "db.json", "--instruments", "8,1,15",
         "--sketch-out", root / "sketch.mid", *models, *shared],
        ["orchestrate", root / "sketch.mid", root / "orch.mid", "--instruments", "8,15", "--downmix",
         *models, *shared],
        ["donor-search", root / "sketch.mid", data, root / "donor.mid", "--continuation-out",
         root / "cont.mid", *shared],
        ["evaluate", root / "orch.mid", "--piano", root / "sketch.mid", "--json", root / "eval.json", *shared],
    ]
    for argv in steps:
        assert run_cli(argv) == 0, argv[0]
    return ["db.json", "ckpt/codec.pt", "ckpt/prior.pt", "arr.mid", "sketch.mid", "orch.mid", "donor.mid",
            "cont.mid", "eval.json", "data/manifest.json"]
