"""Synthetic evaluation corpus with planted tag structure.

Each tag owns a characteristic chord: a 3-partial subset of one shared
frequency pool, packed so tag chords overlap in at most one partial. A
song is a sequence of note slots. A slot either plays one of the song's
tag chords (probability partials_per_atom / partial_pool_size per tag)
or a uniformly random chord over the song's non-tag partials, at a
random gain, plus noise. That slot distribution makes every partial's
expected occupancy identical for every song, so a song's *average*
spectrum carries no first-order tag signal; only the within-frame
co-occurrence of the tag partials (the chord) marks a tag. Code
histograms keep that joint pattern; plain feature averaging destroys it.

Artists group songs; annotations, song-song relevance (shared tag),
query-by-tag folds and query-by-example splits are all artist-disjoint
and fully determined by the seed.
"""

from __future__ import annotations

import io
import json
import wave
from dataclasses import asdict, dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.optimize import nnls

from .errors import DataError
from .formats import (atomic_write, write_annotations, write_folds,
                      write_qbe_splits, write_relevance_pairs)
from .retrieval import QbeSplit

FADE_SAMPLES = 256


@dataclass(frozen=True)
class CorpusConfig:
    n_songs: int = 200
    n_tags: int = 10
    songs_per_artist: int = 4
    n_dicttrain_songs: int = 100
    song_slots: int = 48
    dicttrain_slots: int = 48
    slot_samples: int = 8192
    sample_rate: int = 22050
    partial_pool_size: int = 16
    partials_per_atom: int = 3
    dicttrain_tag_fraction: float = 0.5
    gain_low: float = 0.25
    gain_high: float = 1.0
    noise_level: float = 0.01
    n_folds: int = 5
    n_qbe_splits: int = 10
    qbe_train_frac: float = 0.7
    qbe_val_frac: float = 0.15
    seed: int = 0

    @property
    def tag_event_prob(self) -> float:
        # Per tag chord; this value equalizes every partial's expected
        # occupancy across songs, removing all first-order tag signal.
        return self.partials_per_atom / self.partial_pool_size


def _draw_tag_chords(cfg: CorpusConfig, rng: np.random.Generator):
    """Shared partial pool (Hz) and one packed partial triple per tag."""
    pool = np.exp(np.linspace(np.log(250.0), np.log(6300.0),
                              cfg.partial_pool_size))
    pool = pool * np.exp(rng.uniform(-0.03, 0.03, size=pool.shape))

    candidates = list(combinations(range(cfg.partial_pool_size),
                                   cfg.partials_per_atom))
    order = rng.permutation(len(candidates))
    chords: list[tuple] = []
    for idx in order:
        combo = candidates[idx]
        if all(len(set(combo) & set(prior)) <= 1 for prior in chords):
            chords.append(tuple(int(p) for p in combo))
            if len(chords) == cfg.n_tags:
                break
    if len(chords) < cfg.n_tags:
        raise DataError(
            f"partial pool of {cfg.partial_pool_size} only packs "
            f"{len(chords)} tag chords; need {cfg.n_tags}"
        )
    return pool, chords


def _render_slot(freqs: np.ndarray, gain: float, phases: np.ndarray,
                 n: int, sample_rate: int) -> np.ndarray:
    t = np.arange(n) / sample_rate
    weights = 0.6 ** np.arange(freqs.shape[0])
    weights = weights / weights.sum()
    slot = np.zeros(n)
    for f, w, phi in zip(freqs, weights, phases):
        slot += w * np.sin(2.0 * np.pi * f * t + phi)
    fade = 0.5 * (1.0 - np.cos(np.pi * np.arange(FADE_SAMPLES) / FADE_SAMPLES))
    slot[:FADE_SAMPLES] *= fade
    slot[-FADE_SAMPLES:] *= fade[::-1]
    return gain * slot


class _BackgroundSampler:
    """Per-tag-set distribution over background chords.

    Background triples avoid sharing two or more partials with any tag
    chord (no near-misses); their sampling weights are solved so that
    every free partial's expected occupancy is exactly uniform, which
    erases all first-order tag evidence from averaged spectra.
    """

    def __init__(self, cfg: CorpusConfig, all_chords: list, tag_set: tuple):
        tag_partials = {p for t in tag_set for p in all_chords[t]}
        self.free = sorted(set(range(cfg.partial_pool_size)) - tag_partials)
        self.triples = [
            t for t in combinations(self.free, cfg.partials_per_atom)
            if all(len(set(t) & set(c)) <= 1 for c in all_chords)
        ]
        if not self.triples:
            raise DataError(f"no background chords available for tags {tag_set}")
        incidence = np.zeros((len(self.free), len(self.triples)))
        for j, t in enumerate(self.triples):
            for p in t:
                incidence[self.free.index(p), j] = 1.0
        target = np.full(len(self.free),
                         cfg.partials_per_atom / len(self.free))
        weights, residual = nnls(incidence, target)
        self.residual = float(residual)
        self.weights = weights / weights.sum()

    @property
    def balanced(self) -> bool:
        return self.residual < 1e-8

    def draw(self, rng: np.random.Generator) -> tuple:
        return self.triples[rng.choice(len(self.triples), p=self.weights)]


def _finish_song(cfg: CorpusConfig, samples: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    samples = samples + cfg.noise_level * rng.standard_normal(samples.shape[0])
    peak = np.abs(samples).max()
    if peak > 0.9:
        samples *= 0.9 / peak
    return samples


def _render_song(cfg: CorpusConfig, pool: np.ndarray, chords: list,
                 background: _BackgroundSampler, n_slots: int,
                 rng: np.random.Generator) -> np.ndarray:
    """chords: the song's tag chords (partial-index triples)."""
    tag_slot_prob = len(chords) * cfg.tag_event_prob
    samples = np.zeros(n_slots * cfg.slot_samples)
    for s in range(n_slots):
        if chords and rng.random() < tag_slot_prob:
            combo = chords[rng.integers(len(chords))]
        else:
            combo = background.draw(rng)
        freqs = np.sort(pool[list(combo)])
        gain = rng.uniform(cfg.gain_low, cfg.gain_high)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=cfg.partials_per_atom)
        start = s * cfg.slot_samples
        samples[start : start + cfg.slot_samples] = _render_slot(
            freqs, gain, phases, cfg.slot_samples, cfg.sample_rate
        )
    return _finish_song(cfg, samples, rng)


def _render_dicttrain_song(cfg: CorpusConfig, pool: np.ndarray, chords: list,
                           bg_triples: list, n_slots: int,
                           rng: np.random.Generator) -> np.ndarray:
    """Dictionary-training audio: chord-uniform coverage, no tag structure.

    This mirrors using external training music: every sound pattern in
    the corpus appears densely so the codebook allocates codewords to all
    of them; the eval corpus's occupancy balance is irrelevant here.
    """
    samples = np.zeros(n_slots * cfg.slot_samples)
    for s in range(n_slots):
        if rng.random() < cfg.dicttrain_tag_fraction:
            combo = chords[rng.integers(len(chords))]
        else:
            combo = bg_triples[rng.integers(len(bg_triples))]
        freqs = np.sort(pool[list(combo)])
        gain = rng.uniform(cfg.gain_low, cfg.gain_high)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=cfg.partials_per_atom)
        start = s * cfg.slot_samples
        samples[start : start + cfg.slot_samples] = _render_slot(
            freqs, gain, phases, cfg.slot_samples, cfg.sample_rate
        )
    return _finish_song(cfg, samples, rng)


def _wav_bytes(samples: np.ndarray, sample_rate: int) -> bytes:
    ints = np.clip(np.rint(samples * 32767.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(ints.tobytes())
    return buf.getvalue()


def _artist_tags(artist_index: int, cfg: CorpusConfig, chords: list,
                 samplers: dict) -> tuple:
    """One or two tags per artist, round-robin over the tag set.

    A second tag is only added when its chord shares no partial with the
    first and the pair still admits an exactly balanced background
    distribution (keeps averaged spectra tag-blind for multi-tag songs).
    """
    first = artist_index % cfg.n_tags
    if artist_index % 2 == 0:
        return (first,)
    for offset in range(1, cfg.n_tags):
        second = (first + offset + (artist_index * 7) % (cfg.n_tags - 1)) % cfg.n_tags
        if second == first or set(chords[first]) & set(chords[second]):
            continue
        pair = (first, second)
        if pair not in samplers:
            samplers[pair] = _BackgroundSampler(cfg, chords, pair)
        if samplers[pair].balanced:
            return pair
    return (first,)


def generate_corpus(cfg: CorpusConfig, out_dir, lineage: str = "") -> dict:
    """Write WAVs, annotations, relevance, folds and splits; return the manifest."""
    if cfg.n_songs < cfg.n_folds * cfg.songs_per_artist:
        raise DataError("corpus too small for the requested folds")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(cfg.seed)
    pool, chords = _draw_tag_chords(cfg, rng)
    tags = [f"tag_{i:02d}" for i in range(cfg.n_tags)]
    samplers: dict[tuple, _BackgroundSampler] = {}

    def sampler_for(tag_set: tuple) -> _BackgroundSampler:
        if tag_set not in samplers:
            samplers[tag_set] = _BackgroundSampler(cfg, chords, tag_set)
        return samplers[tag_set]

    n_artists = cfg.n_songs // cfg.songs_per_artist
    artist_of: dict[str, str] = {}
    tags_of_song: dict[str, tuple] = {}
    song_ids = []
    for i in range(cfg.n_songs):
        artist_index = min(i // cfg.songs_per_artist, n_artists - 1)
        song_id = f"song_{i:04d}"
        song_ids.append(song_id)
        artist_of[song_id] = f"artist_{artist_index:03d}"
        tags_of_song[song_id] = _artist_tags(artist_index, cfg, chords, samplers)

    for song_id in song_ids:
        tag_set = tags_of_song[song_id]
        samples = _render_song(cfg, pool, [chords[t] for t in tag_set],
                               sampler_for(tag_set), cfg.song_slots, rng)
        atomic_write(out_dir / "audio" / f"{song_id}.wav",
                     _wav_bytes(samples, cfg.sample_rate))

    used_triples = sorted({
        triple
        for sampler in samplers.values()
        for triple, weight in zip(sampler.triples, sampler.weights)
        if weight > 1e-12
    })
    dicttrain_ids = []
    for i in range(cfg.n_dicttrain_songs):
        song_id = f"dict_{i:04d}"
        dicttrain_ids.append(song_id)
        samples = _render_dicttrain_song(cfg, pool, chords, used_triples,
                                         cfg.dicttrain_slots, rng)
        atomic_write(out_dir / "dicttrain" / f"{song_id}.wav",
                     _wav_bytes(samples, cfg.sample_rate))

    annotations = {
        tags[t]: {s for s in song_ids if t in tags_of_song[s]}
        for t in range(cfg.n_tags)
    }
    write_annotations(out_dir / "annotations.csv", annotations)

    relevant: dict[str, set] = {s: set() for s in song_ids}
    for a in song_ids:
        for b in song_ids:
            if a < b and set(tags_of_song[a]) & set(tags_of_song[b]):
                relevant[a].add(b)
                relevant[b].add(a)
    write_relevance_pairs(out_dir / "relevance.csv", relevant)

    artist_names = sorted(set(artist_of.values()))
    fold_of_artist = {
        a: f % cfg.n_folds
        for f, a in enumerate(artist_names[i] for i in rng.permutation(len(artist_names)))
    }
    folds = {s: fold_of_artist[artist_of[s]] for s in song_ids}
    write_folds(out_dir / "folds.csv", folds)

    splits = []
    n_train = int(round(cfg.qbe_train_frac * len(artist_names)))
    n_val = int(round(cfg.qbe_val_frac * len(artist_names)))
    for _ in range(cfg.n_qbe_splits):
        order = [artist_names[i] for i in rng.permutation(len(artist_names))]
        role_of = {}
        for pos, artist in enumerate(order):
            role_of[artist] = ("train" if pos < n_train
                               else "val" if pos < n_train + n_val else "test")
        ids_by_role = {"train": [], "val": [], "test": []}
        for s in song_ids:
            ids_by_role[role_of[artist_of[s]]].append(s)
        splits.append(QbeSplit(train=tuple(sorted(ids_by_role["train"])),
                               val=tuple(sorted(ids_by_role["val"])),
                               test=tuple(sorted(ids_by_role["test"]))))
    write_qbe_splits(out_dir / "qbe_splits.csv", splits)

    manifest = {
        "config": asdict(cfg),
        "lineage": lineage,
        "song_ids": song_ids,
        "dicttrain_ids": dicttrain_ids,
        "artists": artist_of,
        "tags": tags,
        "partial_pool_hz": [float(f) for f in pool],
        "tag_chords": [list(c) for c in chords],
    }
    atomic_write(out_dir / "corpus_meta.json",
                 json.dumps(manifest, sort_keys=True, indent=1).encode("utf-8"))
    return manifest


def load_manifest(corpus_dir) -> dict:
    path = Path(corpus_dir) / "corpus_meta.json"
    if not path.exists():
        raise DataError(f"no corpus manifest at {path}")
    return json.loads(path.read_text())
