"""Synthetic speech-like corpus with controllable content and nuisance factors.

Each utterance is described by an UtteranceSpec (content tokens plus
speaker, prosody and noise nuisance factors). render() turns a spec into
a waveform; render_neutral() re-renders the same content with every
nuisance factor stripped, standing in for TTS-synthesized neutral speech.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .rng import child_rng

SAMPLES_PER_TOKEN = 800

# canonical voice used by the neutral rendering; speaker 0 shares it
NEUTRAL_TIMBRE = (1.0, 0.5)
NEUTRAL_PROSODY = (1.0, 0.0)

# per-token fundamental in cycles/sample; wide spread keeps the conv
# features' time averages token-dependent
_BASE_FREQ = 0.02
_FREQ_STEP = 0.009
_PARTIAL_RATIO = 1.5
_OUTPUT_GAIN = 0.45


@dataclass(frozen=True)
class UtteranceSpec:
    """Latent generative description an utterance is rendered from."""

    content: tuple
    speaker_id: int
    prosody: tuple  # (amplitude, pitch_offset) per token
    noise_level: float
    seed: int

    def __post_init__(self):
        if len(self.content) == 0:
            raise ValueError("content must be non-empty")
        if self.noise_level < 0:
            raise ValueError(f"noise_level must be >= 0, got {self.noise_level}")
        if len(self.prosody) != len(self.content):
            raise ValueError("prosody must supply one (amplitude, pitch) pair per token")


@dataclass(frozen=True)
class Waveform:
    """Raw 1-D sample sequence with values in [-1, 1]."""

    samples: np.ndarray

    @property
    def length(self) -> int:
        return int(self.samples.shape[0])


@dataclass(frozen=True)
class GeneratorConfig:
    vocab_size: int = 32
    n_speakers: int = 8
    n_intents: int = 8
    n_phrases: int = 64
    min_tokens: int = 3
    max_tokens: int = 10
    noise_range: tuple = (0.05, 0.2)
    samples_per_token: int = SAMPLES_PER_TOKEN


@dataclass
class LabeledCorpus:
    """Utterances plus index-based train/dev/test splits.

    Task labels are pure functions of the specs; they are materialized in
    the manifest on save but always recomputable.
    """

    utterances: list  # (UtteranceSpec, Waveform) pairs
    generator: GeneratorConfig
    train_idx: list = field(default_factory=list)
    dev_idx: list = field(default_factory=list)
    test_idx: list = field(default_factory=list)

    def __len__(self):
        return len(self.utterances)

    def spec(self, i) -> UtteranceSpec:
        return self.utterances[i][0]

    def waveform(self, i) -> Waveform:
        return self.utterances[i][1]

    def split(self, name):
        return {"train": self.train_idx, "dev": self.dev_idx, "test": self.test_idx}[name]

    def label(self, i, task):
        spec = self.spec(i)
        if task in ("content_cls", "content"):
            return content_class(spec)
        if task in ("intent_cls", "intent"):
            return intent_label(spec, self.generator.n_intents)
        if task in ("speaker_cls", "speaker"):
            return spec.speaker_id
        raise KeyError(f"no utterance-level label for task {task!r}")


def speaker_timbre(speaker_id: int):
    """Harmonic weights for a speaker; a pure function of the id.

    Speaker 0 carries the canonical (neutral) timbre; other voices spread
    +-50% around it.
    """
    if speaker_id == 0:
        return NEUTRAL_TIMBRE
    rng = child_rng(0, "timbre", int(speaker_id))
    w1 = NEUTRAL_TIMBRE[0] * rng.uniform(0.5, 1.5)
    w2 = NEUTRAL_TIMBRE[1] * rng.uniform(0.5, 1.5)
    return (float(w1), float(w2))


def content_class(spec: UtteranceSpec) -> int:
    """Keyword-spotting analog: the class of the first content token."""
    return int(spec.content[0])


def intent_label(spec: UtteranceSpec, n_intents: int = 8) -> int:
    """Intent analog: a stable hash of the whole content sequence."""
    return phrase_intent(spec.content, n_intents)


def phrase_intent(content, n_intents: int) -> int:
    digest = hashlib.sha256(repr(tuple(int(t) for t in content)).encode()).digest()
    return int.from_bytes(digest[:4], "little") % n_intents


def frame_labels(spec: UtteranceSpec, frame_count: int, downsample: int,
                 samples_per_token: int = SAMPLES_PER_TOKEN) -> np.ndarray:
    """Per-frame content token ids; the frame's center sample decides."""
    centers = np.arange(frame_count) * downsample + downsample // 2
    token_idx = np.minimum(centers // samples_per_token, len(spec.content) - 1)
    return np.asarray([spec.content[t] for t in token_idx], dtype=np.intp)


def _token_wave(token_id, n, timbre, amplitude, pitch_offset):
    f1 = (_BASE_FREQ + _FREQ_STEP * token_id) * (1.0 + pitch_offset)
    t = np.arange(n, dtype=np.float64)
    wave = timbre[0] * np.sin(2.0 * np.pi * f1 * t) + timbre[1] * np.sin(
        2.0 * np.pi * _PARTIAL_RATIO * f1 * t
    )
    return amplitude * wave


def _render(content, timbre, prosody, noise_level, noise_rng, samples_per_token):
    segments = [
        _token_wave(tok, samples_per_token, timbre, amp, pitch)
        for tok, (amp, pitch) in zip(content, prosody)
    ]
    wave = _OUTPUT_GAIN * np.concatenate(segments)
    if noise_level > 0:
        wave = wave + noise_rng.normal(0.0, noise_level, size=wave.shape)
    # soft-clip keeps samples strictly inside [-1, 1]
    wave = np.tanh(wave)
    # snap to the float32 grid so the f32 sample files round-trip bit-exactly
    return wave.astype(np.float32).astype(np.float64)


def render(spec: UtteranceSpec, samples_per_token: int = SAMPLES_PER_TOKEN) -> Waveform:
    """Render a spec to its waveform; deterministic given the spec."""
    noise_rng = child_rng(spec.seed, "noise")
    samples = _render(
        spec.content,
        speaker_timbre(spec.speaker_id),
        spec.prosody,
        spec.noise_level,
        noise_rng,
        samples_per_token,
    )
    return Waveform(samples)


def render_neutral(spec: UtteranceSpec, samples_per_token: int = SAMPLES_PER_TOKEN) -> Waveform:
    """Content-only re-rendering: canonical timbre, flat prosody, no noise."""
    flat = tuple(NEUTRAL_PROSODY for _ in spec.content)
    samples = _render(spec.content, NEUTRAL_TIMBRE, flat, 0.0, None, samples_per_token)
    return Waveform(samples)


def _build_phrase_pool(gen: GeneratorConfig, rng):
    """Distinct content sequences with first-token and intent classes balanced.

    Phrase i gets first token i % vocab; its tail is resampled until the
    intent hash lands on the scheduled class, so both label families come
    out exactly balanced over the pool.
    """
    pool = []
    seen = set()
    for i in range(gen.n_phrases):
        first = i % gen.vocab_size
        target_intent = (i + i // gen.vocab_size) % gen.n_intents
        while True:
            length = int(rng.integers(gen.min_tokens, gen.max_tokens + 1))
            tail = tuple(int(t) for t in rng.integers(0, gen.vocab_size, size=length - 1))
            phrase = (first,) + tail
            if phrase in seen:
                continue
            if phrase_intent(phrase, gen.n_intents) == target_intent:
                seen.add(phrase)
                pool.append(phrase)
                break
    return pool


def sample_corpus(n: int, gen: GeneratorConfig = GeneratorConfig(), seed: int = 0) -> LabeledCorpus:
    """Draw n utterances and split them 80/10/10 into train/dev/test."""
    if n < 1:
        raise ValueError(f"corpus size must be >= 1, got {n}")
    pool_rng = child_rng(seed, "phrases")
    pool = _build_phrase_pool(gen, pool_rng)
    draw = child_rng(seed, "specs")

    utterances = []
    for i in range(n):
        content = pool[int(draw.integers(0, len(pool)))]
        speaker = int(draw.integers(0, gen.n_speakers))
        prosody = tuple(
            (float(draw.uniform(0.5, 1.5)), float(draw.uniform(-0.05, 0.05)))
            for _ in content
        )
        noise = float(draw.uniform(*gen.noise_range))
        spec = UtteranceSpec(content, speaker, prosody, noise, seed=i)
        utterances.append((spec, render(spec, gen.samples_per_token)))

    n_train = int(0.8 * n)
    n_dev = int(0.1 * n)
    idx = list(range(n))
    return LabeledCorpus(
        utterances,
        gen,
        train_idx=idx[:n_train],
        dev_idx=idx[n_train:n_train + n_dev],
        test_idx=idx[n_train + n_dev:],
    )


SUBSAMPLE_FRACTIONS = (0.01, 0.05, 0.10, 1.0)


def subsample_training(corpus: LabeledCorpus, fraction: float, seed: int = 0) -> LabeledCorpus:
    """Shrink the training split to the given fraction, stratified by content class.

    Dev and test splits are untouched. Classes are filled round-robin in
    descending size order, so every present class keeps at least one
    instance whenever the budget allows.
    """
    if fraction not in SUBSAMPLE_FRACTIONS:
        raise ValueError(f"fraction must be one of {SUBSAMPLE_FRACTIONS}, got {fraction}")
    if fraction == 1.0:
        return replace(corpus, train_idx=list(corpus.train_idx))

    target = max(1, round(fraction * len(corpus.train_idx)))
    rng = child_rng(seed, "subsample", repr(fraction))

    by_class = {}
    for i in corpus.train_idx:
        by_class.setdefault(content_class(corpus.spec(i)), []).append(i)
    for members in by_class.values():
        rng.shuffle(members)
    order = sorted(by_class, key=lambda c: (-len(by_class[c]), c))

    chosen = []
    depth = 0
    while len(chosen) < target:
        progressed = False
        for c in order:
            if len(chosen) >= target:
                break
            if depth < len(by_class[c]):
                chosen.append(by_class[c][depth])
                progressed = True
        if not progressed:
            break
        depth += 1

    chosen.sort()
    return replace(corpus, train_idx=chosen)


# ---------------------------------------------------------------------------
# persistence: JSONL manifest + one raw little-endian f32 file per utterance


def save_corpus(corpus: LabeledCorpus, directory):
    os.makedirs(os.path.join(directory, "samples"), exist_ok=True)
    manifest = os.path.join(directory, "manifest.jsonl")
    gen = corpus.generator
    with open(manifest, "w", encoding="utf-8") as fh:
        meta = {
            "kind": "meta",
            "generator": {
                "vocab_size": gen.vocab_size,
                "n_speakers": gen.n_speakers,
                "n_intents": gen.n_intents,
                "n_phrases": gen.n_phrases,
                "min_tokens": gen.min_tokens,
                "max_tokens": gen.max_tokens,
                "noise_range": list(gen.noise_range),
                "samples_per_token": gen.samples_per_token,
            },
            "splits": {
                "train": corpus.train_idx,
                "dev": corpus.dev_idx,
                "test": corpus.test_idx,
            },
        }
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for i, (spec, wave) in enumerate(corpus.utterances):
            rel = f"samples/utt_{i:06d}.f32"
            record = {
                "kind": "utterance",
                "index": i,
                "seed": spec.seed,
                "content": list(spec.content),
                "speaker": spec.speaker_id,
                "prosody": [list(p) for p in spec.prosody],
                "noise_level": spec.noise_level,
                "labels": {
                    "content_cls": content_class(spec),
                    "intent_cls": intent_label(spec, gen.n_intents),
                    "speaker_cls": spec.speaker_id,
                },
                "file": rel,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            with open(os.path.join(directory, rel), "wb") as sf:
                sf.write(wave.samples.astype("<f4").tobytes())


def load_corpus(directory) -> LabeledCorpus:
    manifest = os.path.join(directory, "manifest.jsonl")
    with open(manifest, "r", encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    meta = lines[0]
    if meta.get("kind") != "meta":
        raise ValueError("manifest does not start with a meta record")
    g = meta["generator"]
    gen = GeneratorConfig(
        vocab_size=g["vocab_size"],
        n_speakers=g["n_speakers"],
        n_intents=g["n_intents"],
        n_phrases=g["n_phrases"],
        min_tokens=g["min_tokens"],
        max_tokens=g["max_tokens"],
        noise_range=tuple(g["noise_range"]),
        samples_per_token=g["samples_per_token"],
    )
    utterances = []
    for rec in lines[1:]:
        spec = UtteranceSpec(
            content=tuple(rec["content"]),
            speaker_id=rec["speaker"],
            prosody=tuple(tuple(p) for p in rec["prosody"]),
            noise_level=rec["noise_level"],
            seed=rec["seed"],
        )
        raw = np.fromfile(os.path.join(directory, rec["file"]), dtype="<f4")
        utterances.append((spec, Waveform(raw.astype(np.float64))))
    splits = meta["splits"]
    return LabeledCorpus(
        utterances,
        gen,
        train_idx=list(splits["train"]),
        dev_idx=list(splits["dev"]),
        test_idx=list(splits["test"]),
    )
