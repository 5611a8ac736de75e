"""Synthetic raw corpora for tests, demos and desk-scale experiments.

Utterances carry sinusoidal F0 contours with unvoiced stretches and
sinusoidal AU/rotation target streams that cross the 0.5 activation
line, so every objective metric is well defined. The paired corpus
builds IPU pairs whose targets share a common first half and diverge in
the second, with the two members distinguishable only through one input
modality; that makes modality ablations measurably worse at teacher
forcing, which the ablation harness relies on.
"""

from __future__ import annotations

import json

import numpy as np

from .features import F0_HOP_S, STREAMS, TARGET_FPS

WORDS = ("the", "quick", "brown", "fox", "jumps", "over", "lazy", "dog",
         "while", "rain", "falls", "softly", "near", "green", "hills", "today")


def _f0_block(duration_s: float, base_hz: float, depth_hz: float, rate_hz: float,
              phase: float, rng) -> dict:
    n = int(round(duration_s / F0_HOP_S))
    t = np.arange(n) * F0_HOP_S
    values = base_hz + depth_hz * np.sin(2 * np.pi * rate_hz * t + phase)
    voiced = np.ones(n, dtype=bool)
    for _ in range(rng.integers(1, 3)):
        start = rng.integers(0, max(1, n - 8))
        voiced[start:start + rng.integers(2, 6)] = False
    voiced[0] = voiced[-1] = True
    values = np.where(voiced, values, 0.0)
    return {"values": values.tolist(), "voiced": voiced.tolist()}


def _target_block(duration_s: float, params: dict) -> dict:
    n = int(round(duration_s * TARGET_FPS)) + 1
    t = np.arange(n) / TARGET_FPS
    out = {}
    for name in STREAMS:
        amp, rate, phase, offset = params[name]
        out[name] = (offset + amp * np.sin(2 * np.pi * rate * t + phase)).tolist()
    return out


def _word_row(texts, rng, start: float = 0.05):
    words = []
    cursor = start
    for text in texts:
        dur = float(rng.uniform(0.22, 0.42))
        words.append({"text": text, "start_s": round(cursor, 3),
                      "end_s": round(cursor + dur, 3)})
        cursor += dur + float(rng.uniform(0.02, 0.12))
    return words, cursor


def _stream_params(rng) -> dict:
    params = {}
    for name in STREAMS:
        amp = float(rng.uniform(0.3, 0.45))
        rate = float(rng.uniform(0.5, 1.4))
        phase = float(rng.uniform(0, 2 * np.pi))
        params[name] = (amp, rate, phase, 0.5)
    return params


def make_corpus(n_utterances: int = 8, n_speakers: int = 1, words_per_utt: int = 3,
                seed: int = 0) -> list:
    """Independent utterances; one IPU each unless gaps fall out otherwise."""
    rng = np.random.Generator(np.random.PCG64([seed, 10]))
    utts = []
    for i in range(n_utterances):
        texts = rng.choice(WORDS, size=words_per_utt, replace=False).tolist()
        words, end = _word_row(texts, rng)
        utts.append({
            "id": f"utt{i:03d}",
            "speaker_id": f"spk{i % n_speakers}",
            "words": words,
            "f0": _f0_block(end + 0.05, float(rng.uniform(110, 180)),
                            float(rng.uniform(30, 60)), float(rng.uniform(0.6, 1.2)),
                            float(rng.uniform(0, 2 * np.pi)), rng),
            "targets": _target_block(end + 0.05, _stream_params(rng)),
        })
    return utts


def make_paired_corpus(seed: int = 0) -> list:
    """Eight single-IPU utterances in four pairs for the ablation harness.

    Two pairs share their text and differ only in F0 ("speech" pairs);
    two pairs share their F0 and differ only in text ("text" pairs).
    Within each pair the target streams agree on the first half of the
    frames and diverge afterwards, so the diverging frames can only be
    predicted from the distinguishing modality.
    """
    rng = np.random.Generator(np.random.PCG64([seed, 11]))
    utts = []
    used = set()

    def fresh_texts(k=2):
        while True:
            texts = tuple(rng.choice(WORDS, size=k, replace=False).tolist())
            if texts not in used:
                used.add(texts)
                return list(texts)

    def diverging_targets(duration, rng):
        base = _stream_params(rng)
        n = int(round(duration * TARGET_FPS)) + 1
        half = n // 2
        t = np.arange(n) / TARGET_FPS
        variants = []
        for sign in (1.0, -1.0):
            streams = {}
            for name in STREAMS:
                amp, rate, phase, offset = base[name]
                curve = offset + amp * np.sin(2 * np.pi * rate * t + phase)
                tail = offset + sign * amp * np.cos(2 * np.pi * (rate + 0.4) * t[half:] + phase)
                curve = curve.copy()
                curve[half:] = tail
                streams[name] = curve.tolist()
            variants.append(streams)
        return variants

    idx = 0
    for pair, kind in enumerate(("speech", "speech", "text", "text")):
        shared_words, end = _word_row(fresh_texts(), rng)
        duration = end + 0.05
        target_a, target_b = diverging_targets(duration, rng)
        shared_f0 = _f0_block(duration, 150.0, 45.0, 0.9, float(rng.uniform(0, 2 * np.pi)), rng)
        for member, targets in (("a", target_a), ("b", target_b)):
            if kind == "speech":
                words = shared_words
                f0 = _f0_block(duration, 120.0 if member == "a" else 190.0,
                               50.0, 0.7 if member == "a" else 1.3,
                               float(rng.uniform(0, 2 * np.pi)), rng)
            else:
                words_texts = fresh_texts()
                words = [dict(w, text=words_texts[i]) for i, w in enumerate(shared_words)]
                f0 = shared_f0
            utts.append({
                "id": f"pair{pair}{member}",
                "speaker_id": "spk0",
                "words": words,
                "f0": f0,
                "targets": targets,
            })
            idx += 1
    return utts


def write_raw_jsonl(utterances, path):
    with open(path, "w") as fh:
        for utt in utterances:
            fh.write(json.dumps(utt, sort_keys=True))
            fh.write("\n")
