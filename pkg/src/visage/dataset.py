"""Dataset assembly and persistence.

The on-disk dataset is JSON-lines, one IPU per line:

    {"id", "speaker_id", "split",
     "words": [{"text", "start_s", "end_s", "f0": [..], "emb": [..]}],
     "targets": {"AU01": [..], ..., "RZ": [..]}}

F0 and target arrays are stored normalized to [0, 1] at their true
lengths; padding is applied when records are turned into model inputs.
A sidecar JSON carries the per-stream normalization bounds (computed on
the training split only), the fixed F0 range, and the quantizer.

Raw input to preprocessing is JSON-lines of utterances:

    {"id", "speaker_id",
     "words": [{"text", "start_s", "end_s"}],
     "f0": {"values": [..], "voiced": [..]},        # 5 ms hop, Hz
     "targets": {"AU01": [..], ...}}                # 24 fps, original units
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import features as ft
from .features import (F0Track, FeatureError, Ipu, QuantizerSpec, WordToken,
                       SILENCE_TEXT, SPLITS, STREAMS, TARGET_FPS)
from .model import ModelConfig, ModelInput

SIDECAR_FORMAT = "visage-sidecar-v1"


class DatasetError(ValueError):
    """Raised on malformed raw or dataset records."""


@dataclass
class Sidecar:
    """Normalization bounds and quantizer shared by every consumer of a dataset."""

    stream_bounds: dict                 # stream -> (lo, hi) in original units
    quantizer: QuantizerSpec = field(default_factory=QuantizerSpec)
    f0_bounds: tuple = (ft.F0_MIN_HZ, ft.F0_MAX_HZ)

    def to_dict(self) -> dict:
        return {
            "format": SIDECAR_FORMAT,
            "streams": {name: {"lo": float(lo), "hi": float(hi)}
                        for name, (lo, hi) in self.stream_bounds.items()},
            "quantizer": {"lo": self.quantizer.lo, "hi": self.quantizer.hi,
                          "n_bins": self.quantizer.n_bins},
            "f0": {"lo": self.f0_bounds[0], "hi": self.f0_bounds[1]},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Sidecar":
        if data.get("format") != SIDECAR_FORMAT:
            raise DatasetError(f"unsupported sidecar format: {data.get('format')!r}")
        return cls(
            stream_bounds={name: (b["lo"], b["hi"]) for name, b in data["streams"].items()},
            quantizer=QuantizerSpec(**data["quantizer"]),
            f0_bounds=(data["f0"]["lo"], data["f0"]["hi"]),
        )


def save_sidecar(path, sidecar: Sidecar):
    with open(path, "w") as fh:
        json.dump(sidecar.to_dict(), fh, sort_keys=True, indent=2)


def load_sidecar(path) -> Sidecar:
    with open(path) as fh:
        return Sidecar.from_dict(json.load(fh))


def default_sidecar_path(dataset_path) -> str:
    return str(dataset_path) + ".sidecar.json"


# ---------------------------------------------------------------------------
# dataset JSONL


def _ipu_to_obj(ipu: Ipu) -> dict:
    words = []
    for w in ipu.words:
        f0 = [] if w.f0_frames is None else w.f0_frames[: w.n_frames].tolist()
        emb = [] if w.embedding is None else np.asarray(w.embedding).tolist()
        words.append({"text": w.text, "start_s": w.start_s, "end_s": w.end_s,
                      "f0": f0, "emb": emb})
    targets = {} if ipu.targets is None else {k: np.asarray(v).tolist()
                                              for k, v in ipu.targets.items()}
    return {"id": ipu.id, "speaker_id": ipu.speaker_id, "split": ipu.split,
            "words": words, "targets": targets}


def _ipu_from_obj(obj: dict, line_no: int) -> Ipu:
    try:
        words = []
        for w in obj["words"]:
            f0 = np.asarray(w["f0"], dtype=np.float64)
            n = min(len(f0), ft.MAX_F0_LEN)
            padded = np.zeros(ft.MAX_F0_LEN)
            padded[:n] = f0[:n]
            words.append(WordToken(
                text=w["text"], start_s=w["start_s"], end_s=w["end_s"],
                f0_frames=padded, n_frames=n,
                embedding=np.asarray(w["emb"], dtype=np.float64),
                is_silence=(w["text"] == SILENCE_TEXT)))
        targets = {k: np.asarray(v, dtype=np.float64) for k, v in obj["targets"].items()}
        split = obj["split"]
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        return Ipu(id=obj["id"], speaker_id=obj["speaker_id"], words=words,
                   targets=targets or None, split=split)
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"line {line_no}: malformed IPU record ({exc})") from exc


def save_dataset(path, ipus):
    with open(path, "w") as fh:
        for ipu in ipus:
            fh.write(json.dumps(_ipu_to_obj(ipu), sort_keys=True))
            fh.write("\n")


def load_dataset(path) -> list:
    ipus = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if line.strip():
                ipus.append(_ipu_from_obj(json.loads(line), line_no))
    return ipus


@dataclass
class DatasetBundle:
    """Records plus the sidecar needed to interpret them."""

    ipus: list
    sidecar: Sidecar

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise DatasetError(f"unknown split {name!r}, expected one of {SPLITS}")
        return [ipu for ipu in self.ipus if ipu.split == name]

    @property
    def quantizer(self) -> QuantizerSpec:
        return self.sidecar.quantizer


def load_bundle(dataset_path, sidecar_path=None) -> DatasetBundle:
    sidecar_path = sidecar_path or default_sidecar_path(dataset_path)
    return DatasetBundle(ipus=load_dataset(dataset_path), sidecar=load_sidecar(sidecar_path))


# ---------------------------------------------------------------------------
# raw utterances -> dataset


def parse_raw_utterance(obj: dict, line_no: int) -> dict:
    """Validate one raw utterance record, naming the offending line on error."""
    def fail(msg):
        raise DatasetError(f"line {line_no}: {msg}")

    if not isinstance(obj, dict):
        fail("utterance must be a JSON object")
    for key in ("id", "speaker_id", "words", "f0", "targets"):
        if key not in obj:
            fail(f"missing field {key!r}")
    words = obj["words"]
    if not words:
        fail("utterance has no words")
    for i, w in enumerate(words):
        for key in ("text", "start_s", "end_s"):
            if key not in w:
                fail(f"word {i} missing {key!r}")
        if w["end_s"] <= w["start_s"]:
            fail(f"word {i} ({w['text']!r}) has non-positive duration")
    f0 = obj["f0"]
    if "values" not in f0:
        fail("f0 block missing 'values'")
    values = np.asarray(f0["values"], dtype=np.float64)
    voiced = np.asarray(f0.get("voiced", values > 0), dtype=bool)
    if voiced.shape != values.shape:
        fail("f0 voiced flags do not match values length")
    targets = obj["targets"]
    missing = [s for s in STREAMS if s not in targets]
    if missing:
        fail(f"targets missing streams {missing}")
    lengths = {len(targets[s]) for s in STREAMS}
    if len(lengths) != 1:
        fail(f"target streams have differing lengths {sorted(lengths)}")
    fps = float(obj.get("fps", TARGET_FPS))
    if fps != TARGET_FPS:
        fail(f"unsupported target frame rate {fps}, expected {TARGET_FPS}")
    return {"id": obj["id"], "speaker_id": obj["speaker_id"], "words": words,
            "f0_values": values, "f0_voiced": voiced,
            "targets": {s: np.asarray(targets[s], dtype=np.float64) for s in STREAMS}}


def load_raw_utterances(path) -> list:
    utts = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {line_no}: invalid JSON ({exc})") from exc
            utts.append(parse_raw_utterance(obj, line_no))
    return utts


def _slice_targets(streams: dict, start_s: float, end_s: float):
    n = len(next(iter(streams.values())))
    lo = int(math.ceil(start_s * TARGET_FPS - 1e-9))
    hi = min(int(math.ceil(end_s * TARGET_FPS - 1e-9)), n)
    hi = min(hi, lo + ft.MAX_OUT_LEN)
    if hi <= lo:
        return None
    return {name: values[lo:hi].copy() for name, values in streams.items()}


def _embedding_for(word: WordToken, vectors, d_emb: int, silence_vec):
    if word.is_silence:
        return silence_vec if silence_vec is not None else ft.pseudo_embed(SILENCE_TEXT, d_emb)
    if vectors is not None:
        return vectors.pop(0)
    return ft.pseudo_embed(word.text, d_emb)


@dataclass
class PreprocessStats:
    n_ipus: int = 0
    n_words: int = 0
    n_silences: int = 0
    n_dropped: int = 0
    split_counts: dict = field(default_factory=dict)


def assign_splits(ipus, seed: int, train_frac: float = 0.8, val_frac: float = 0.1,
                  si_speakers=None, si_fraction: float = 0.0) -> list:
    """Shuffle IPUs and tag splits; held-out speakers form the SI test set."""
    if train_frac < 0 or val_frac < 0 or train_frac + val_frac > 1.0 + 1e-9:
        raise DatasetError(f"bad split fractions train={train_frac} val={val_frac}")
    speakers = sorted({ipu.speaker_id for ipu in ipus})
    if si_speakers is None and si_fraction > 0 and len(speakers) > 1:
        rng = np.random.Generator(np.random.PCG64([seed, 1]))
        n_si = max(1, int(round(si_fraction * len(speakers))))
        n_si = min(n_si, len(speakers) - 1)
        si_speakers = set(rng.permutation(speakers)[:n_si].tolist())
    si_speakers = set(si_speakers or ())
    unknown = si_speakers - set(speakers)
    if unknown:
        raise DatasetError(f"SI speakers not present in corpus: {sorted(unknown)}")

    seen = [ipu for ipu in ipus if ipu.speaker_id not in si_speakers]
    for ipu in ipus:
        if ipu.speaker_id in si_speakers:
            ipu.split = "test_SI"
    rng = np.random.Generator(np.random.PCG64([seed, 2]))
    order = rng.permutation(len(seen))
    n_train = int(round(train_frac * len(seen)))
    n_val = int(round(val_frac * len(seen)))
    for rank, idx in enumerate(order):
        if rank < n_train:
            seen[idx].split = "train"
        elif rank < n_train + n_val:
            seen[idx].split = "val_SD"
        else:
            seen[idx].split = "test_SD"
    return ipus


def compute_stream_bounds(ipus) -> dict:
    """Per-stream min/max over the training split, in original units."""
    train = [ipu for ipu in ipus if ipu.split == "train"]
    if not train:
        raise DatasetError("no training IPUs to compute normalization bounds from")
    bounds = {}
    for name in STREAMS:
        values = np.concatenate([ipu.targets[name] for ipu in train])
        lo, hi = float(values.min()), float(values.max())
        if hi <= lo:
            raise DatasetError(f"degenerate range for stream {name}: [{lo}, {hi}]")
        bounds[name] = (lo, hi)
    return bounds


def preprocess(utterances, seed: int = 0, d_emb: int = 768, n_bins: int = 256,
               train_frac: float = 0.8, val_frac: float = 0.1,
               si_speakers=None, si_fraction: float = 0.0,
               embeddings: dict | None = None, silence_vec=None):
    """Turn raw utterances into a normalized, IPU-segmented dataset bundle.

    ``embeddings`` optionally maps utterance id -> list of vectors, one per
    raw word in order; otherwise deterministic pseudo embeddings are used.
    Returns (DatasetBundle, PreprocessStats).
    """
    stats = PreprocessStats()
    ipus = []
    for utt in utterances:
        track = ft.prepare_f0(F0Track(utt["f0_values"], utt["f0_voiced"]))
        words = [WordToken(w["text"], float(w["start_s"]), float(w["end_s"]))
                 for w in utt["words"]]
        vectors = None
        if embeddings is not None:
            vectors = [np.asarray(v, dtype=np.float64) for v in embeddings[utt["id"]]]
            if len(vectors) != len(words):
                raise DatasetError(
                    f"utterance {utt['id']}: {len(vectors)} embeddings for {len(words)} words")
        for k, ipu in enumerate(ft.segment_ipus(words, speaker_id=utt["speaker_id"])):
            ipu.id = f"{utt['id']}:{k}"
            targets = _slice_targets(utt["targets"], ipu.start_s, ipu.end_s)
            if targets is None:
                stats.n_dropped += 1
                continue
            ft.assign_word_f0(ipu, track)
            for w in ipu.words:
                w.embedding = _embedding_for(w, vectors, d_emb, silence_vec)
            ipu.targets = targets
            ipus.append(ipu)

    assign_splits(ipus, seed=seed, train_frac=train_frac, val_frac=val_frac,
                  si_speakers=si_speakers, si_fraction=si_fraction)
    bounds = compute_stream_bounds(ipus)
    for ipu in ipus:
        ipu.targets = {name: ft.normalize_stream(v, *bounds[name])
                       for name, v in ipu.targets.items()}

    stats.n_ipus = len(ipus)
    stats.n_words = sum(ipu.n_real_words for ipu in ipus)
    stats.n_silences = sum(len(ipu.words) - ipu.n_real_words for ipu in ipus)
    for name in SPLITS:
        stats.split_counts[name] = sum(1 for ipu in ipus if ipu.split == name)
    sidecar = Sidecar(stream_bounds=bounds, quantizer=QuantizerSpec(0.0, 1.0, n_bins))
    return DatasetBundle(ipus=ipus, sidecar=sidecar), stats


# ---------------------------------------------------------------------------
# bridge to the model


def make_model_input(ipu: Ipu, quantizer: QuantizerSpec, config: ModelConfig,
                     require_targets: bool = True) -> ModelInput:
    """Pad, truncate and quantize one IPU into arrays the network consumes."""
    n_words = len(ipu.words)
    if n_words == 0:
        raise DatasetError(f"IPU {ipu.id}: no words")
    f0 = np.zeros((n_words, config.max_f0_len))
    f0_len = np.zeros(n_words, dtype=np.int64)
    emb = np.zeros((n_words, config.d_emb))
    for i, w in enumerate(ipu.words):
        if w.f0_frames is None or w.embedding is None:
            raise DatasetError(f"IPU {ipu.id}: word {w.text!r} lacks F0 or embedding")
        if len(w.embedding) != config.d_emb:
            raise DatasetError(
                f"IPU {ipu.id}: embedding dim {len(w.embedding)} != config d_emb {config.d_emb}")
        n = min(w.n_frames, config.max_f0_len)
        f0[i, :n] = w.f0_frames[:n]
        f0_len[i] = n
        emb[i] = w.embedding

    tokens = None
    frame_mask = None
    if ipu.targets is not None:
        names = config.stream_names
        missing = [s for s in names if s not in ipu.targets]
        if missing:
            raise DatasetError(f"IPU {ipu.id}: targets missing streams {missing}")
        t = min(ipu.n_frames, config.max_out_len)
        tokens = np.stack([quantizer.quantize(ipu.targets[s][:t]) for s in names])
        frame_mask = np.ones(t, dtype=bool)
        n_frames = t
    else:
        if require_targets:
            raise DatasetError(f"IPU {ipu.id}: targets required but absent")
        n_frames = min(ipu.n_frames, config.max_out_len)

    return ModelInput(f0=f0, f0_len=f0_len, emb=emb,
                      word_mask=np.ones(n_words, dtype=bool),
                      tokens=tokens, frame_mask=frame_mask,
                      n_frames=n_frames, ipu_id=ipu.id)
