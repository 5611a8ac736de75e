"""Feature preparation: F0 tracks, word timing, IPU segmentation, quantization.

Raw per-frame F0 arrives at a 5 ms hop with a voicing flag per frame.
Preparation interpolates unvoiced gaps, clips to the 50-550 Hz speaking
range, segments timed words into inter-pausal units (IPUs) at silent
pauses longer than 0.2 s, attaches per-word F0 frame windows, and maps
normalized target streams to discrete token bins.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

F0_HOP_S = 0.005
F0_MIN_HZ = 50.0
F0_MAX_HZ = 550.0
IPU_PAUSE_S = 0.2
SILENCE_TEXT = ","
TARGET_FPS = 24.0

MAX_F0_LEN = 100
MAX_OUT_LEN = 124

STREAMS = ("AU01", "AU02", "AU04", "AU05", "AU06", "AU07", "RX", "RY", "RZ")
AU_STREAMS = STREAMS[:6]

SPLITS = ("train", "val_SD", "test_SD", "test_SI")


class FeatureError(ValueError):
    """Raised when feature preparation preconditions are violated."""


@dataclass
class F0Track:
    """Per-frame pitch values at a fixed 5 ms hop with voicing flags."""

    values: np.ndarray          # [T] Hz
    voiced: np.ndarray          # [T] bool
    hop_s: float = F0_HOP_S

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.voiced = np.asarray(self.voiced, dtype=bool)
        if self.values.shape != self.voiced.shape:
            raise FeatureError(
                f"F0 track values/voiced length mismatch: {self.values.shape} vs {self.voiced.shape}")

    @property
    def duration_s(self) -> float:
        return len(self.values) * self.hop_s


@dataclass
class WordToken:
    """One spoken word (or an inserted silence token) with timing and features."""

    text: str
    start_s: float
    end_s: float
    f0_frames: np.ndarray | None = None   # [MAX_F0_LEN] normalized, zero padded
    n_frames: int = 0                     # true (unpadded) F0 length
    embedding: np.ndarray | None = None   # [d_emb]
    is_silence: bool = False

    def __post_init__(self):
        if self.end_s <= self.start_s:
            raise FeatureError(
                f"word {self.text!r}: end {self.end_s} must be after start {self.start_s}")


@dataclass
class Ipu:
    """Inter-pausal unit: words plus frame-level target streams at 24 fps."""

    id: str
    speaker_id: str
    words: list = field(default_factory=list)
    targets: dict | None = None           # stream name -> [N'] normalized values
    split: str = "train"

    @property
    def start_s(self) -> float:
        return self.words[0].start_s

    @property
    def end_s(self) -> float:
        return self.words[-1].end_s

    @property
    def n_frames(self) -> int:
        if not self.targets:
            return min(MAX_OUT_LEN, int(round((self.end_s - self.start_s) * TARGET_FPS)))
        return len(next(iter(self.targets.values())))

    @property
    def n_real_words(self) -> int:
        return sum(1 for w in self.words if not w.is_silence)


@dataclass(frozen=True)
class QuantizerSpec:
    """Uniform scalar quantizer over [lo, hi] with n_bins token bins."""

    lo: float = 0.0
    hi: float = 1.0
    n_bins: int = 256

    def __post_init__(self):
        if not self.lo < self.hi:
            raise FeatureError(f"quantizer needs lo < hi, got [{self.lo}, {self.hi}]")
        if self.n_bins < 1:
            raise FeatureError(f"quantizer needs at least one bin, got {self.n_bins}")

    def quantize(self, x):
        """Map values to bin indices; out-of-range values clamp to edge bins."""
        x = np.clip(np.asarray(x, dtype=np.float64), self.lo, self.hi)
        bins = np.floor((x - self.lo) / (self.hi - self.lo) * self.n_bins)
        return np.minimum(bins, self.n_bins - 1).astype(np.int64)

    def dequantize(self, bins):
        """Map bin indices back to bin-center values."""
        bins = np.asarray(bins, dtype=np.int64)
        if bins.size and (bins.min() < 0 or bins.max() >= self.n_bins):
            raise FeatureError(f"bin index out of range for {self.n_bins} bins")
        width = (self.hi - self.lo) / self.n_bins
        return self.lo + (bins + 0.5) * width


def quantize(x, q: QuantizerSpec):
    return q.quantize(x)


def dequantize(bins, q: QuantizerSpec):
    return q.dequantize(bins)


def interpolate_f0(track: F0Track) -> F0Track:
    """Fill unvoiced frames by linear interpolation between voiced neighbors.

    Interior unvoiced runs interpolate linearly; runs at the edges take
    the nearest voiced value (constant extension). Fails on tracks with
    no voiced frame at all.
    """
    if not track.voiced.any():
        raise FeatureError("empty voicing")
    idx = np.flatnonzero(track.voiced)
    filled = np.interp(np.arange(len(track.values)), idx, track.values[idx])
    out = track.values.copy()
    out[~track.voiced] = filled[~track.voiced]
    return F0Track(out, np.ones_like(track.voiced), track.hop_s)


def clip_f0(track: F0Track) -> F0Track:
    """Clamp every frame into the human speech range [50, 550] Hz."""
    return replace(track, values=np.clip(track.values, F0_MIN_HZ, F0_MAX_HZ))


def prepare_f0(track: F0Track) -> F0Track:
    """Interpolate then clip; idempotent on already prepared tracks."""
    return clip_f0(interpolate_f0(track))


def normalize_f0(values_hz) -> np.ndarray:
    """Map prepared F0 from [50, 550] Hz onto [0, 1]."""
    return normalize_stream(values_hz, F0_MIN_HZ, F0_MAX_HZ)


def segment_ipus(words, id_prefix: str = "ipu", speaker_id: str = "") -> list:
    """Group timed words into IPUs split at silent pauses longer than 0.2 s.

    Gaps in (0, 0.2] s stay inside the IPU and become an explicit silence
    token spanning the pause. Words must be sorted and non-overlapping.
    """
    ipus = []
    current: list[WordToken] = []

    def close():
        if current:
            ipus.append(Ipu(id=f"{id_prefix}{len(ipus):04d}",
                            speaker_id=speaker_id, words=list(current)))
            current.clear()

    prev_end = None
    for w in words:
        if prev_end is not None:
            if w.start_s < prev_end - 1e-9:
                raise FeatureError(
                    f"word {w.text!r} at {w.start_s:.3f}s overlaps previous word ending {prev_end:.3f}s")
            gap = w.start_s - prev_end
            if gap > IPU_PAUSE_S:
                close()
            elif gap > 1e-9:
                current.append(WordToken(SILENCE_TEXT, prev_end, w.start_s, is_silence=True))
        current.append(w)
        prev_end = w.end_s
    close()
    return ipus


def assign_word_f0(ipu: Ipu, track: F0Track) -> Ipu:
    """Attach to each word the normalized F0 frames inside [start_s, end_s).

    Sequences longer than MAX_F0_LEN truncate; shorter ones zero-pad with
    the true length recorded. The track must already be prepared.
    """
    hop = track.hop_s
    n_total = len(track.values)
    for w in ipu.words:
        lo = int(math.ceil(w.start_s / hop - 1e-9))
        hi = int(math.ceil(w.end_s / hop - 1e-9))
        if lo < 0 or hi > n_total:
            raise FeatureError(
                f"timing out of range: word {w.text!r} [{w.start_s}, {w.end_s})s "
                f"vs track of {n_total * hop:.3f}s")
        frames = normalize_f0(track.values[lo:hi])
        n = min(len(frames), MAX_F0_LEN)
        padded = np.zeros(MAX_F0_LEN, dtype=np.float64)
        padded[:n] = frames[:n]
        w.f0_frames = padded
        w.n_frames = n
    return ipu


def normalize_stream(values, lo: float, hi: float) -> np.ndarray:
    """Affine map of values onto [0, 1] given bounds, clamping outliers."""
    if hi <= lo:
        raise FeatureError(f"degenerate range [{lo}, {hi}]")
    values = np.asarray(values, dtype=np.float64)
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0)


def denormalize_stream(values, lo: float, hi: float) -> np.ndarray:
    """Inverse of normalize_stream for in-range values."""
    if hi <= lo:
        raise FeatureError(f"degenerate range [{lo}, {hi}]")
    return np.asarray(values, dtype=np.float64) * (hi - lo) + lo


def pseudo_embed(text: str, d_emb: int = 768) -> np.ndarray:
    """Deterministic stand-in embedding derived from a hash of the text.

    Components are uniform in [-1, 1]; the same text always maps to the
    same vector, across runs and platforms. Used when real precomputed
    word embeddings are not supplied.
    """
    if d_emb <= 0:
        raise FeatureError(f"embedding dimension must be positive, got {d_emb}")
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    seed = int.from_bytes(digest, "little")
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.uniform(-1.0, 1.0, size=d_emb)
