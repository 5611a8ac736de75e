"""Gesture generation network.

Word-level pipeline per IPU: an F0 encoder turns each word's pitch
contour into one vector, a transformer encoder contextualizes the word
sequence, and a cross-modal fusion block (CMAM) attends from projected
text embeddings (master) into the speech encoding (slave). Nine causal
transformer decoders, one per output stream (AU01..AU07, RX, RY, RZ),
run at the 24 fps frame level over quantized target tokens; their
latents are concatenated and passed through a causal convolution stack
plus per-stream dense softmax heads that emit next-token probabilities.

All forward passes operate on a single IPU; batching is a loop over
IPUs with gradient reduction outside the model.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .features import STREAMS

ABLATIONS = ("none", "speech", "text", "cmam", "aur_decoder")

MODEL_CARD_FORMAT = "visage-model-card-v1"


class ModelError(ValueError):
    """Raised on invalid model configuration or inputs."""


@dataclass
class ModelConfig:
    d_model: int = 64
    n_enc_layers: int = 4
    n_dec_layers: int = 4
    n_heads: int = 4
    d_ff: int = 400
    dropout: float = 0.1
    conv_filters: int = 64
    conv_kernel: int = 3
    n_conv_layers: int = 3
    d_emb: int = 768
    n_bins: int = 256
    n_streams: int = 9
    max_f0_len: int = 100
    max_out_len: int = 124
    ablation: str = "none"

    @property
    def bos_token(self) -> int:
        return self.n_bins

    @property
    def pad_token(self) -> int:
        return self.n_bins + 1

    @property
    def vocab(self) -> int:
        return self.n_bins + 2

    @property
    def stream_names(self) -> tuple:
        return STREAMS[: self.n_streams]

    def validate(self):
        counts = {f.name: getattr(self, f.name) for f in fields(self)
                  if f.name not in ("dropout", "ablation")}
        for name, value in counts.items():
            if value < 1:
                raise ModelError(f"config field {name} must be positive, got {value}")
        if self.d_model % self.n_heads != 0:
            raise ModelError(
                f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.ablation not in ABLATIONS:
            raise ModelError(f"unknown ablation {self.ablation!r}, expected one of {ABLATIONS}")
        if self.n_streams > len(STREAMS):
            raise ModelError(f"n_streams={self.n_streams} exceeds known streams {len(STREAMS)}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ModelError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data).validate()


def config_diff(a: ModelConfig, b: ModelConfig) -> list:
    """Field names on which two configs disagree."""
    return [f.name for f in fields(ModelConfig)
            if getattr(a, f.name) != getattr(b, f.name)]


@dataclass
class ModelInput:
    """One model-ready IPU: per-word features plus quantized target tokens."""

    f0: np.ndarray                      # [n_words, max_f0_len] normalized, zero padded
    f0_len: np.ndarray                  # [n_words] true lengths
    emb: np.ndarray                     # [n_words, d_emb]
    word_mask: np.ndarray               # [n_words] True for real positions
    tokens: np.ndarray | None = None    # [n_streams, T] target bin indices
    frame_mask: np.ndarray | None = None  # [T] True for real frames
    n_frames: int = 0
    ipu_id: str = ""


@dataclass
class EncoderMemory:
    """Word-level encoder output and the fused cross-modal memory."""

    speech: Tensor                      # [n_words, d_model]
    fused: Tensor                       # [n_words, d_model]
    word_mask: np.ndarray


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Interleaved sine/cosine position table, values bounded in [-1, 1]."""
    if length < 1 or d_model < 1:
        raise ModelError(f"positional_encoding needs positive sizes, got {length}, {d_model}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    angles = pos / np.power(10000.0, (2 * (np.arange(d_model) // 2)) / d_model)
    pe = np.empty((length, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles[:, 0::2])
    pe[:, 1::2] = np.cos(angles[:, 1::2])
    return pe


def param_count(params: dict) -> int:
    """Exact number of scalar learnable parameters."""
    return int(sum(t.size for t in params.values()))


# ---------------------------------------------------------------------------
# parameter initialization


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: ModelConfig, seed: int = 0) -> dict:
    """Create every learnable tensor for the configured (possibly ablated) model.

    Ablated variants simply do not allocate the bypassed blocks, so their
    parameter counts are strictly smaller than the full model's.
    """
    config.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    d, f, k = config.d_model, config.conv_filters, config.conv_kernel
    params: dict[str, Tensor] = {}

    def add(name, shape, fan_in, fan_out):
        params[name] = Tensor(_glorot(rng, shape, fan_in, fan_out), requires_grad=True)

    def add_zeros(name, shape):
        params[name] = Tensor(np.zeros(shape), requires_grad=True)

    def add_ones(name, shape):
        params[name] = Tensor(np.ones(shape), requires_grad=True)

    def add_attention(prefix):
        for part in ("q", "k", "v", "o"):
            add(f"{prefix}.w{part}", (d, d), d, d)
            add_zeros(f"{prefix}.b{part}", (d,))

    def add_ffn(prefix):
        add(f"{prefix}.w1", (d, config.d_ff), d, config.d_ff)
        add_zeros(f"{prefix}.b1", (config.d_ff,))
        add(f"{prefix}.w2", (config.d_ff, d), config.d_ff, d)
        add_zeros(f"{prefix}.b2", (d,))

    def add_ln(prefix):
        add_ones(f"{prefix}.g", (d,))
        add_zeros(f"{prefix}.b", (d,))

    if config.ablation != "speech":
        for i in range(config.n_conv_layers):
            c_in = 1 if i == 0 else f
            add(f"f0_enc.conv{i}.w", (k, c_in, f), k * c_in, k * f)
            add_zeros(f"f0_enc.conv{i}.b", (f,))
        add("f0_enc.out.w", (f, d), f, d)
        add_zeros("f0_enc.out.b", (d,))

    # the text projection feeds the CMAM master and, under speech ablation,
    # the encoder itself; it disappears only when the text path is dead
    if config.ablation not in ("text", "cmam"):
        add("text_proj.w", (config.d_emb, d), config.d_emb, d)
        add_zeros("text_proj.b", (d,))

    for i in range(config.n_enc_layers):
        add_attention(f"enc.l{i}.self")
        add_ln(f"enc.l{i}.ln1")
        add_ffn(f"enc.l{i}.ffn")
        add_ln(f"enc.l{i}.ln2")

    if config.ablation != "cmam":
        for i in range(config.n_dec_layers):
            add_attention(f"cmam.l{i}.self")
            add_ln(f"cmam.l{i}.ln1")
            add_attention(f"cmam.l{i}.cross")
            add_ln(f"cmam.l{i}.ln2")
            add_ffn(f"cmam.l{i}.ffn")
            add_ln(f"cmam.l{i}.ln3")

    for j in range(config.n_streams):
        add(f"dec.s{j}.embed", (config.vocab, d), config.vocab, d)
        for i in range(config.n_dec_layers):
            add_attention(f"dec.s{j}.l{i}.self")
            add_ln(f"dec.s{j}.l{i}.ln1")
            add_attention(f"dec.s{j}.l{i}.cross")
            add_ln(f"dec.s{j}.l{i}.ln2")
            add_ffn(f"dec.s{j}.l{i}.ffn")
            add_ln(f"dec.s{j}.l{i}.ln3")

    if config.ablation != "aur_decoder":
        for i in range(config.n_conv_layers):
            c_in = config.n_streams * d if i == 0 else f
            add(f"aur.conv{i}.w", (k, c_in, f), k * c_in, k * f)
            add_zeros(f"aur.conv{i}.b", (f,))
        head_in = f
    else:
        head_in = d
    for j in range(config.n_streams):
        add(f"out.s{j}.w", (head_in, config.n_bins), head_in, config.n_bins)
        add_zeros(f"out.s{j}.b", (config.n_bins,))

    return params


# ---------------------------------------------------------------------------
# the network


class GestureModel:
    def __init__(self, config: ModelConfig, params: dict | None = None, init_seed: int = 0):
        self.config = config.validate()
        self.params = init_params(config, seed=init_seed) if params is None else params

    def param_count(self) -> int:
        return param_count(self.params)

    # -- building blocks ----------------------------------------------------

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        return ad.add(ad.matmul(x, self.params[f"{prefix}.w"]), self.params[f"{prefix}.b"])

    def _attention(self, prefix: str, queries: Tensor, keys: Tensor,
                   mask, probes=None) -> Tensor:
        """Multi-head scaled dot-product attention; mask marks allowed keys."""
        p = self.params
        cfg = self.config
        dh = cfg.d_model // cfg.n_heads
        q = ad.add(ad.matmul(queries, p[f"{prefix}.wq"]), p[f"{prefix}.bq"])
        k = ad.add(ad.matmul(keys, p[f"{prefix}.wk"]), p[f"{prefix}.bk"])
        v = ad.add(ad.matmul(keys, p[f"{prefix}.wv"]), p[f"{prefix}.bv"])
        heads = []
        for h in range(cfg.n_heads):
            qh = ad.slice_cols(q, h * dh, (h + 1) * dh)
            kh = ad.slice_cols(k, h * dh, (h + 1) * dh)
            vh = ad.slice_cols(v, h * dh, (h + 1) * dh)
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(dh))
            probs = ad.softmax(scores, axis=-1, mask=mask)
            if probes is not None:
                probes.append((f"{prefix}.h{h}", probs.data.copy()))
            heads.append(ad.matmul(probs, vh))
        out = ad.concat(heads, axis=1)
        return ad.add(ad.matmul(out, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        h = ad.relu(ad.add(ad.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return ad.add(ad.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _sublayer(self, x: Tensor, out: Tensor, ln_prefix: str, train, rng) -> Tensor:
        out = ad.dropout(out, self.config.dropout, train, rng)
        return ad.layer_norm(ad.add(x, out),
                             self.params[f"{ln_prefix}.g"], self.params[f"{ln_prefix}.b"])

    def _with_positions(self, x: Tensor, train, rng) -> Tensor:
        pe = Tensor(positional_encoding(x.shape[0], self.config.d_model))
        return ad.dropout(ad.add(x, pe), self.config.dropout, train, rng)

    # -- spec surface ---------------------------------------------------------

    def f0_encode(self, frames, n_frames: int, train: bool = False, rng=None) -> Tensor:
        """Encode one word's F0 window [max_f0_len] into a [1, d_model] vector.

        Convolution stack over the frame axis, mean pooling restricted to
        the true (unpadded) length, then a linear map. Zero true length
        (a degenerate silence) yields an exact zero vector.
        """
        cfg = self.config
        if n_frames == 0:
            return Tensor(np.zeros((1, cfg.d_model)))
        h = ad.reshape(Tensor(np.asarray(frames, dtype=np.float64)), (cfg.max_f0_len, 1))
        for i in range(cfg.n_conv_layers):
            h = ad.relu(ad.conv1d(h, self.params[f"f0_enc.conv{i}.w"],
                                  self.params[f"f0_enc.conv{i}.b"], padding="same"))
        pool = np.zeros((1, cfg.max_f0_len))
        pool[0, :n_frames] = 1.0 / n_frames
        pooled = ad.matmul(Tensor(pool), h)
        return self._linear(pooled, "f0_enc.out")

    def encoder_forward(self, word_vectors: Tensor, word_mask,
                        train: bool = False, rng=None, probes=None) -> Tensor:
        """Self-attention encoder over word vectors; padded words never attract mass."""
        word_mask = np.asarray(word_mask, dtype=bool)
        if not word_mask.any():
            raise ModelError("empty IPU: every word position is padding")
        x = self._with_positions(word_vectors, train, rng)
        for i in range(self.config.n_enc_layers):
            attn = self._attention(f"enc.l{i}.self", x, x, word_mask[None, :], probes)
            x = self._sublayer(x, attn, f"enc.l{i}.ln1", train, rng)
            x = self._sublayer(x, self._ffn(x, f"enc.l{i}.ffn"), f"enc.l{i}.ln2", train, rng)
        return x

    def cmam_forward(self, text_vectors: Tensor, speech_memory: Tensor, word_mask,
                     train: bool = False, rng=None, probes=None) -> Tensor:
        """Cross-modal fusion: text stream as master queries, speech memory as slave."""
        if text_vectors.shape[0] != speech_memory.shape[0]:
            raise ModelError(
                f"cmam: text rows {text_vectors.shape[0]} != speech rows {speech_memory.shape[0]}")
        word_mask = np.asarray(word_mask, dtype=bool)
        x = self._with_positions(text_vectors, train, rng)
        for i in range(self.config.n_dec_layers):
            attn = self._attention(f"cmam.l{i}.self", x, x, word_mask[None, :], probes)
            x = self._sublayer(x, attn, f"cmam.l{i}.ln1", train, rng)
            cross = self._attention(f"cmam.l{i}.cross", x, speech_memory,
                                    word_mask[None, :], probes)
            x = self._sublayer(x, cross, f"cmam.l{i}.ln2", train, rng)
            x = self._sublayer(x, self._ffn(x, f"cmam.l{i}.ffn"), f"cmam.l{i}.ln3", train, rng)
        return x

    def build_memory(self, sample: ModelInput, train: bool = False,
                     rng=None, probes=None) -> EncoderMemory:
        """Run the word-level half of the network for one IPU."""
        cfg = self.config
        word_mask = np.asarray(sample.word_mask, dtype=bool)
        if cfg.ablation == "speech":
            word_vectors = self._linear(Tensor(sample.emb), "text_proj")
        else:
            rows = [self.f0_encode(sample.f0[w], int(sample.f0_len[w]), train, rng)
                    for w in range(sample.f0.shape[0])]
            word_vectors = ad.concat(rows, axis=0)
        speech = self.encoder_forward(word_vectors, word_mask, train, rng, probes)
        if cfg.ablation == "cmam":
            return EncoderMemory(speech=speech, fused=speech, word_mask=word_mask)
        if cfg.ablation == "text":
            # positional-encoding-only master: no text content reaches the queries
            master = Tensor(np.zeros((sample.emb.shape[0], cfg.d_model)))
        else:
            master = self._linear(Tensor(sample.emb), "text_proj")
        fused = self.cmam_forward(master, speech, word_mask, train, rng, probes)
        return EncoderMemory(speech=speech, fused=fused, word_mask=word_mask)

    def decoder_forward(self, stream: int, tokens, memory: EncoderMemory,
                        train: bool = False, rng=None, probes=None) -> Tensor:
        """Causal decoder for one stream over previous target tokens.

        Position i may only see tokens at positions <= i; cross-attention
        reads the fused word-level memory.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        t = tokens.shape[0]
        if t > self.config.max_out_len:
            raise ModelError(f"decoder length {t} exceeds max_out_len {self.config.max_out_len}")
        x = ad.embedding_lookup(self.params[f"dec.s{stream}.embed"], tokens)
        x = self._with_positions(x, train, rng)
        causal = np.tril(np.ones((t, t), dtype=bool))
        for i in range(self.config.n_dec_layers):
            prefix = f"dec.s{stream}.l{i}"
            attn = self._attention(f"{prefix}.self", x, x, causal, probes)
            x = self._sublayer(x, attn, f"{prefix}.ln1", train, rng)
            cross = self._attention(f"{prefix}.cross", x, memory.fused,
                                    memory.word_mask[None, :], probes)
            x = self._sublayer(x, cross, f"{prefix}.ln2", train, rng)
            x = self._sublayer(x, self._ffn(x, f"{prefix}.ffn"), f"{prefix}.ln3", train, rng)
        return x

    def _head_logits(self, latents: list) -> list:
        """Concatenated latents -> causal conv stack -> per-stream dense logits."""
        cfg = self.config
        lengths = {lat.shape[0] for lat in latents}
        if len(lengths) != 1:
            raise ModelError(f"stream latent lengths differ: {sorted(lengths)}")
        if cfg.ablation == "aur_decoder":
            return [self._linear(lat, f"out.s{j}") for j, lat in enumerate(latents)]
        h = ad.concat(latents, axis=1)
        # left padding keeps logits at position t independent of frames > t
        for i in range(cfg.n_conv_layers):
            h = ad.relu(ad.conv1d(h, self.params[f"aur.conv{i}.w"],
                                  self.params[f"aur.conv{i}.b"], padding="causal"))
        return [self._linear(h, f"out.s{j}") for j in range(cfg.n_streams)]

    def aur_decode(self, latents: list) -> list:
        """Per-stream next-token probability rows (each row sums to 1)."""
        return [ad.softmax(lg, axis=-1) for lg in self._head_logits(latents)]

    def forward_teacher_forced(self, sample: ModelInput, train: bool = False,
                               rng=None, probes=None) -> list:
        """Logits for every stream with decoder inputs offset by one position.

        Stream j sees [BOS, y_1 .. y_{T-1}] and its logits predict
        [y_1 .. y_T]. Returns a list of [T, n_bins] logit tensors.
        """
        cfg = self.config
        if sample.tokens is None:
            raise ModelError("teacher forcing needs target tokens")
        t = sample.tokens.shape[1]
        if t == 0:
            raise ModelError("empty target sequence")
        if sample.tokens.shape[0] != cfg.n_streams:
            raise ModelError(
                f"expected {cfg.n_streams} target streams, got {sample.tokens.shape[0]}")
        memory = self.build_memory(sample, train, rng, probes)
        latents = []
        for j in range(cfg.n_streams):
            shifted = np.concatenate(([cfg.bos_token], sample.tokens[j, :-1]))
            latents.append(self.decoder_forward(j, shifted, memory, train, rng, probes))
        return self._head_logits(latents)

    def generate(self, sample: ModelInput, n_frames: int | None = None) -> np.ndarray:
        """Greedy autoregressive decoding from BOS for a known frame count.

        Consumes only the text and F0 inputs of the sample; target fields
        are never read. Returns [n_streams, n_frames] bin indices.
        """
        cfg = self.config
        n = sample.n_frames if n_frames is None else int(n_frames)
        if n < 1:
            raise ModelError(f"generation length must be positive, got {n}")
        if n > cfg.max_out_len:
            raise ModelError(f"requested length {n} exceeds max_out_len {cfg.max_out_len}")
        with ad.no_grad():
            memory = self.build_memory(sample, train=False)
            prefixes = [[cfg.bos_token] for _ in range(cfg.n_streams)]
            for _ in range(n):
                latents = [self.decoder_forward(j, prefixes[j], memory)
                           for j in range(cfg.n_streams)]
                logits = self._head_logits(latents)
                for j in range(cfg.n_streams):
                    prefixes[j].append(int(np.argmax(logits[j].data[-1])))
        return np.array([p[1:] for p in prefixes], dtype=np.int64)


# ---------------------------------------------------------------------------
# persistence


def save_checkpoint(path, model: GestureModel, extra: dict | None = None):
    merged = dict(extra or {})
    merged["model_config"] = model.config.to_dict()
    ad.save_weights(path, model.params, extra=merged)


def load_checkpoint(path):
    """Rebuild a model from a weight file; returns (model, extra dict)."""
    arrays, extra = ad.load_weights(path)
    config = ModelConfig.from_dict(extra.pop("model_config"))
    expected = init_params(config, seed=0)
    if set(expected) != set(arrays):
        missing = sorted(set(expected) - set(arrays))
        surplus = sorted(set(arrays) - set(expected))
        raise ModelError(f"checkpoint mismatch: missing {missing}, unexpected {surplus}")
    params = {}
    for name, ref in expected.items():
        if arrays[name].shape != ref.data.shape:
            raise ModelError(
                f"checkpoint tensor {name}: shape {arrays[name].shape} vs {ref.data.shape}")
        params[name] = Tensor(arrays[name], requires_grad=True)
    return GestureModel(config, params=params), extra


def write_model_card(path, config: ModelConfig, count: int | None = None):
    """Record the configuration and exact parameter count for a build."""
    card = {
        "format": MODEL_CARD_FORMAT,
        "config": config.to_dict(),
        "param_count": int(count if count is not None else
                           param_count(init_params(config, seed=0))),
    }
    with open(path, "w") as fh:
        json.dump(card, fh, indent=2, sort_keys=True)
    return card
