"""The small pre-trainable encoder: strided-conv feature extractor plus a
transformer stack, with utterance-level pooling and a weighted layer sum
for downstream heads.

Activation levels: level 0 is the feature-extractor output (after any
mask substitution), levels 1..n_layers are the transformer layer outputs.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .optim import Adam
from .rng import child_rng


@dataclass(frozen=True)
class EncoderConfig:
    conv_strides: tuple = (4, 4, 4)
    feature_dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ffn_dim: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        if self.feature_dim % self.n_heads != 0:
            raise ValueError(f"feature_dim {self.feature_dim} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if any(s < 1 for s in self.conv_strides):
            raise ValueError(f"conv strides must be >= 1, got {self.conv_strides}")

    @property
    def downsample(self) -> int:
        return int(np.prod(self.conv_strides))

    @property
    def conv_channels(self) -> tuple:
        """Channel widths after each conv; ramp up to feature_dim."""
        n = len(self.conv_strides)
        return tuple(max(8, self.feature_dim >> (n - 1 - i)) for i in range(n - 1)) + (self.feature_dim,)


def parameter_shapes(config: EncoderConfig) -> dict:
    """Canonical name -> shape map for every learnable tensor."""
    d, ffn = config.feature_dim, config.ffn_dim
    shapes = {}
    cin = 1
    for i, (stride, cout) in enumerate(zip(config.conv_strides, config.conv_channels)):
        shapes[f"conv{i}.w"] = (stride * cin, cout)
        shapes[f"conv{i}.b"] = (cout,)
        cin = cout
    shapes["input_ln.gain"] = (d,)
    shapes["input_ln.bias"] = (d,)
    for i in range(config.n_layers):
        p = f"layer{i}"
        shapes[f"{p}.attn.wqkv"] = (d, 3 * d)
        shapes[f"{p}.attn.bqkv"] = (3 * d,)
        shapes[f"{p}.attn.wo"] = (d, d)
        shapes[f"{p}.attn.bo"] = (d,)
        shapes[f"{p}.ln1.gain"] = (d,)
        shapes[f"{p}.ln1.bias"] = (d,)
        shapes[f"{p}.ln2.gain"] = (d,)
        shapes[f"{p}.ln2.bias"] = (d,)
        shapes[f"{p}.ffn.w1"] = (d, ffn)
        shapes[f"{p}.ffn.b1"] = (ffn,)
        shapes[f"{p}.ffn.w2"] = (ffn, d)
        shapes[f"{p}.ffn.b2"] = (d,)
    shapes["mask_embedding"] = (d,)
    shapes["recon.w"] = (d, d)
    shapes["recon.b"] = (d,)
    return shapes


@dataclass
class EncoderState:
    """All learnable parameters plus the config they were built for."""

    config: EncoderConfig
    params: dict
    rng_seed: int

    @classmethod
    def initialize(cls, config: EncoderConfig, seed: int = 0) -> "EncoderState":
        params = {}
        for name, shape in parameter_shapes(config).items():
            leaf = name.split(".")[-1]
            if leaf == "gain":
                data = np.ones(shape)
            elif leaf.startswith("b"):
                data = np.zeros(shape)
            else:
                fan_in = shape[0] if len(shape) > 1 else config.feature_dim
                bound = 1.0 / math.sqrt(fan_in)
                data = child_rng(seed, "init", name).uniform(-bound, bound, size=shape)
            params[name] = T.Tensor(data, requires_grad=True)
        return cls(config=config, params=params, rng_seed=seed)

    def copy(self) -> "EncoderState":
        return EncoderState(
            config=self.config,
            params={k: v.copy() for k, v in self.params.items()},
            rng_seed=self.rng_seed,
        )


@dataclass
class LayerActivations:
    """Per-level frame matrices; one entry per encoder level."""

    levels: list
    frame_count: int


@functools.lru_cache(maxsize=64)
def _positional_encoding(m: int, d: int) -> np.ndarray:
    pos = np.arange(m, dtype=np.float64)[:, None]
    dim = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * dim / d)
    pe = np.zeros((m, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def _samples_of(waveform) -> np.ndarray:
    samples = waveform.samples if hasattr(waveform, "samples") else waveform
    return np.asarray(samples, dtype=np.float64)


def extract_features(state: EncoderState, waveform) -> T.Tensor:
    """Run the strided-conv stack; m frames of feature_dim each."""
    samples = _samples_of(waveform)
    receptive = state.config.downsample
    if samples.shape[0] < receptive:
        raise ValueError(
            f"waveform length {samples.shape[0]} below the conv receptive field {receptive}"
        )
    h = T.Tensor(samples[:, None])
    for i, stride in enumerate(state.config.conv_strides):
        h = T.gelu(T.strided_conv1d(h, state.params[f"conv{i}.w"], state.params[f"conv{i}.b"], stride))
    return h


def frame_span_for_raw(mask_span, downsample: int, frame_count: int):
    """Feature frames overlapping a raw-sample span [start, start+length)."""
    start, length = mask_span
    if length <= 0:
        return None
    first = max(0, start // downsample)
    last = min(frame_count, -(-(start + length) // downsample))  # ceil division
    if first >= last:
        return None
    return first, last


def encode(state: EncoderState, waveform, mode: str = "eval", rng=None,
           mask_span=None, dropout_rate=None) -> LayerActivations:
    """Full forward pass; returns n_layers+1 activation levels.

    Eval mode is deterministic. Train mode needs an RNG stream and applies
    dropout at three sites sharing one rate: the frame embeddings entering
    the transformer, the attention probabilities, and each sublayer output
    before its residual add.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    if train and rng is None:
        raise ValueError("train mode needs an RNG stream for dropout")
    rate = state.config.dropout if dropout_rate is None else dropout_rate
    keep = 1.0 - rate
    cfg = state.config
    p = state.params

    feats = extract_features(state, waveform)
    m = feats.shape[0]
    if mask_span is not None:
        span = frame_span_for_raw(mask_span, cfg.downsample, m)
        if span is not None:
            row_mask = np.zeros(m, dtype=bool)
            row_mask[span[0]:span[1]] = True
            feats = T.substitute_rows(feats, row_mask, p["mask_embedding"])

    levels = [feats]
    h = T.layernorm(feats, p["input_ln.gain"], p["input_ln.bias"])
    h = T.add(h, T.Tensor(_positional_encoding(m, cfg.feature_dim)))
    if train and keep < 1.0:
        h = T.dropout(h, keep, rng)

    attn_keep = keep if train else 1.0
    for i in range(cfg.n_layers):
        prefix = f"layer{i}"
        ctx = T.multi_head_attention(h, p[f"{prefix}.attn.wqkv"], p[f"{prefix}.attn.bqkv"],
                                     cfg.n_heads, keep_prob=attn_keep, rng=rng)
        attn = T.add(T.matmul(ctx, p[f"{prefix}.attn.wo"]), p[f"{prefix}.attn.bo"])
        if train and keep < 1.0:
            attn = T.dropout(attn, keep, rng)
        h = T.layernorm(T.add(h, attn), p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.bias"])

        ffn = T.add(T.matmul(T.gelu(T.add(T.matmul(h, p[f"{prefix}.ffn.w1"]), p[f"{prefix}.ffn.b1"])),
                             p[f"{prefix}.ffn.w2"]), p[f"{prefix}.ffn.b2"])
        if train and keep < 1.0:
            ffn = T.dropout(ffn, keep, rng)
        h = T.layernorm(T.add(h, ffn), p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.bias"])

        levels.append(h)

    return LayerActivations(levels=levels, frame_count=m)


def utterance_embedding(acts: LayerActivations, level: int) -> T.Tensor:
    """Mean of one level's frame vectors."""
    if not 0 <= level < len(acts.levels):
        raise IndexError(f"level {level} out of range [0, {len(acts.levels) - 1}]")
    return T.mean_over_axis(acts.levels[level], axis=0)


def weighted_layer_sum(acts: LayerActivations, logits: T.Tensor) -> T.Tensor:
    """Softmax-weighted combination of all levels; differentiable in logits."""
    n = len(acts.levels)
    if logits.shape != (n,):
        raise T.ShapeError(f"layer logits shape {logits.shape} does not match {n} levels")
    weights = T.softmax(logits, axis=-1)
    out = None
    for k, level in enumerate(acts.levels):
        term = T.scale_by(level, T.take_scalar(weights, k))
        out = term if out is None else T.add(out, term)
    return out


# ---------------------------------------------------------------------------
# base pre-training: masked-frame reconstruction


def _masked_recon_loss(state, waveform, frame_span, mode, rng):
    """L2 between the recon head's output and the unmasked conv frames."""
    target = extract_features(state, waveform).data[frame_span[0]:frame_span[1]]
    raw_span = (frame_span[0] * state.config.downsample,
                (frame_span[1] - frame_span[0]) * state.config.downsample)
    acts = encode(state, waveform, mode=mode, rng=rng, mask_span=raw_span)
    pred = T.add(T.matmul(acts.levels[-1], state.params["recon.w"]), state.params["recon.b"])
    pred_rows = T.take_rows(pred, np.arange(frame_span[0], frame_span[1]))
    diff = T.sub(pred_rows, T.Tensor(target))
    return T.mean_all(T.mul(diff, diff))


def _pick_frame_span(rng, m, fraction=0.2):
    span = max(1, math.ceil(fraction * m))
    span = min(span, m)
    start = int(rng.integers(0, m - span + 1))
    return start, start + span


def pretrain_base(state: EncoderState, corpus, budget: int, batch_size: int = 8,
                  learning_rate: float = 1e-3, mask_fraction: float = 0.2,
                  seed: int = 0) -> EncoderState:
    """Train with masked-frame reconstruction; stands in for a released checkpoint."""
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    if len(corpus.train_idx) == 0:
        raise ValueError("cannot pretrain on an empty corpus")
    state = state.copy()
    if budget == 0:
        return state

    rng = child_rng(seed, "pretrain")
    adam = Adam(learning_rate)
    downsample = state.config.downsample
    train_idx = list(corpus.train_idx)

    for _ in range(budget):
        batch = rng.choice(len(train_idx), size=min(batch_size, len(train_idx)), replace=False)
        with T.Tape() as tape:
            for p in state.params.values():
                tape.watch(p)
            total = None
            for b in batch:
                wave = corpus.waveform(train_idx[int(b)])
                m = wave.length // downsample
                span = _pick_frame_span(rng, m, mask_fraction)
                loss = _masked_recon_loss(state, wave, span, "train", rng)
                total = loss if total is None else T.add(total, loss)
            total = T.scale(total, 1.0 / len(batch))
        if not np.isfinite(total.data):
            raise RuntimeError("non-finite reconstruction loss during pre-training")
        grads = T.backward(tape, total)
        grad_by_name = {name: grads[p.node_id] for name, p in state.params.items()}
        state.params = adam.step(state.params, grad_by_name)
    return state


def reconstruction_loss(state: EncoderState, corpus, indices, mask_fraction: float = 0.2,
                        seed: int = 0) -> float:
    """Mean eval-mode masked-reconstruction loss over the given utterances."""
    rng = child_rng(seed, "recon-eval")
    downsample = state.config.downsample
    losses = []
    for i in indices:
        wave = corpus.waveform(i)
        m = wave.length // downsample
        span = _pick_frame_span(rng, m, mask_fraction)
        losses.append(_masked_recon_loss(state, wave, span, "eval", None).item())
    return float(np.mean(losses))
