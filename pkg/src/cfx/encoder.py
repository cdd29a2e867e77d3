"""Transformer encoder with per-layer outputs, scalar mixing and token selection."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .numcore import Tensor
from .tokenizer import DEFAULT_MAX_LEN, PackedSeq


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    ffn: int = 512
    max_len: int = DEFAULT_MAX_LEN
    dropout: float = 0.1
    init_std: float = 0.02

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.vocab_size < 1 or self.max_len < 3:
            raise ValueError("vocab_size must be >= 1 and max_len >= 3")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerStack:
    """Embedding output plus each layer's output, batched as [B, T, d]."""

    states: list[Tensor]
    attentions: list[np.ndarray] = field(default_factory=list)

    @property
    def final(self) -> Tensor:
        return self.states[-1]


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d, f, s = cfg.hidden, cfg.ffn, cfg.init_std
    p: dict[str, Tensor] = {}

    def normal(name, *shape):
        p[name] = nc.parameter(rng.normal(0.0, s, size=shape), name)

    def const(name, value, n):
        p[name] = nc.parameter(np.full(n, value), name)

    normal("emb.token", cfg.vocab_size, d)
    normal("emb.position", cfg.max_len, d)
    normal("emb.segment", 2, d)
    const("emb.ln.scale", 1.0, d)
    const("emb.ln.shift", 0.0, d)
    for i in range(cfg.layers):
        pre = f"layer{i}."
        for m in ("q", "k", "v", "o"):
            normal(pre + f"attn.w{m}", d, d)
            const(pre + f"attn.b{m}", 0.0, d)
        const(pre + "ln1.scale", 1.0, d)
        const(pre + "ln1.shift", 0.0, d)
        normal(pre + "ffn.w1", d, f)
        const(pre + "ffn.b1", 0.0, f)
        normal(pre + "ffn.w2", f, d)
        const(pre + "ffn.b2", 0.0, d)
        const(pre + "ln2.scale", 1.0, d)
        const(pre + "ln2.shift", 0.0, d)
    return p


def init_mix_params(n_layers: int) -> dict[str, Tensor]:
    return {
        "mix.logits": nc.parameter(np.zeros(n_layers), "mix.logits"),
        "mix.gamma": nc.parameter(np.ones(1), "mix.gamma"),
    }


def batch_arrays(packs: Sequence[PackedSeq]) -> tuple[np.ndarray, np.ndarray]:
    lengths = {len(pk) for pk in packs}
    if len(lengths) != 1:
        raise ValueError(f"encode needs equal-length sequences (no padding), got {sorted(lengths)}")
    ids = np.array([pk.ids for pk in packs], dtype=np.int64)
    segs = np.array([pk.segments for pk in packs], dtype=np.int64)
    return ids, segs


def encode_arrays(
    ids: np.ndarray,
    segments: np.ndarray,
    params: dict[str, Tensor],
    cfg: EncoderConfig,
    rng: np.random.Generator | None = None,
    keep_attention: bool = False,
) -> LayerStack:
    """Run the encoder on a [B, T] batch; ``rng`` enables dropout."""
    B, T = ids.shape
    if T > cfg.max_len:
        raise ValueError(f"sequence length {T} exceeds max_len {cfg.max_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    d, H = cfg.hidden, cfg.heads
    dh = d // H
    rate = cfg.dropout if rng is not None else 0.0

    x = nc.take_rows(params["emb.token"], ids)
    x = x + nc.take_rows(params["emb.position"], np.arange(T))
    x = x + nc.take_rows(params["emb.segment"], segments)
    x = nc.layer_norm(x, params["emb.ln.scale"], params["emb.ln.shift"])
    x = nc.dropout(x, rate, rng)
    states = [x]
    attentions = []
    scale = 1.0 / math.sqrt(dh)
    for i in range(cfg.layers):
        pre = f"layer{i}."

        def heads(w: str) -> Tensor:
            y = x @ params[pre + "attn.w" + w] + params[pre + "attn.b" + w]
            return y.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("q"), heads("k"), heads("v")
        att = nc.softmax_lastdim(nc.matmul(q, k.transpose(0, 1, 3, 2)) * scale)
        if keep_attention:
            attentions.append(att.data)
        ctx = nc.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, T, d)
        out = ctx @ params[pre + "attn.wo"] + params[pre + "attn.bo"]
        x = nc.layer_norm(x + nc.dropout(out, rate, rng), params[pre + "ln1.scale"], params[pre + "ln1.shift"])
        hid = nc.gelu(x @ params[pre + "ffn.w1"] + params[pre + "ffn.b1"])
        out = hid @ params[pre + "ffn.w2"] + params[pre + "ffn.b2"]
        x = nc.layer_norm(x + nc.dropout(out, rate, rng), params[pre + "ln2.scale"], params[pre + "ln2.shift"])
        states.append(x)
    return LayerStack(states, attentions)


def encode(
    packed: PackedSeq | Sequence[PackedSeq],
    params: dict[str, Tensor],
    cfg: EncoderConfig,
    rng: np.random.Generator | None = None,
    keep_attention: bool = False,
) -> LayerStack:
    """Encode one packed sequence ([T, d] states) or an equal-length batch ([B, T, d])."""
    single = isinstance(packed, PackedSeq)
    ids, segs = batch_arrays([packed] if single else packed)
    stack = encode_arrays(ids, segs, params, cfg, rng, keep_attention)
    if single:
        T, d = ids.shape[1], cfg.hidden
        stack = LayerStack([s.reshape(T, d) for s in stack.states], [a[0] for a in stack.attentions])
    return stack


def scalar_mix(stack: LayerStack, mix: dict[str, Tensor], include_embedding: bool = True) -> Tensor:
    """gamma * sum_j softmax(logits)_j * states[j]."""
    states = stack.states if include_embedding else stack.states[1:]
    logits = mix["mix.logits"]
    if logits.shape != (len(states),):
        raise ValueError(f"mix has {logits.shape[0]} logits for {len(states)} layers")
    shape = states[0].shape
    flat = nc.stack([s.reshape(-1) for s in states])  # [J, N]
    w = nc.softmax_lastdim(logits).reshape(1, len(states))
    mixed = (w @ flat).reshape(shape)
    return mixed * mix["mix.gamma"]


def mix_weights(mix: dict[str, Tensor]) -> np.ndarray:
    z = mix["mix.logits"].data
    e = np.exp(z - z.max())
    return e / e.sum()


def token_level_select(mixed: Tensor, packed: PackedSeq) -> Tensor:
    """Rows of a [T, d] matrix at the first sub-token of each word."""
    return nc.take_rows(mixed, np.asarray(packed.token_firsts, dtype=np.int64))


def cls_vector(rep: Tensor | LayerStack) -> Tensor:
    """Row 0 ([CLS]) of a [T, d] or [B, T, d] representation (final layer for a stack)."""
    if isinstance(rep, LayerStack):
        rep = rep.final
    return rep[0] if rep.ndim == 2 else rep[:, 0, :]
