"""Counterfactual statement detection: aggregation, logistic scoring, BCE."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .encoder import EncoderConfig, batch_arrays, cls_vector, encode_arrays, init_encoder_params, init_mix_params, scalar_mix
from .numcore import Tensor
from .tokenizer import PackedSeq

AGGREGATIONS = ("cls", "cnn", "cls+cnn")
PROB_EPS = 1e-12
CNN_WINDOW = 3
CNN_FILTERS = 300


class InputError(ValueError):
    pass


def init_cnn_params(d: int, filters: int, window: int, rng: np.random.Generator) -> dict[str, Tensor]:
    fan_in = window * d
    return {
        "cnn.w": nc.parameter(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, filters)), "cnn.w"),
        "cnn.b": nc.parameter(np.zeros(filters), "cnn.b"),
    }


def init_classifier_params(dim: int, rng: np.random.Generator) -> dict[str, Tensor]:
    return {
        "cls.w": nc.parameter(rng.normal(0.0, 0.02, size=dim), "cls.w"),
        "cls.b": nc.parameter(np.zeros(1), "cls.b"),
    }


def aggregate_cls(c: Tensor) -> Tensor:
    return c


def _window_layout(lengths: Sequence[int], window: int) -> tuple[int, list[int], list[int]]:
    """Padded width, left zero-pad per row, and valid window count per row."""
    width = max(max(lengths), window)
    lefts = [(window - n) // 2 if n < window else 0 for n in lengths]
    valid = [max(n, window) - window + 1 for n in lengths]
    return width, lefts, valid


def cnn_pool(
    rows: Tensor,
    row_index: Sequence[Sequence[int]],
    cnn: dict[str, Tensor],
    window: int = CNN_WINDOW,
) -> Tensor:
    """Batched tanh convolution + max-pool over variable-length token sequences.

    ``rows`` is [N, d]; ``row_index[b]`` lists the rows forming sequence ``b``.
    Sequences shorter than the window are centred in zero padding.  Returns
    [B, filters].
    """
    lengths = [len(ix) for ix in row_index]
    if not lengths or min(lengths) < 1:
        raise InputError("CNN aggregation needs at least one token per sequence")
    d = rows.shape[-1]
    if cnn["cnn.w"].shape[0] != window * d:
        raise nc.ShapeError(f"cnn.w {cnn['cnn.w'].shape} does not match window {window} x d {d}")
    zero = rows.shape[0]
    width, lefts, valid = _window_layout(lengths, window)
    gather = np.full((len(lengths), width), zero, dtype=np.int64)
    for b, ix in enumerate(row_index):
        gather[b, lefts[b] : lefts[b] + len(ix)] = ix
    padded = nc.take_rows(nc.concat([rows, Tensor(np.zeros((1, d)))], axis=0), gather)
    n_win = width - window + 1
    windows = nc.concat([padded[:, k : k + n_win, :] for k in range(window)], axis=-1)
    feats = nc.tanh(windows @ cnn["cnn.w"] + cnn["cnn.b"])
    invalid = np.arange(n_win)[None, :] >= np.asarray(valid)[:, None]
    feats = nc.masked_fill(feats, invalid[:, :, None], -np.inf)
    return nc.tmax(feats, axis=1)


def aggregate_cnn(tokens: Tensor, cnn: dict[str, Tensor], window: int = CNN_WINDOW) -> Tensor:
    """Max-pooled tanh convolution over one [n, d] token matrix."""
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise InputError(f"aggregate_cnn needs a non-empty [n, d] matrix, got {tokens.shape}")
    out = cnn_pool(tokens, [list(range(tokens.shape[0]))], cnn, window)
    return out.reshape(-1)


def aggregate_combined(c: Tensor, tokens: Tensor, cnn: dict[str, Tensor], window: int = CNN_WINDOW) -> Tensor:
    return nc.concat([aggregate_cls(c), aggregate_cnn(tokens, cnn, window)], axis=-1)


def classify(r: Tensor, params: dict[str, Tensor]) -> Tensor:
    w, b = params["cls.w"], params["cls.b"]
    if r.shape[-1] != w.shape[0]:
        raise nc.ShapeError(f"classify: feature size {r.shape[-1]} vs weight {w.shape[0]}")
    if r.ndim == 1:
        z = (r.reshape(1, -1) @ w.reshape(-1, 1)).reshape(1) + b
        return nc.sigmoid(z).reshape(())
    z = (r @ w.reshape(-1, 1)).reshape(r.shape[0]) + b
    return nc.sigmoid(z)


def bce_loss(probs, labels, reduction: str = "sum") -> Tensor:
    """Negative log-likelihood of binary labels; probabilities clamped to [eps, 1-eps]."""
    p = nc.as_tensor(probs).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape[0] != y.shape[0]:
        raise InputError(f"bce_loss: {p.shape[0]} probabilities vs {y.shape[0]} labels")
    if not np.all((y == 0) | (y == 1)):
        raise InputError("bce_loss: labels must be 0 or 1")
    p = nc.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    ll = nc.log(p) * y + nc.log(1.0 - p) * (1.0 - y)
    total = nc.tsum(ll) * -1.0
    if reduction == "mean":
        return total * (1.0 / y.shape[0])
    return total


def predict(prob: float, threshold: float = 0.5) -> int:
    return int(prob >= threshold)


@dataclass
class CfdModel:
    """Encoder + scalar mix + aggregation + logistic classifier."""

    enc: EncoderConfig
    params: dict[str, Tensor]
    aggregation: str = "cnn"
    cnn_filters: int = CNN_FILTERS
    cnn_window: int = CNN_WINDOW
    mix_embedding: bool = True

    kind = "cfd"

    @classmethod
    def create(
        cls,
        enc: EncoderConfig,
        aggregation: str = "cnn",
        seed: int = 0,
        cnn_filters: int = CNN_FILTERS,
        cnn_window: int = CNN_WINDOW,
        mix_embedding: bool = True,
    ) -> CfdModel:
        if aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}, got {aggregation!r}")
        rng = np.random.default_rng(seed)
        params = init_encoder_params(enc, rng)
        params.update(init_mix_params(enc.layers + 1 if mix_embedding else enc.layers))
        dim = 0
        if "cnn" in aggregation:
            params.update(init_cnn_params(enc.hidden, cnn_filters, cnn_window, rng))
            dim += cnn_filters
        if "cls" in aggregation:
            dim += enc.hidden
        params.update(init_classifier_params(dim, rng))
        return cls(enc, params, aggregation, cnn_filters, cnn_window, mix_embedding)

    def head_config(self) -> dict:
        return {
            "aggregation": self.aggregation,
            "cnn_filters": self.cnn_filters,
            "cnn_window": self.cnn_window,
            "mix_embedding": self.mix_embedding,
        }

    def features(self, packs: Sequence[PackedSeq], rng: np.random.Generator | None = None) -> Tensor:
        ids, segs = batch_arrays(packs)
        stack = encode_arrays(ids, segs, self.params, self.enc, rng)
        mixed = scalar_mix(stack, self.params, self.mix_embedding)
        parts = []
        if "cls" in self.aggregation:
            parts.append(aggregate_cls(cls_vector(mixed)))
        if "cnn" in self.aggregation:
            B, T, d = mixed.shape
            index = [[b * T + i for i in pk.token_firsts] for b, pk in enumerate(packs)]
            parts.append(cnn_pool(mixed.reshape(B * T, d), index, self.params, self.cnn_window))
        return parts[0] if len(parts) == 1 else nc.concat(parts, axis=-1)

    def forward(self, packs: Sequence[PackedSeq], rng: np.random.Generator | None = None) -> Tensor:
        """P(counterfactual) for an equal-length batch, shape [B]."""
        return classify(self.features(packs, rng), self.params)

    def loss(self, packs: Sequence[PackedSeq], labels: Sequence[int], rng=None) -> Tensor:
        return bce_loss(self.forward(packs, rng), labels, reduction="mean")

    def predict_proba(self, packs: Sequence[PackedSeq]) -> np.ndarray:
        return self.forward(packs).data.copy()
