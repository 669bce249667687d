"""Transformer building blocks on top of :mod:`laddernat.tensor`."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -1e9


@dataclass(frozen=True)
class BlockConfig:
    d_model: int = 64
    heads: int = 4
    ffn_dim: int = 128
    layers: int = 2
    dropout: float = 0.1
    max_positions: int = 64

    def __post_init__(self):
        if min(self.d_model, self.heads, self.ffn_dim, self.layers, self.max_positions) < 1:
            raise ValueError("BlockConfig sizes must be positive")
        if self.d_model % self.heads:
            raise ValueError(f"heads={self.heads} must divide d_model={self.d_model}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)


class Module:
    """Tiny parameter container; children and parameters are discovered in attribute order."""

    training = False
    rng = None

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, list):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, rng=None):
        for m in self.modules():
            m.training = True
            m.rng = rng
        return self

    def eval(self):
        for m in self.modules():
            m.training = False
            m.rng = None
        return self

    def drop(self, x, rate):
        return T.dropout(x, rate, self.rng) if self.training else x


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, name=""):
        limit = np.sqrt(6.0 / (d_in + d_out))
        self.weight = T.parameter(rng.uniform(-limit, limit, (d_in, d_out)), name + ".weight")
        self.bias = T.parameter(np.zeros(d_out), name + ".bias") if bias else None

    def __call__(self, x):
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d):
        self.gain = T.parameter(np.ones(d))
        self.shift = T.parameter(np.zeros(d))

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.shift)


class Embedding(Module):
    def __init__(self, vocab, d, rng):
        self.weight = T.parameter(rng.normal(0.0, d ** -0.5, (vocab, d)))
        self.scale = np.sqrt(d)

    def __call__(self, ids):
        return T.embedding(self.weight, ids) * self.scale

    def logits(self, h):
        return h @ T.transpose(self.weight, (1, 0))


def sinusoidal_positions(n, d):
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def add_positions(x, max_positions):
    n, d = x.shape[-2], x.shape[-1]
    if n > max_positions:
        raise ValueError(f"sequence length {n} exceeds max_positions={max_positions}")
    return x + Tensor(sinusoidal_positions(n, d))


def key_padding_mask(lengths, n_keys):
    """Boolean (B, 1, 1, K) mask; True marks padded (disallowed) keys."""
    lengths = np.asarray(lengths)
    return (np.arange(n_keys)[None, :] >= lengths[:, None])[:, None, None, :]


def causal_mask(n):
    return np.triu(np.ones((n, n), dtype=bool), k=1)[None, None]


class MultiHeadAttention(Module):
    def __init__(self, cfg: BlockConfig, rng):
        d = cfg.d_model
        self.heads = cfg.heads
        self.dropout = cfg.dropout
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        self.last_weights = None

    def _split(self, x):
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, queries, keys, values, mask=None, keep_weights=False):
        if queries.ndim == 2:
            out = self(queries.reshape(1, *queries.shape), keys.reshape(1, *keys.shape),
                       values.reshape(1, *values.shape),
                       None if mask is None else np.asarray(mask)[None], keep_weights)
            return out.reshape(out.shape[1:])
        b, nq, d = queries.shape
        nk = keys.shape[1]
        q, k, v = self._split(self.q(queries)), self._split(self.k(keys)), self._split(self.v(values))
        scores = (q @ T.swap_last(k)) * (1.0 / np.sqrt(d // self.heads))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            try:
                full = np.broadcast_to(mask, (b, self.heads, nq, nk))
            except ValueError:
                raise T.ShapeError(f"attention mask {mask.shape} does not fit scores {(b, self.heads, nq, nk)}") from None
            if full.all(axis=-1).any():
                raise ValueError("attention row with every key masked")
            scores = T.masked_fill(scores, full, NEG_INF)
        weights = T.softmax(scores)
        if keep_weights:
            self.last_weights = weights.data
        ctx = self.drop(weights, self.dropout) @ v
        return self.out(ctx.transpose(0, 2, 1, 3).reshape(b, nq, d))


class FeedForward(Module):
    def __init__(self, cfg: BlockConfig, rng):
        self.inner = Linear(cfg.d_model, cfg.ffn_dim, rng)
        self.outer = Linear(cfg.ffn_dim, cfg.d_model, rng)
        self.dropout = cfg.dropout

    def __call__(self, x):
        return self.outer(self.drop(self.inner(x).relu(), self.dropout))


class EncoderLayer(Module):
    def __init__(self, cfg, rng):
        self.attn = MultiHeadAttention(cfg, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg, rng)
        self.norm2 = LayerNorm(cfg.d_model)
        self.dropout = cfg.dropout

    def __call__(self, x, mask):
        x = self.norm1(x + self.drop(self.attn(x, x, x, mask), self.dropout))
        return self.norm2(x + self.drop(self.ffn(x), self.dropout))


class DecoderLayer(Module):
    def __init__(self, cfg, rng):
        self.self_attn = MultiHeadAttention(cfg, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg, rng)
        self.norm2 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg, rng)
        self.norm3 = LayerNorm(cfg.d_model)
        self.dropout = cfg.dropout

    def __call__(self, x, memory, self_mask, memory_mask):
        x = self.norm1(x + self.drop(self.self_attn(x, x, x, self_mask), self.dropout))
        x = self.norm2(x + self.drop(self.cross_attn(x, memory, memory, memory_mask), self.dropout))
        return self.norm3(x + self.drop(self.ffn(x), self.dropout))


class Encoder(Module):
    """Token embedding (owned by the caller, usually tied) + sinusoidal positions + layers."""

    def __init__(self, cfg: BlockConfig, rng, layers=None):
        self.cfg = cfg
        self.layers = [EncoderLayer(cfg, rng) for _ in range(layers or cfg.layers)]

    def __call__(self, embedded, lengths):
        x = self.drop(add_positions(embedded, self.cfg.max_positions), self.cfg.dropout)
        mask = key_padding_mask(lengths, x.shape[1])
        for layer in self.layers:
            x = layer(x, mask)
        return x


class Decoder(Module):
    """Stack of decoder layers; ``causal`` selects the autoregressive variant.

    ``passes`` counts forward invocations so callers can verify how many
    decoder passes a translation used.
    """

    def __init__(self, cfg: BlockConfig, rng, causal=False, layers=None):
        self.cfg = cfg
        self.causal = causal
        self.layers = [DecoderLayer(cfg, rng) for _ in range(layers or cfg.layers)]
        self.passes = 0

    def __call__(self, inputs, lengths, memory, memory_lengths):
        if inputs.shape[1] == 0:
            raise ValueError("decoder inputs are empty")
        if memory.shape[1] == 0:
            raise ValueError("decoder memory is empty")
        self.passes += 1
        x = self.drop(add_positions(inputs, self.cfg.max_positions), self.cfg.dropout)
        n = x.shape[1]
        self_mask = key_padding_mask(lengths, n)
        if self.causal:
            self_mask = self_mask | causal_mask(n)
        mem_mask = key_padding_mask(memory_lengths, memory.shape[1])
        for layer in self.layers:
            x = layer(x, memory, self_mask, mem_mask)
        return x


def encode(tokens, lengths, embed: Embedding, encoder: Encoder, vocab_size=None):
    """Hidden states (B, T, D_h) for padded token ids with explicit lengths."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens, lengths = tokens[None], [len(tokens)]
    lengths = np.asarray(lengths)
    if lengths.min() < 1:
        raise ValueError("sentences must have length >= 1")
    if vocab_size is not None and tokens.max() >= vocab_size:
        raise IndexError(f"token id {tokens.max()} outside vocabulary of size {vocab_size}")
    return encoder(embed(tokens), lengths)


def decode_nat(latent_inputs, lengths, memory, memory_lengths, decoder: Decoder, embed: Embedding):
    """One parallel decoder pass; returns logits (B, l, V)."""
    if decoder.causal:
        raise ValueError("decode_nat needs a non-causal decoder")
    return embed.logits(decoder(latent_inputs, lengths, memory, memory_lengths))


def decode_ar(prefix, prefix_lengths, memory, memory_lengths, decoder: Decoder, embed: Embedding):
    """Logits for every prefix position under a causal mask; row t predicts token t+1."""
    if not decoder.causal:
        raise ValueError("decode_ar needs a causal decoder")
    prefix = np.asarray(prefix)
    return embed.logits(decoder(embed(prefix), prefix_lengths, memory, memory_lengths))
