"""The three model families: AT reference, LaNMT (separate posterior), LadderNMT (shared latent).

A latent bundle holds two :class:`Direction` models, ``theta`` (source to
target) and ``phi`` (target to source). Each direction owns a tied embedding
table, an encoder with a Gaussian prior head, a length predictor and a
non-autoregressive decoder. LaNMT directions additionally own a posterior
network; LadderNMT estimates its posterior from the two encoders instead.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .blocks import (NEG_INF, BlockConfig, Decoder, Embedding, Encoder, Linear, Module,
                     decode_ar, decode_nat, encode)
from .latent import GaussianSeq, fuse_gaussians, gaussian_head, length_transform, make_sharing_mask
from .tensor import Tensor

PAD, EOS, UNK = 0, 1, 2
MAX_OFFSET = 20
N_OFFSETS = 2 * MAX_OFFSET + 1

KINDS = ("AT", "LaNMT", "LadderNMT")
COMPONENTS = {
    "encoder": ("embed", "encoder", "prior_mean", "prior_var"),
    "length": ("length_latent", "length_out"),
    "decoder": ("latent_in", "decoder"),
    "posterior": ("posterior",),
}


def canonical_kind(kind):
    for k in KINDS:
        if k.lower() == str(kind).lower():
            return k
    raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")


@dataclass(frozen=True)
class LatentConfig:
    t_z: int = 8
    d_z: int = 8
    rho: float = 1.0

    def __post_init__(self):
        if self.t_z < 1 or self.d_z < 1:
            raise ValueError("latent length and dimension must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")


class PosteriorNet(Module):
    """LaNMT's separate posterior: encoder over y, decoder reading x over it, Gaussian heads."""

    def __init__(self, cfg: BlockConfig, lat: LatentConfig, rng):
        self.encoder = Encoder(cfg, rng, layers=1)
        self.decoder = Decoder(cfg, rng, causal=False, layers=1)
        self.mean = Linear(cfg.d_model, lat.d_z, rng)
        self.var = Linear(cfg.d_model, lat.d_z, rng)


class Direction(Module):
    def __init__(self, kind, cfg: BlockConfig, lat: LatentConfig | None, src_vocab, tgt_vocab, rng):
        self.kind = kind
        self.cfg = cfg
        self.lat = lat
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab
        d = cfg.d_model
        self.embed = Embedding(max(src_vocab, tgt_vocab), d, rng)
        self.encoder = Encoder(cfg, rng)
        if kind == "AT":
            self.decoder = Decoder(cfg, rng, causal=True)
        else:
            self.prior_mean = Linear(d, lat.d_z, rng)
            self.prior_var = Linear(d, lat.d_z, rng)
            self.length_latent = Linear(lat.d_z, d, rng)
            self.length_out = Linear(d, N_OFFSETS, rng)
            self.latent_in = Linear(lat.d_z, d, rng)
            self.decoder = Decoder(cfg, rng, causal=False)
            if kind == "LaNMT":
                self.posterior = PosteriorNet(cfg, lat, rng)
        banned = np.zeros(self.embed.weight.shape[0], dtype=bool)
        banned[tgt_vocab:] = True
        banned[[PAD, UNK]] = True
        if kind != "AT":
            banned[EOS] = True
        self._banned = banned
        self.length_passes = 0

    # -- encoder side ------------------------------------------------------
    def encode(self, tokens, lengths):
        return encode(tokens, lengths, self.embed, self.encoder, self.src_vocab)

    def head(self, h, lengths):
        return gaussian_head(h, self.prior_mean, self.prior_var, self.lat.t_z, lengths)

    def prior(self, tokens, lengths):
        h = self.encode(tokens, lengths)
        return h, self.head(h, lengths)

    # -- posterior network (LaNMT) -------------------------------------------
    def posterior_lanmt(self, x, x_len, y, y_len):
        if self.kind != "LaNMT":
            raise ValueError("posterior network exists only in LaNMT directions")
        x, y = np.asarray(x), np.asarray(y)
        if y.max() >= self.tgt_vocab or x.max() >= self.src_vocab:
            raise IndexError("token id outside vocabulary")
        post = self.posterior
        h_y = post.encoder(self.embed(y), y_len)
        h_xy = post.decoder(self.embed(x), x_len, h_y, y_len)
        return gaussian_head(h_xy, post.mean, post.var, self.lat.t_z, x_len)

    # -- length & decoding ---------------------------------------------------
    def length_logits(self, z, h, h_lengths):
        self.length_passes += 1
        h_lengths = np.asarray(h_lengths)
        b, n = h.shape[0], h.shape[1]
        pool = (np.arange(n)[None, :] < h_lengths[:, None]) / h_lengths[:, None]
        h_pool = (Tensor(pool.reshape(b, 1, n)) @ h).reshape(b, -1)
        z_pool = self.length_latent(z.mean(axis=1))
        return self.length_out(z_pool + h_pool)

    def lengths_from_logits(self, logits, src_lengths):
        offsets = np.argmax(logits.data, axis=-1) - MAX_OFFSET
        return np.clip(np.asarray(src_lengths) + offsets, 1, self.cfg.max_positions)

    def decode_from_latent(self, z, h, h_lengths, out_lengths):
        out_lengths = np.asarray(out_lengths)
        if np.any(out_lengths < 1):
            raise ValueError("output length must be >= 1")
        inputs = self.latent_in(length_transform(z, out_lengths, np.full(z.shape[0], z.shape[1])))
        logits = decode_nat(inputs, out_lengths, h, h_lengths, self.decoder, self.embed)
        return T.masked_fill(logits, self._banned, NEG_INF)

    def decode_ar(self, prefix, prefix_lengths, h, h_lengths):
        logits = decode_ar(prefix, prefix_lengths, h, h_lengths, self.decoder, self.embed)
        return T.masked_fill(logits, self._banned, NEG_INF)

    def component_counts(self):
        counts = {c: 0 for c in COMPONENTS}
        for name, p in self.named_parameters():
            top = name.split(".", 1)[0]
            for comp, owners in COMPONENTS.items():
                if top in owners:
                    counts[comp] += p.size
                    break
            else:
                raise KeyError(f"parameter {name} belongs to no component")
        return counts


class ModelBundle(Module):
    """Parameters and configuration for one model family.

    AT bundles translate one way (``theta`` only); latent bundles carry
    ``theta`` (source to target) and ``phi`` (target to source).
    """

    def __init__(self, kind, block=None, latent=None, src_vocab=64, tgt_vocab=64, seed=0):
        self.kind = canonical_kind(kind)
        self.block = block or BlockConfig()
        self.latent = None if self.kind == "AT" else (latent or LatentConfig())
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.theta = Direction(self.kind, self.block, self.latent, src_vocab, tgt_vocab, rng)
        self.phi = None
        if self.kind != "AT":
            self.phi = Direction(self.kind, self.block, self.latent, tgt_vocab, src_vocab, rng)
            self.mask = make_sharing_mask(self.latent.d_z, self.latent.rho)

    def directions(self):
        return [d for d in (self.theta, self.phi) if d is not None]

    def side(self, direction):
        """(own, other) direction models for 'fwd' (theta) or 'rev' (phi)."""
        if direction == "fwd":
            return self.theta, self.phi
        if direction == "rev":
            if self.phi is None:
                raise ValueError("AT bundles have a single direction")
            return self.phi, self.theta
        raise ValueError(f"direction must be 'fwd' or 'rev', got {direction!r}")

    # -- latent operations ---------------------------------------------------
    def prior(self, tokens, lengths, side="src"):
        own = self.theta if side == "src" else self.phi
        return own.prior(tokens, lengths)

    def posterior_ladder(self, x, x_len, y, y_len, keep="x", cache=None):
        """Collaborative posterior from the x-encoder (theta) and y-encoder (phi) heads."""
        if self.kind != "LadderNMT":
            raise ValueError("collaborative posterior is defined for LadderNMT bundles")
        if cache is None:
            hx, qx = self.theta.prior(x, x_len)
            hy, qy = self.phi.prior(y, y_len)
        else:
            hx, qx, hy, qy = cache
        return fuse_gaussians(qx, qy, self.mask, keep), (hx, qx, hy, qy)

    def posterior(self, src, src_len, tgt, tgt_len, direction="fwd"):
        """Posterior mean/variance used when ``direction`` generates its target side."""
        if self.kind == "LadderNMT":
            if direction == "fwd":
                return self.posterior_ladder(src, src_len, tgt, tgt_len, keep="y")[0]
            return self.posterior_ladder(tgt, tgt_len, src, src_len, keep="x")[0]
        own, _ = self.side(direction)
        return own.posterior_lanmt(src, src_len, tgt, tgt_len)

    # -- bookkeeping ---------------------------------------------------------
    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, arrays):
        params = dict(self.named_parameters())
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {arrays[name].shape} vs {p.shape}")
            p.data[...] = arrays[name]

    def manifest(self):
        return {
            "kind": self.kind,
            "block": self.block.to_dict(),
            "latent": None if self.latent is None else asdict(self.latent),
            "src_vocab": self.src_vocab,
            "tgt_vocab": self.tgt_vocab,
            "seed": self.seed,
        }

    def config_hash(self):
        return config_hash(self.manifest())

    @classmethod
    def from_manifest(cls, man):
        latent = man.get("latent")
        return cls(man["kind"], BlockConfig(**man["block"]),
                   None if latent is None else LatentConfig(**latent),
                   man["src_vocab"], man["tgt_vocab"], man["seed"])

    def decoder_passes(self):
        return sum(d.decoder.passes for d in self.directions())


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def param_count(bundle: ModelBundle):
    """Exact parameter counts per named component (``theta.encoder`` ...) plus ``total``."""
    counts = {}
    for name, d in (("theta", bundle.theta), ("phi", bundle.phi)):
        if d is None:
            continue
        for comp, n in d.component_counts().items():
            counts[f"{name}.{comp}"] = n
    counts["total"] = sum(counts.values())
    return counts


def checkpoint_path(root, run_id, kind, step):
    return os.path.join(root, str(run_id), canonical_kind(kind), f"{step}.ckpt")


def save_checkpoint(bundle, path, extra=None):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    T.save_arrays(path, bundle.state_dict())
    man = bundle.manifest()
    man["config_hash"] = bundle.config_hash()
    if extra:
        man.update(extra)
    with open(os.path.join(os.path.dirname(path), "manifest.json"), "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
    return path


def load_checkpoint(path):
    with open(os.path.join(os.path.dirname(path), "manifest.json")) as fh:
        man = json.load(fh)
    bundle = ModelBundle.from_manifest(man)
    bundle.load_state_dict(T.load_arrays(path))
    return bundle.eval()
