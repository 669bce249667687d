"""Synthetic multimodal parallel corpora, batching, and bidirectional KD regeneration."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .models import EOS, PAD, UNK

log = logging.getLogger(__name__)

RESERVED = 3  # pad, eos, unk


@dataclass(frozen=True)
class CorpusSpec:
    src_vocab: int = 64
    tgt_vocab: int = 64
    pairs: int = 10000
    min_len: int = 4
    max_len: int = 16
    registers: int = 1
    offset_rule: str = "same"  # or "dup3": duplicate every 3rd token
    seed: int = 0
    max_positions: int = 64

    def __post_init__(self):
        if self.src_vocab < 8 or self.tgt_vocab < 8:
            raise ValueError("vocabularies need at least 8 ids")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValueError("length range must satisfy 1 <= min <= max")
        if target_length(self.max_len, self.offset_rule) > self.max_positions:
            raise ValueError("length range exceeds max_positions")
        if self.registers < 1:
            raise ValueError("need at least one register")
        if self.pairs < 1:
            raise ValueError("corpus must contain at least one pair")

    def to_dict(self):
        return asdict(self)


@dataclass
class ParallelPair:
    source: np.ndarray
    target: np.ndarray
    register: int = 0

    def __eq__(self, other):
        return (isinstance(other, ParallelPair) and self.register == other.register
                and np.array_equal(self.source, other.source)
                and np.array_equal(self.target, other.target))


def target_length(n, rule):
    if rule == "same":
        return n
    if rule == "dup3":
        return n + n // 3
    raise ValueError(f"unknown length-offset rule {rule!r}")


def apply_offset_rule(tokens, rule):
    if rule == "same":
        return tokens
    if rule == "dup3":
        return np.repeat(tokens, [2 if i % 3 == 2 else 1 for i in range(len(tokens))])
    raise ValueError(f"unknown length-offset rule {rule!r}")


def undo_offset_rule(tokens, rule):
    tokens = np.asarray(tokens)
    if rule == "same":
        return tokens
    if rule == "dup3":
        m = len(tokens)
        if m % 4 == 3:
            raise ValueError(f"length {m} cannot come from the dup3 rule")
        n = 3 * (m // 4) + m % 4
        keep = np.ones(m, dtype=bool)
        keep[[i + i // 3 + 1 for i in range(2, n, 3)]] = False
        return tokens[keep]
    raise ValueError(f"unknown length-offset rule {rule!r}")


@dataclass
class Lexicon:
    """Register-specific token maps ``maps[r][src_id] -> tgt_id`` (reserved ids map to themselves)."""

    maps: np.ndarray
    rule: str = "same"

    def translate(self, source, register):
        return apply_offset_rule(self.maps[register][np.asarray(source)], self.rule)

    def references(self, source):
        """Every valid target for ``source``, one per register."""
        return [self.translate(source, r) for r in range(len(self.maps))]

    def inverse(self, target, register=0):
        target = undo_offset_rule(target, self.rule)
        inv = np.zeros(max(self.maps.max(), target.max(initial=0)) + 1, dtype=int)
        inv[self.maps[register]] = np.arange(self.maps.shape[1])
        return inv[target]

    def sources(self, target):
        """Every source that some register maps onto ``target`` (deduplicated, register order)."""
        out = []
        for r in range(len(self.maps)):
            s = self.inverse(target, r)
            if np.array_equal(self.translate(s, r), target) and not any(np.array_equal(s, o) for o in out):
                out.append(s)
        return out


def build_lexicon(spec: CorpusSpec):
    n_src = spec.src_vocab - RESERVED
    n_tgt = spec.tgt_vocab - RESERVED
    if n_src > n_tgt:
        raise ValueError("target vocabulary too small for an injective lexicon")
    if spec.registers > n_src:
        raise ValueError(f"{spec.registers} registers need at least that many content tokens, have {n_src}")
    rng = np.random.default_rng([spec.seed, 1])
    base = rng.permutation(n_tgt)[:n_src] + RESERVED
    # one n-cycle; its powers disagree with each other on every token
    order = rng.permutation(n_src)
    cycle = np.empty(n_src, dtype=int)
    cycle[order] = np.roll(order, -1)
    maps = np.zeros((spec.registers, spec.src_vocab), dtype=int)
    shift = np.arange(n_src)
    for r in range(spec.registers):
        maps[r, :RESERVED] = np.arange(RESERVED)
        maps[r, RESERVED:] = base[shift]
        shift = cycle[shift]
    return Lexicon(maps, spec.offset_rule)


def gen_corpus(spec: CorpusSpec, return_lexicon=False):
    """Seeded corpus of ``spec.pairs`` pairs; each register is one valid translation mode."""
    lex = build_lexicon(spec)
    rng = np.random.default_rng([spec.seed, 2])
    n_src = spec.src_vocab - RESERVED
    pairs = []
    for _ in range(spec.pairs):
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        src = rng.integers(RESERVED, RESERVED + n_src, size=n)
        reg = int(rng.integers(spec.registers))
        pairs.append(ParallelPair(src, lex.translate(src, reg), reg))
    return (pairs, lex) if return_lexicon else pairs


def split(pairs, valid, test, seed=0):
    """Deterministic shuffle into (train, valid, test)."""
    idx = np.random.default_rng([seed, 3]).permutation(len(pairs))
    v = [pairs[i] for i in idx[:valid]]
    t = [pairs[i] for i in idx[valid:valid + test]]
    tr = [pairs[i] for i in idx[valid + test:]]
    return tr, v, t


@dataclass
class Batch:
    src: np.ndarray
    src_len: np.ndarray
    tgt: np.ndarray
    tgt_len: np.ndarray
    index: np.ndarray = field(default=None)

    @property
    def size(self):
        return len(self.src_len)

    @property
    def src_mask(self):
        return np.arange(self.src.shape[1])[None] < self.src_len[:, None]

    @property
    def tgt_mask(self):
        return np.arange(self.tgt.shape[1])[None] < self.tgt_len[:, None]

    def swapped(self):
        return Batch(self.tgt, self.tgt_len, self.src, self.src_len, self.index)


def pad(seqs, pad_id=PAD):
    lengths = np.array([len(s) for s in seqs], dtype=int)
    out = np.full((len(seqs), max(lengths.max(), 1)), pad_id, dtype=int)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lengths


def make_batch(pairs, index=None, pad_id=PAD):
    src, sl = pad([p.source for p in pairs], pad_id)
    tgt, tl = pad([p.target for p in pairs], pad_id)
    return Batch(src, sl, tgt, tl, None if index is None else np.asarray(index))


def batch(pairs, batch_size, pad_id=PAD, seed=None, by_length=True):
    """Padded batches; with ``by_length`` pairs are bucketed by source length to limit padding.

    With a seed, batch order (and ties within a bucket) is shuffled deterministically.
    """
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    if not pairs:
        raise ValueError("empty corpus")
    idx = np.arange(len(pairs))
    rng = np.random.default_rng(seed) if seed is not None else None
    if rng is not None:
        idx = rng.permutation(idx)
    if by_length:
        idx = idx[np.argsort([len(pairs[i].source) for i in idx], kind="stable")]
    chunks = [idx[i:i + batch_size] for i in range(0, len(idx), batch_size)]
    if rng is not None:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    return [make_batch([pairs[i] for i in c], c, pad_id) for c in chunks]


def kd_regenerate(pairs, at_forward, at_reverse, max_extra=10, batch_size=64):
    """Bidirectional sequence-level KD: re-translate each side with a trained AT model.

    Returns ``(kd_src2tgt, kd_tgt2src)`` with the same size and order as ``pairs``.
    """
    from .inference import translate_at_batch

    def regen(inputs, model, label):
        outs = translate_at_batch(inputs, model, max_extra=max_extra, batch_size=batch_size)
        fixed = []
        for i, o in enumerate(outs):
            o = o[o != EOS]
            if len(o) == 0:
                log.warning("%s: empty AT output for sentence %d, using a lone end token", label, i)
                o = np.array([EOS])
            fixed.append(o)
        return fixed

    fwd = regen([p.source for p in pairs], at_forward, "kd src->tgt")
    rev = regen([p.target for p in pairs], at_reverse, "kd tgt->src")
    kd_s2t = [ParallelPair(p.source.copy(), y, p.register) for p, y in zip(pairs, fwd)]
    kd_t2s = [ParallelPair(x, p.target.copy(), p.register) for p, x in zip(pairs, rev)]
    return kd_s2t, kd_t2s


def target_diversity(pairs):
    """Mean number of distinct targets per source sentence that occurs more than once."""
    groups = {}
    for p in pairs:
        groups.setdefault(tuple(p.source), set()).add(tuple(p.target))
    counts = {}
    for p in pairs:
        counts[tuple(p.source)] = counts.get(tuple(p.source), 0) + 1
    dup = [len(groups[s]) for s, c in counts.items() if c > 1]
    return float(np.mean(dup)) if dup else float("nan"), len(dup)


# -- persistence -------------------------------------------------------------

def write_corpus(path, pairs, spec: CorpusSpec | None = None, header=None):
    """Line-delimited ``src ids<TAB>tgt ids<TAB># register`` records plus a JSON manifest."""
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        for p in pairs:
            fh.write(" ".join(map(str, p.source)) + "\t" + " ".join(map(str, p.target))
                     + f"\t# {p.register}\n")
    if spec is not None:
        with open(path + ".manifest.json", "w") as fh:
            json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)


def read_corpus(path):
    pairs = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            cols = line.rstrip("\n").split("\t")
            reg = int(cols[2].lstrip("# ")) if len(cols) > 2 else 0
            pairs.append(ParallelPair(np.array(cols[0].split(), dtype=int),
                                      np.array(cols[1].split(), dtype=int), reg))
    return pairs


def read_spec(path):
    with open(path) as fh:
        return CorpusSpec(**json.load(fh))


__all__ = ["CorpusSpec", "ParallelPair", "Lexicon", "Batch", "gen_corpus", "batch", "make_batch",
           "kd_regenerate", "split", "write_corpus", "read_corpus", "target_diversity",
           "PAD", "EOS", "UNK"]
