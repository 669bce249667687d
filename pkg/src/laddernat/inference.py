"""Translation (NAT with iterative refinement, AT greedy), BLEU, and the speed benchmark."""

from __future__ import annotations

import csv
import math
import statistics
import time
from collections import Counter
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .data import pad
from .models import EOS, ModelBundle


@dataclass
class TranslationResult:
    tokens: np.ndarray
    refinements_used: int
    latency_seconds: float
    decoder_passes: int
    flags: tuple = ()


def _as_list(sentences):
    return [np.asarray(s, dtype=int) for s in sentences]


def _nat_decode(own, z, h, src_len):
    lengths = own.lengths_from_logits(own.length_logits(z, h, src_len), src_len)
    logits = own.decode_from_latent(z, h, src_len, lengths)
    return np.argmax(logits.data, axis=-1), lengths


def refine(src, src_len, hyp, hyp_len, bundle: ModelBundle, direction="fwd", h=None):
    """One refinement round: posterior mean over (source, hypothesis), re-predict length, re-decode."""
    if np.any(np.asarray(hyp_len) < 1):
        raise ValueError("hypothesis must be non-empty")
    own, _ = bundle.side(direction)
    if h is None:
        h = own.encode(src, src_len)
    q = bundle.posterior(src, src_len, hyp, hyp_len, direction)
    return _nat_decode(own, q.mean, h, src_len)


def translate_nat_batch(sentences, bundle: ModelBundle, direction="fwd", refinements=3,
                        batch_size=256):
    """Translate with the prior mean, then ``refinements`` posterior-mean rounds. Never sees references."""
    if bundle.kind == "AT":
        raise ValueError("translate_nat needs a latent-variable bundle")
    if refinements < 0:
        raise ValueError("refinements must be >= 0")
    own, _ = bundle.side(direction)
    sentences = _as_list(sentences)
    out = [None] * len(sentences)
    order = np.argsort([len(s) for s in sentences], kind="stable")
    with T.no_grad():
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            src, src_len = pad([sentences[i] for i in idx])
            h, prior = own.prior(src, src_len)
            hyp, hyp_len = _nat_decode(own, prior.mean, h, src_len)
            for _ in range(refinements):
                hyp, hyp_len = refine(src, src_len, hyp, hyp_len, bundle, direction, h=h)
            for k, i in enumerate(idx):
                out[i] = hyp[k, :hyp_len[k]].copy()
    return out


def translate_nat(x, bundle: ModelBundle, refinements=3, direction="fwd"):
    own, _ = bundle.side(direction)
    before = own.decoder.passes
    t0 = time.perf_counter()
    tokens = translate_nat_batch([x], bundle, direction, refinements)[0]
    dt = time.perf_counter() - t0
    flags = () if getattr(bundle, "trained", True) else ("untrained",)
    return TranslationResult(tokens, refinements, dt, own.decoder.passes - before, flags)


def translate_at_batch(sentences, bundle: ModelBundle, max_extra=10, batch_size=256, max_len=None):
    """Greedy AT decoding; each output keeps its trailing eos when one was emitted."""
    if bundle.kind != "AT":
        raise ValueError("translate_at needs an AT bundle")
    d = bundle.theta
    sentences = _as_list(sentences)
    out = [None] * len(sentences)
    order = np.argsort([len(s) for s in sentences], kind="stable")
    limit_cap = bundle.block.max_positions - 1
    with T.no_grad():
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            src, src_len = pad([sentences[i] for i in idx])
            limits = np.minimum(src_len + max_extra if max_len is None else np.full(len(idx), max_len), limit_cap)
            h = d.encode(src, src_len)
            b = len(idx)
            prefix = np.full((b, 1), EOS, dtype=int)
            done = np.zeros(b, dtype=bool)
            emitted = np.zeros(b, dtype=int)
            for t in range(int(limits.max())):
                logits = d.decode_ar(prefix, np.full(b, t + 1), h, src_len)
                nxt = np.argmax(logits.data[:, -1], axis=-1)
                active = ~done & (t < limits)
                emitted += active
                prefix = np.concatenate([prefix, np.where(active, nxt, 0)[:, None]], axis=1)
                done |= active & (nxt == EOS)
                if np.all(done | (t + 1 >= limits)):
                    break
            for k, i in enumerate(idx):
                out[i] = prefix[k, 1:1 + emitted[k]].copy()
    return out


def translate_at(x, bundle: ModelBundle, max_len=None, max_extra=10):
    before = bundle.theta.decoder.passes
    t0 = time.perf_counter()
    tokens = translate_at_batch([x], bundle, max_extra=max_extra, max_len=max_len)[0]
    dt = time.perf_counter() - t0
    return TranslationResult(tokens, 0, dt, bundle.theta.decoder.passes - before)


# -- BLEU --------------------------------------------------------------------------

def _ngrams(seq, n):
    seq = tuple(int(t) for t in seq)
    return Counter(seq[i:i + n] for i in range(len(seq) - n + 1))


def bleu_stats(hypotheses, references, max_n=4):
    """Clipped n-gram matches, hypothesis n-gram totals, hypothesis and reference lengths.

    ``references[i]`` is either one token sequence or a list of alternatives.
    """
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in count")
    if not hypotheses:
        raise ValueError("empty corpus")
    match = np.zeros(max_n)
    total = np.zeros(max_n)
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        if len(refs) and np.ndim(refs[0]) == 0:
            refs = [refs]
        hyp = list(hyp)
        hyp_len += len(hyp)
        # closest reference length, shorter wins ties
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            h = _ngrams(hyp, n)
            best = Counter()
            for r in refs:
                best |= _ngrams(r, n)
            match[n - 1] += sum(min(c, best[g]) for g, c in h.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    return match, total, hyp_len, ref_len


def bleu(hypotheses, references, max_n=4):
    """Corpus BLEU-4 in [0, 1] on token ids, uniform weights, no smoothing."""
    match, total, c, r = bleu_stats(hypotheses, references, max_n)
    if c == 0 or np.any(match == 0):
        return 0.0
    log_p = np.log(match / total).mean()
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return float(bp * math.exp(log_p))


def sentence_bleu(hyp, ref, max_n=4):
    return bleu([hyp], [ref], max_n)


# -- speed -------------------------------------------------------------------------

def _timed_total(fn, sentences, min_seconds):
    reps = 0
    t0 = time.perf_counter()
    while True:
        for s in sentences:
            fn(s)
        reps += 1
        elapsed = time.perf_counter() - t0
        if elapsed >= min_seconds:
            return elapsed / reps


def speed_bench(nat_bundle, at_bundle, sentences, refinements=3, runs=3, min_seconds=0.1,
                at_max_extra=10):
    """Ratio of AT to NAT wall-clock over the same sentences at batch size 1 (median of ``runs``).

    Passing a latent bundle as ``at_bundle`` times NAT against itself.
    """
    sentences = _as_list(sentences)
    if not sentences:
        raise ValueError("no sentences to benchmark")

    def runner(bundle):
        if bundle.kind == "AT":
            return lambda s: translate_at_batch([s], bundle, max_extra=at_max_extra)
        return lambda s: translate_nat_batch([s], bundle, "fwd", refinements)

    nat, at = runner(nat_bundle), runner(at_bundle)
    ratios, nat_t, at_t = [], [], []
    with threadpool_limits(1):
        for _ in range(runs):
            a = _timed_total(at, sentences, min_seconds)
            n = _timed_total(nat, sentences, min_seconds)
            at_t.append(a)
            nat_t.append(n)
            ratios.append(a / n)
    return {"ratio": statistics.median(ratios), "at_seconds": statistics.median(at_t),
            "nat_seconds": statistics.median(nat_t), "sentences": len(sentences)}


BENCH_COLUMNS = ["model", "length_bucket", "sentences", "seconds", "ratio"]


def write_bench(path, rows, header=None):
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow([r[c] for c in BENCH_COLUMNS])


def write_translations(path, outputs, header=None):
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        for o in outputs:
            fh.write(" ".join(map(str, o)) + "\n")
