"""Training objectives and loops.

LaNMT is trained with one ELBO per direction, each with its own posterior
network. LadderNMT is trained with the supervised dual-reconstruction ELBO:
one latent sample from the collaborative posterior is used to rebuild the
source (through phi) and then reused to rebuild the target (through theta).
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import Batch, batch as make_batches
from .latent import fuse_gaussians, kl_gaussian, reparameterize
from .models import MAX_OFFSET, ModelBundle, config_hash, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "lr", "token_ll", "length_ll", "kl", "total", "valid_bleu_fwd", "valid_bleu_rev"]


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 1.0
    rho: float = 1.0
    lr_peak: float = 1e-3
    warmup_steps: int = 200
    batch_size: int = 64
    max_steps: int = 2000
    patience: int = 5
    seed: int = 0
    validate_every: int = 200
    valid_sentences: int = 200
    valid_refinements: int = 1
    label_smoothing: float = 0.1
    clip_norm: float = 1.0
    max_bad_steps: int = 10
    reuse_latent: bool = True

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossBreakdown:
    """Per-sentence averages; ``total = -(token_ll + length_ll) + beta * kl``."""

    token_ll: float
    length_ll: float
    kl: float
    beta: float
    loss: Tensor = field(default=None, repr=False, compare=False)
    samples: tuple = field(default=(), repr=False, compare=False)

    @property
    def total(self):
        return -(self.token_ll + self.length_ll) + self.beta * self.kl

    def __add__(self, other):
        if self.beta == other.beta:
            kl, beta = self.kl + other.kl, self.beta
        else:
            # fold differing coefficients into kl so total stays additive
            kl, beta = self.beta * self.kl + other.beta * other.kl, 1.0
        loss = None if self.loss is None or other.loss is None else self.loss + other.loss
        return LossBreakdown(self.token_ll + other.token_ll, self.length_ll + other.length_ll,
                             kl, beta, loss, self.samples + other.samples)

    def as_row(self):
        return {"token_ll": self.token_ll, "length_ll": self.length_ll, "kl": self.kl, "total": self.total}


# -- likelihood pieces ---------------------------------------------------------

def token_log_likelihood(logits, targets, lengths, smoothing=0.0):
    """Mean over sentences of summed target log-probabilities (optionally label-smoothed)."""
    targets = np.asarray(targets)
    lengths = np.asarray(lengths)
    n = targets.shape[1]
    if logits.shape[1] != n:
        raise T.ShapeError(f"logits cover {logits.shape[1]} positions, targets {n}")
    logp = T.log_softmax(logits)
    ll = T.pick(logp, targets)
    if smoothing:
        valid = logits.data[0, 0] > -1e8  # banned ids are excluded from the smoothing mass
        uniform = (logp * Tensor(valid / valid.sum())).sum(axis=-1)
        ll = ll * (1.0 - smoothing) + uniform * smoothing
    mask = (np.arange(n)[None] < lengths[:, None]).astype(float)
    return (ll * Tensor(mask)).sum() * (1.0 / len(lengths))


def length_log_likelihood(logits, target_lengths, source_lengths):
    offsets = np.clip(np.asarray(target_lengths) - np.asarray(source_lengths), -MAX_OFFSET, MAX_OFFSET)
    return T.pick(T.log_softmax(logits), offsets + MAX_OFFSET).mean()


def _noise(shape, rng, noise):
    if noise is not None:
        return noise
    if rng is None:
        return np.zeros(shape)
    return rng.standard_normal(shape)


def _breakdown(tok, length, kl, beta, samples=()):
    loss = -(tok + length) + kl * beta
    return LossBreakdown(tok.item(), length.item(), kl.item(), beta, loss, samples)


# -- objectives ----------------------------------------------------------------

def elbo_lanmt(b: Batch, bundle: ModelBundle, beta, direction="fwd", noise=None, rng=None):
    """Negative ELBO of one LaNMT direction with its separate posterior network."""
    if bundle.kind != "LaNMT":
        raise ValueError("elbo_lanmt needs a LaNMT bundle")
    own, _ = bundle.side(direction)
    if direction == "rev":
        b = b.swapped()
    h, prior = own.prior(b.src, b.src_len)
    q = own.posterior_lanmt(b.src, b.src_len, b.tgt, b.tgt_len)
    z = reparameterize(q, _noise(q.shape, rng, noise))
    logits = own.decode_from_latent(z, h, b.src_len, b.tgt_len)
    tok = token_log_likelihood(logits, b.tgt, b.tgt_len)
    length = length_log_likelihood(own.length_logits(z, h, b.src_len), b.tgt_len, b.src_len)
    kl = kl_gaussian(q, prior).sum() * (1.0 / b.size)
    return _breakdown(tok, length, kl, beta, (z,))


def ladder_encodings(b: Batch, bundle: ModelBundle):
    hx, qx = bundle.theta.prior(b.src, b.src_len)
    hy, qy = bundle.phi.prior(b.tgt, b.tgt_len)
    return hx, qx, hy, qy


def elbo_ladder_sup(b: Batch, direction, bundle: ModelBundle, beta, noise=None, rng=None,
                    z=None, cache=None):
    """Negative supervised LadderNMT ELBO for one reconstruction direction.

    ``src-recon``: fuse both encoder heads (non-shared dims keep x), decode x
    with phi's decoder over y's encoding, KL against the y-encoder head.
    ``tgt-recon`` mirrors every role.
    """
    if bundle.kind != "LadderNMT":
        raise ValueError("elbo_ladder_sup needs a LadderNMT bundle")
    hx, qx, hy, qy = cache if cache is not None else ladder_encodings(b, bundle)
    if direction == "src-recon":
        q = fuse_gaussians(qx, qy, bundle.mask, keep="x")
        prior, gen, mem, mem_len, out, out_len = qy, bundle.phi, hy, b.tgt_len, b.src, b.src_len
    elif direction == "tgt-recon":
        q = fuse_gaussians(qx, qy, bundle.mask, keep="y")
        prior, gen, mem, mem_len, out, out_len = qx, bundle.theta, hx, b.src_len, b.tgt, b.tgt_len
    else:
        raise ValueError("direction must be 'src-recon' or 'tgt-recon'")
    if z is None:
        z = reparameterize(q, _noise(q.shape, rng, noise))
    logits = gen.decode_from_latent(z, mem, mem_len, out_len)
    tok = token_log_likelihood(logits, out, out_len)
    length = length_log_likelihood(gen.length_logits(z, mem, mem_len), out_len, mem_len)
    kl = kl_gaussian(q, prior).sum() * (1.0 / b.size)
    return _breakdown(tok, length, kl, beta, (z,))


def dual_step(b: Batch, bundle: ModelBundle, config: TrainConfig, rng=None, optimizer=None,
              lr=None, reuse=None):
    """Both reconstructions with one shared latent sample; optionally one optimizer update."""
    reuse = config.reuse_latent if reuse is None else reuse
    cache = ladder_encodings(b, bundle)
    hx, qx, hy, qy = cache
    q_src = fuse_gaussians(qx, qy, bundle.mask, keep="x")
    z = reparameterize(q_src, _noise(q_src.shape, rng, None))
    src = elbo_ladder_sup(b, "src-recon", bundle, config.beta, z=z, cache=cache)
    tgt = elbo_ladder_sup(b, "tgt-recon", bundle, config.beta, z=z if reuse else None,
                          rng=rng, cache=cache)
    total = src + tgt
    if optimizer is not None:
        optimizer.update(total.loss, lr)
    return total


def lanmt_step(b: Batch, bundle: ModelBundle, config: TrainConfig, rng=None, optimizer=None, lr=None):
    total = elbo_lanmt(b, bundle, config.beta, "fwd", rng=rng) + elbo_lanmt(b, bundle, config.beta, "rev", rng=rng)
    if optimizer is not None:
        optimizer.update(total.loss, lr)
    return total


def at_step(b: Batch, bundle: ModelBundle, config: TrainConfig, rng=None, optimizer=None, lr=None):
    """Teacher-forced AT cross-entropy; the decoder reads ``[eos] + y`` and predicts ``y + [eos]``."""
    d = bundle.theta
    h = d.encode(b.src, b.src_len)
    bsz, n = b.tgt.shape
    inp = np.zeros((bsz, n + 1), dtype=int)
    inp[:, 0] = 1
    inp[:, 1:] = b.tgt
    out = np.zeros((bsz, n + 1), dtype=int)
    out[:, :n] = b.tgt
    out[np.arange(bsz), b.tgt_len] = 1
    logits = d.decode_ar(inp, b.tgt_len + 1, h, b.src_len)
    tok = token_log_likelihood(logits, out, b.tgt_len + 1, config.label_smoothing)
    zero = Tensor(0.0)
    res = _breakdown(tok, zero, zero, 0.0)
    if optimizer is not None:
        optimizer.update(res.loss, lr)
    return res


STEPS = {"LadderNMT": dual_step, "LaNMT": lanmt_step, "AT": at_step}


# -- optimisation --------------------------------------------------------------

def lr_schedule(step, config: TrainConfig):
    if step < 1:
        raise ValueError("step must be >= 1")
    w = config.warmup_steps
    return config.lr_peak * min(step / w, math.sqrt(w / step))


class Adam:
    def __init__(self, params, betas=(0.9, 0.98), eps=1e-9, clip_norm=0.0):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def update(self, loss, lr):
        if not np.isfinite(loss.data).all():
            raise FloatingPointError("non-finite loss")
        self.zero_grad()
        loss.backward()
        self.step(lr)

    def step(self, lr):
        grads = [p.grad for p in self.params]
        if self.clip_norm:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads if g is not None))
            if norm > self.clip_norm:
                grads = [None if g is None else g * (self.clip_norm / norm) for g in grads]
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- training loop ---------------------------------------------------------------

@dataclass
class TrainResult:
    bundle: ModelBundle
    log: list
    best_step: int
    best_score: float
    stopped_early: bool
    seconds: float


def _format(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def write_metrics(path, rows, header=None):
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_format(r.get(c)) for c in METRIC_COLUMNS])


def validate(bundle, valid_pairs, config, refs=None):
    """Validation BLEU in each direction the bundle supports."""
    from .inference import bleu, translate_at_batch, translate_nat_batch

    pairs = valid_pairs[:config.valid_sentences]
    refs_fwd, refs_rev = refs if refs is not None else (None, None)
    refs_fwd = [[p.target] for p in pairs] if refs_fwd is None else refs_fwd[:len(pairs)]
    if bundle.kind == "AT":
        hyp = [h[h != 1] for h in translate_at_batch([p.source for p in pairs], bundle)]
        return bleu(hyp, refs_fwd), None
    refs_rev = [[p.source] for p in pairs] if refs_rev is None else refs_rev[:len(pairs)]
    fwd = translate_nat_batch([p.source for p in pairs], bundle, "fwd", config.valid_refinements)
    rev = translate_nat_batch([p.target for p in pairs], bundle, "rev", config.valid_refinements)
    return bleu(fwd, refs_fwd), bleu(rev, refs_rev)


def train(bundle: ModelBundle, train_pairs, valid_pairs, config: TrainConfig, metrics_path=None,
          checkpoint=None, valid_refs=None, header=None):
    """Train until ``max_steps`` or until validation BLEU stalls for ``patience`` checks.

    The best-scoring parameters are restored on return. ``checkpoint`` is an
    optional ``(root, run_id)`` pair; the best state is written there.
    """
    if not train_pairs:
        raise ValueError("training corpus is empty")
    if not valid_pairs:
        raise ValueError("validation corpus is empty")
    step_fn = STEPS[bundle.kind]
    rng = np.random.default_rng([config.seed, 11])
    opt = Adam(bundle.parameters(), clip_norm=config.clip_norm)
    rows, acc = [], []
    best, best_step, best_state, bad_checks, bad_steps = -1.0, 0, bundle.state_dict(), 0, 0
    stopped = False
    start = time.perf_counter()
    step, epoch = 0, 0
    while step < config.max_steps and not stopped:
        batches = make_batches(train_pairs, config.batch_size, seed=[config.seed, 12, epoch])
        epoch += 1
        for b in batches:
            step += 1
            lr = lr_schedule(step, config)
            bundle.train(rng)
            try:
                res = step_fn(b, bundle, config, rng=rng, optimizer=opt, lr=lr)
                acc.append(res.as_row())
                bad_steps = 0
            except FloatingPointError as exc:
                bad_steps += 1
                log.warning("step %d skipped: %s", step, exc)
                if bad_steps >= config.max_bad_steps:
                    raise FloatingPointError(f"{bad_steps} consecutive non-finite steps at step {step}") from exc
            if step % config.validate_every == 0 or step == config.max_steps:
                bundle.eval()
                with T.no_grad():
                    fwd, rev = validate(bundle, valid_pairs, config, valid_refs)
                score = fwd if rev is None else 0.5 * (fwd + rev)
                row = {"step": step, "lr": lr, "valid_bleu_fwd": fwd, "valid_bleu_rev": rev}
                if acc:
                    row.update({k: float(np.mean([a[k] for a in acc])) for k in acc[0]})
                acc = []
                rows.append(row)
                log.info("%s step %d: %s", bundle.kind, step, row)
                if score > best:
                    best, best_step, best_state, bad_checks = score, step, bundle.state_dict(), 0
                else:
                    bad_checks += 1
                    if bad_checks >= config.patience:
                        stopped = True
                        break
            if step >= config.max_steps:
                break
    bundle.load_state_dict(best_state)
    bundle.eval()
    if metrics_path:
        write_metrics(metrics_path, rows, header)
    if checkpoint is not None:
        root, run_id = checkpoint
        from .models import checkpoint_path
        save_checkpoint(bundle, checkpoint_path(root, run_id, bundle.kind, best_step),
                        {"train_config": config.to_dict(), "train_config_hash": config_hash(config.to_dict())})
    return TrainResult(bundle, rows, best_step, best, stopped, time.perf_counter() - start)
