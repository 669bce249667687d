"""Latent-space diagnostics: CCA alignment, relative sensitivity, PCA export, language purity."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import tensor as T
from .data import RESERVED, pad
from .models import ModelBundle

SIDES = ("source", "target")


@dataclass
class LatentMatrix:
    rows: np.ndarray
    side: str
    ids: np.ndarray

    def __post_init__(self):
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}")
        self.rows = np.asarray(self.rows, dtype=float)
        if self.ids is None:
            self.ids = np.arange(len(self.rows))

    def __len__(self):
        return len(self.rows)


def collect_latents(bundle: ModelBundle, pairs, side="source", batch_size=256):
    """Flattened prior means, one row per sentence, from that side's own encoder head."""
    if bundle.kind == "AT":
        raise ValueError("AT bundles have no latent space")
    model = bundle.theta if side == "source" else bundle.phi
    sents = [p.source if side == "source" else p.target for p in pairs]
    rows = []
    with T.no_grad():
        for start in range(0, len(sents), batch_size):
            x, lens = pad(sents[start:start + batch_size])
            _, prior = model.prior(x, lens)
            rows.append(prior.mean.data.reshape(len(lens), -1))
    return LatentMatrix(np.concatenate(rows), side, np.arange(len(sents)))


def _aligned(a: LatentMatrix, b: LatentMatrix):
    if len(a) != len(b):
        raise ValueError("latent matrices differ in row count")
    if a.ids is not None and b.ids is not None and not np.array_equal(a.ids, b.ids):
        raise ValueError("latent matrices are not aligned by sentence id")


def _rows(m):
    return m.rows if isinstance(m, LatentMatrix) else np.asarray(m, dtype=float)


@dataclass
class CcaModel:
    w_src: np.ndarray
    w_tgt: np.ndarray
    mean_src: np.ndarray
    mean_tgt: np.ndarray
    correlations: np.ndarray
    regression: np.ndarray

    @property
    def k(self):
        return len(self.correlations)

    def project(self, src=None, tgt=None):
        out = []
        if src is not None:
            out.append((_rows(src) - self.mean_src) @ self.w_src)
        if tgt is not None:
            out.append((_rows(tgt) - self.mean_tgt) @ self.w_tgt)
        return out[0] if len(out) == 1 else tuple(out)


def _inv_sqrt(c):
    vals, vecs = np.linalg.eigh(c)
    if vals.min() <= 0:
        raise np.linalg.LinAlgError("covariance not positive definite after ridge")
    return (vecs / np.sqrt(vals)) @ vecs.T


def cca_fit(z_src, z_tgt, k=16, ridge=1e-6):
    """Linear CCA via SVD of the whitened cross-covariance, plus a target-to-source regression map."""
    if isinstance(z_src, LatentMatrix) and isinstance(z_tgt, LatentMatrix):
        _aligned(z_src, z_tgt)
    x, y = _rows(z_src), _rows(z_tgt)
    n = len(x)
    if len(y) != n:
        raise ValueError("latent matrices differ in row count")
    if not 1 <= k <= min(n - 1, x.shape[1], y.shape[1]):
        raise ValueError(f"k={k} must lie in [1, min(n-1, width)]")
    mx, my = x.mean(0), y.mean(0)
    xc, yc = x - mx, y - my
    cxx = xc.T @ xc / (n - 1) + ridge * np.eye(x.shape[1])
    cyy = yc.T @ yc / (n - 1) + ridge * np.eye(y.shape[1])
    cxy = xc.T @ yc / (n - 1)
    wx, wy = _inv_sqrt(cxx), _inv_sqrt(cyy)
    u, s, vt = np.linalg.svd(wx @ cxy @ wy, full_matrices=False)
    a = wx @ u[:, :k]
    b = wy @ vt[:k].T
    cx, cy = xc @ a, yc @ b
    reg, *_ = np.linalg.lstsq(cy, cx, rcond=None)
    return CcaModel(a, b, mx, my, s[:k], reg)


def cca_score(model: CcaModel, z_src, z_tgt):
    """R^2 of predicting source canonical coordinates from target ones (can be negative)."""
    x, y = _rows(z_src), _rows(z_tgt)
    if x.shape[1] != len(model.mean_src) or y.shape[1] != len(model.mean_tgt):
        raise ValueError("matrix width does not match the CCA model")
    cx, cy = model.project(x, y)
    pred = cy @ model.regression
    resid = ((cx - pred) ** 2).sum()
    spread = ((cx - cx.mean(0)) ** 2).sum()
    return float(1.0 - resid / spread)


def language_purity(z_src, z_tgt, k=5):
    """Mean fraction of each row's k nearest neighbours (pooled, self excluded) sharing its language."""
    a, b = _rows(z_src), _rows(z_tgt)
    pts = np.concatenate([a, b])
    lang = np.r_[np.zeros(len(a)), np.ones(len(b))]
    d = cdist(pts, pts)
    np.fill_diagonal(d, np.inf)
    nn = np.argsort(d, axis=1, kind="stable")[:, :k]
    return float((lang[nn] == lang[:, None]).mean())


# -- relative sensitivity -----------------------------------------------------------

def perturb(tokens, words_changed, trials, vocab_size, rng):
    """``trials`` copies of ``tokens`` with ``words_changed`` random positions set to random content ids."""
    tokens = np.asarray(tokens)
    if words_changed >= len(tokens) or words_changed < 1:
        raise ValueError(f"cannot change {words_changed} words of a length-{len(tokens)} sentence")
    out = np.repeat(tokens[None], trials, axis=0)
    for t in range(trials):
        pos = rng.choice(len(tokens), size=words_changed, replace=False)
        out[t, pos] = rng.integers(RESERVED, vocab_size, size=words_changed)
    return out


def _posterior_means(bundle, src, src_len, tgt, tgt_len):
    q = bundle.posterior(src, src_len, tgt, tgt_len, "fwd")
    return q.mean.data.reshape(len(src_len), -1)


def relative_sensitivity(bundle: ModelBundle, pairs, words_changed=1, trials=100, seed=0,
                         return_parts=False):
    """Mean posterior-mean displacement under source perturbation divided by that under target perturbation.

    Source and target perturbations for pair ``i`` are drawn from identically
    seeded streams, so mirrored inputs receive mirrored edits.
    """
    if bundle.kind == "AT":
        raise ValueError("AT bundles have no posterior")
    s_src, s_tgt = [], []
    with T.no_grad():
        for i, p in enumerate(pairs):
            x, y = np.asarray(p.source), np.asarray(p.target)
            base = _posterior_means(bundle, x[None], [len(x)], y[None], [len(y)])
            xs = perturb(x, words_changed, trials, bundle.src_vocab, np.random.default_rng([seed, i]))
            ys = perturb(y, words_changed, trials, bundle.tgt_vocab, np.random.default_rng([seed, i]))
            mu = _posterior_means(bundle, xs, np.full(trials, len(x)), np.repeat(y[None], trials, 0),
                                  np.full(trials, len(y)))
            s_src.append(np.linalg.norm(mu - base, axis=1).mean())
            mu = _posterior_means(bundle, np.repeat(x[None], trials, 0), np.full(trials, len(x)), ys,
                                  np.full(trials, len(y)))
            s_tgt.append(np.linalg.norm(mu - base, axis=1).mean())
    src, tgt = float(np.mean(s_src)), float(np.mean(s_tgt))
    ratio = src / tgt if tgt > 0 else float("inf")
    return (ratio, src, tgt) if return_parts else ratio


# -- PCA & export ---------------------------------------------------------------------

@dataclass
class Projection:
    coords: np.ndarray
    languages: np.ndarray
    explained_ratio: np.ndarray


def pca_project(z_src, z_tgt, dims=2):
    """Joint PCA of both sides; returns centred coordinates with language labels."""
    pts = np.concatenate([_rows(z_src), _rows(z_tgt)])
    if len(pts) < 3:
        raise ValueError("PCA needs at least 3 rows")
    centred = pts - pts.mean(0)
    u, s, vt = np.linalg.svd(centred, full_matrices=False)
    if s[0] <= 1e-12 * max(1.0, np.abs(pts).max()):
        raise ValueError("degenerate covariance: all rows identical")
    var = s ** 2
    langs = np.array(["source"] * len(_rows(z_src)) + ["target"] * len(_rows(z_tgt)))
    return Projection(centred @ vt[:dims].T, langs, (var / var.sum())[:dims])


def export_latents(path, z_src: LatentMatrix, z_tgt: LatentMatrix, header=None):
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        width = z_src.rows.shape[1]
        w.writerow(["sentence_id", "language"] + [f"z{i}" for i in range(width)])
        for m in (z_src, z_tgt):
            for sid, row in zip(m.ids, m.rows):
                w.writerow([int(sid), m.side] + [repr(float(v)) for v in row])


REPORT_COLUMNS = ["metric", "model", "value", "seed", "config_hash"]


def write_report(path, rows, header=None):
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            v = r["value"]
            w.writerow([r["metric"], r["model"], repr(round(float(v), 10)), r["seed"], r["config_hash"]])
