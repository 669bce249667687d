"""Closed-form latent mathematics: Gaussian heads, fusion, KL, sampling, length transform.

All functions take and return :class:`~laddernat.tensor.Tensor` objects (numpy
arrays are accepted and wrapped as constants), so they can sit inside a
training graph or be called directly on plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

VARIANCE_FLOOR = 1e-8


@dataclass
class GaussianSeq:
    """Diagonal Gaussian over a latent sequence; ``var`` holds variances, not std-devs.

    Shapes are ``(..., T_z, D_z)``; a leading batch dimension is allowed.
    """

    mean: Tensor
    var: Tensor

    def __post_init__(self):
        self.mean = T.as_tensor(self.mean)
        self.var = T.as_tensor(self.var)
        if self.mean.shape != self.var.shape:
            raise T.ShapeError(f"mean {self.mean.shape} and variance {self.var.shape} differ")

    @property
    def shape(self):
        return self.mean.shape

    def check(self):
        v = self.var.data
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise ValueError("variances must be positive and finite")
        return self

    def detach(self):
        return GaussianSeq(self.mean.detach(), self.var.detach())


@dataclass(frozen=True)
class SharingMask:
    shared_dims: int
    mask: np.ndarray

    @property
    def dim(self):
        return len(self.mask)


def make_sharing_mask(d_z, rho, seed=None):
    """Mark the leading ``round(d_z * rho)`` latent dimensions as shared.

    ``seed`` is accepted for interface stability; the selection is deterministic.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"sharing ratio must lie in [0, 1], got {rho}")
    n = int(round(d_z * rho))
    mask = np.zeros(d_z, dtype=bool)
    mask[:n] = True
    return SharingMask(n, mask)


def interpolation_weights(src_lengths, out_lengths, t_max=None, l_max=None):
    """Row-stochastic (B, l_max, t_max) matrices for order-preserving linear resampling.

    Output position i of item b reads source coordinate ``i * (T_b - 1) / (l_b - 1)``;
    for ``l_b == 1`` the single output is the mean over source positions.
    Rows past ``l_b`` are zero.
    """
    src_lengths = np.atleast_1d(np.asarray(src_lengths, dtype=int))
    out_lengths = np.broadcast_to(np.atleast_1d(np.asarray(out_lengths, dtype=int)), src_lengths.shape)
    if np.any(out_lengths <= 0):
        raise ValueError("target length must be >= 1")
    if np.any(src_lengths <= 0):
        raise ValueError("source length must be >= 1")
    t_max = t_max or int(src_lengths.max())
    l_max = l_max or int(out_lengths.max())
    w = np.zeros((len(src_lengths), l_max, t_max))
    for b, (t, l) in enumerate(zip(src_lengths, out_lengths)):
        if l == 1:
            w[b, 0, :t] = 1.0 / t
            continue
        i = np.arange(l)
        coord = i * (t - 1) / (l - 1)
        lo = np.floor(coord).astype(int)
        hi = np.minimum(lo + 1, t - 1)
        frac = coord - lo
        w[b, i, lo] += 1.0 - frac
        w[b, i, hi] += frac
    return w


def length_transform(seq, out_lengths, src_lengths=None):
    """Resample ``seq`` (T, D) or (B, T, D) to the requested length(s)."""
    seq = T.as_tensor(seq)
    if seq.ndim == 2:
        if np.ndim(out_lengths) and np.size(out_lengths) != 1:
            raise ValueError("unbatched sequence needs a single output length")
        l = int(np.ravel(out_lengths)[0])
        t = seq.shape[0] if src_lengths is None else int(np.ravel(src_lengths)[0])
        w = interpolation_weights([t], [l], t_max=seq.shape[0])[0]
        return Tensor(w) @ seq
    b, t_max = seq.shape[0], seq.shape[1]
    if src_lengths is None:
        src_lengths = np.full(b, t_max)
    out_lengths = np.broadcast_to(np.asarray(out_lengths), (b,))
    w = interpolation_weights(src_lengths, out_lengths, t_max=t_max)
    return Tensor(w) @ seq


def gaussian_head(h, w_mean, w_var, t_z, lengths=None):
    """Map hidden states to a length-``t_z`` diagonal Gaussian.

    ``w_mean`` and ``w_var`` are callables (linear layers). Softplus output
    is used directly as the variance and floored at ``VARIANCE_FLOOR``.
    """
    if h.shape[-2] < 1:
        raise ValueError("hidden sequence is empty")
    mu = w_mean(h)
    var = T.clip_min(T.softplus(w_var(h)), VARIANCE_FLOOR)
    if not (np.all(np.isfinite(mu.data)) and np.all(np.isfinite(var.data))):
        raise FloatingPointError("non-finite activations in Gaussian head")
    return GaussianSeq(length_transform(mu, t_z, lengths), length_transform(var, t_z, lengths))


def _positive(q: GaussianSeq, label):
    if np.any(q.var.data <= 0):
        raise ValueError(f"{label}: variances must be positive")


def fuse_gaussians(q_x: GaussianSeq, q_y: GaussianSeq, mask: SharingMask | None = None, keep="x"):
    """Precision-weighted product of two Gaussians on shared dimensions.

    Non-shared dimensions copy the ``keep`` side unchanged.
    """
    if q_x.shape != q_y.shape:
        raise T.ShapeError(f"cannot fuse shapes {q_x.shape} and {q_y.shape}")
    _positive(q_x, "fuse_gaussians")
    _positive(q_y, "fuse_gaussians")
    if keep not in ("x", "y"):
        raise ValueError("keep must be 'x' or 'y'")
    prec_x = 1.0 / q_x.var
    prec_y = 1.0 / q_y.var
    var = 1.0 / (prec_x + prec_y)
    mean = (q_x.mean * prec_x + q_y.mean * prec_y) * var
    if mask is None or mask.shared_dims == mask.dim:
        return GaussianSeq(mean, var)
    if mask.dim != q_x.shape[-1]:
        raise T.ShapeError(f"sharing mask has {mask.dim} dims, latent has {q_x.shape[-1]}")
    side = q_x if keep == "x" else q_y
    return GaussianSeq(T.where(mask.mask, mean, side.mean), T.where(mask.mask, var, side.var))


def kl_gaussian(q: GaussianSeq, p: GaussianSeq):
    """Element-wise KL(q || p) between diagonal Gaussians, same shape as the inputs."""
    if q.shape != p.shape:
        raise T.ShapeError(f"KL shapes differ: {q.shape} vs {p.shape}")
    _positive(q, "kl_gaussian")
    _positive(p, "kl_gaussian")
    diff = q.mean - p.mean
    return 0.5 * T.log(p.var / q.var) + (q.var + diff * diff) / (2.0 * p.var) - 0.5


def reparameterize(q: GaussianSeq, noise):
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != q.shape:
        raise T.ShapeError(f"noise shape {noise.shape} does not match {q.shape}")
    return q.mean + T.sqrt(q.var) * Tensor(noise)
