"""Loss terms for generator training, initialization, ablations and fine-tuning.

Conventions shared by every function here:

* The first argument is the target-image / target-model branch and is treated
  as a constant (detached); gradients flow only through the second argument,
  the generated-image / source-model branch.
* Feature maps are batched, shape (B, D, H, W); a single (D, H, W) map is
  accepted and treated as a batch of one. Per-image losses are batch-means.
* Probabilities are clamped below by ``EPS`` inside logarithms and
  ``0 * log 0`` is taken as 0.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import EmptyBatch, IndexOutOfRange, LayerCountMismatch, NonDistribution, ShapeMismatch

EPS = 1e-8


@dataclass
class LossWeights:
    w_kd: float = 1.0
    w_rp: float = 1.0
    w_style: float = 0.0
    w_batch: float = 0.0
    w_pixel: float = 0.0
    w_bn: float = 0.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")

    def items(self):
        """(term name, weight) pairs, e.g. ("kd", 1.0)."""
        return [(name[2:], value) for name, value in asdict(self).items()]


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def _batched_maps(f):
    if f.ndim == 3:
        return f.unsqueeze(0)
    if f.ndim != 4:
        raise ShapeMismatch(f"feature maps must be (D, H, W) or (B, D, H, W), got {tuple(f.shape)}")
    return f


def _xlogy(p, q):
    """p * log(q) with the 0 * log 0 = 0 convention and q clamped at EPS."""
    return torch.where(p > 0, p * torch.log(q.clamp_min(EPS)), torch.zeros_like(p))


def _check_rows(p, what):
    if p.ndim != 2:
        raise ShapeMismatch(f"{what}: expected (B, C) probability rows, got {tuple(p.shape)}")
    err = (p.detach().sum(dim=1) - 1).abs().max() if len(p) else 0
    if err > 1e-3:
        raise NonDistribution(f"{what}: row sums deviate from 1 by {float(err):.3g}")


# ----------------------------------------------------------- distillation

def kd_loss(p_target, p_source):
    """Batch-mean KL(p_target || p_source)."""
    _same_shape(p_target, p_source, "kd_loss")
    _check_rows(p_target, "kd_loss target")
    _check_rows(p_source, "kd_loss source")
    p_t = p_target.detach()
    kl = _xlogy(p_t, p_t) - _xlogy(p_t, p_source)
    return kl.sum(dim=1).mean()


# ------------------------------------------------- Gram-matrix based losses

def reshape_features(f):
    """(…, D, H, W) -> (…, D, H*W), rows are flattened channels."""
    return f.reshape(*f.shape[:-2], f.shape[-2] * f.shape[-1])


def gram(f):
    """Channel self-correlation F F^T of a (D, H, W) or (B, D, H, W) map."""
    flat = reshape_features(f)
    return flat @ flat.transpose(-1, -2)


def normalize_rows(g, eps: float = EPS):
    norms = torch.linalg.vector_norm(g, dim=-1, keepdim=True)
    return g / norms.clamp_min(eps)


def rp_loss(f_target, f_source):
    """MSE between row-normalized channel Gram matrices, scaled by 1/D."""
    f_t, f_s = _batched_maps(f_target.detach()), _batched_maps(f_source)
    _same_shape(f_t, f_s, "rp_loss")
    diff = normalize_rows(gram(f_s)) - normalize_rows(gram(f_t))
    return diff.pow(2).sum(dim=(-2, -1)).mean() / f_s.shape[1]


def style_loss(f_target, f_source):
    """Gatys-style loss on raw Gram matrices, scaled by 1/D^2."""
    f_t, f_s = _batched_maps(f_target.detach()), _batched_maps(f_source)
    _same_shape(f_t, f_s, "style_loss")
    diff = gram(f_s) - gram(f_t)
    return diff.pow(2).sum(dim=(-2, -1)).mean() / f_s.shape[1] ** 2


def batch_similarity_loss(f_target, f_source):
    """Similarity-preserving loss over the batch: B x B Gram of pooled features.

    4-D maps are globally average-pooled first; 2-D inputs are used as is.
    """
    _same_shape(f_target, f_source, "batch_similarity_loss")
    q_t, q_s = f_target.detach(), f_source
    if q_s.ndim == 4:
        q_t, q_s = q_t.mean(dim=(2, 3)), q_s.mean(dim=(2, 3))
    elif q_s.ndim != 2:
        raise ShapeMismatch(f"batch_similarity_loss expects (B, D) or (B, D, H, W), got {tuple(q_s.shape)}")
    a_s = normalize_rows(q_s @ q_s.T)
    a_t = normalize_rows(q_t @ q_t.T)
    return (a_s - a_t).pow(2).sum() / q_s.shape[0]


def pixel_similarity_loss(f_target, f_source):
    """Per-image (HW x HW) spatial Gram, row-normalized, MSE scaled by 1/(HW)."""
    f_t, f_s = _batched_maps(f_target.detach()), _batched_maps(f_source)
    _same_shape(f_t, f_s, "pixel_similarity_loss")
    flat_s, flat_t = reshape_features(f_s), reshape_features(f_t)
    p_s = normalize_rows(flat_s.transpose(1, 2) @ flat_s)
    p_t = normalize_rows(flat_t.transpose(1, 2) @ flat_t)
    return (p_s - p_t).pow(2).sum(dim=(1, 2)).mean() / flat_s.shape[2]


def poly2_kernel(u, v):
    """k(u, v) = (u^T v)^2 between the rows of ``u`` and ``v``."""
    return (u @ v.T) ** 2


def mmd_poly2(a, b):
    """Biased MMD^2 estimate between row sets ``a`` (n, D) and ``b`` (m, D)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"mmd_poly2 expects (n, D) and (m, D), got {tuple(a.shape)} and {tuple(b.shape)}")
    return poly2_kernel(a, a).mean() - 2 * poly2_kernel(a, b).mean() + poly2_kernel(b, b).mean()


def mmd_poly2_oracle(f_a, f_b) -> float:
    """Unnormalized MMD between per-position D-vectors of two (D, H, W) maps.

    Double-precision brute-force sum over position pairs, kept for checking
    that D^2 * style_loss equals this value.
    """
    a = np.asarray(f_a, dtype=np.float64)
    b = np.asarray(f_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ShapeMismatch(f"mmd_poly2_oracle expects equal (D, H, W) maps, got {a.shape} and {b.shape}")
    u = a.reshape(a.shape[0], -1).T
    v = b.reshape(b.shape[0], -1).T
    n = len(u)
    total = 0.0
    for p in range(n):
        for q in range(n):
            total += float(u[p] @ u[q]) ** 2 - 2 * float(u[p] @ v[q]) ** 2 + float(v[p] @ v[q]) ** 2
    return total


# --------------------------------------------- initialization / content

def id_loss(x_gen, x):
    """Mean absolute pixel difference."""
    _same_shape(x_gen, x, "id_loss")
    return (x_gen - x.detach()).abs().mean()


def content_loss(feat_gen, feat):
    """Mean squared difference between source-model features."""
    _same_shape(feat_gen, feat, "content_loss")
    return (feat_gen - feat.detach()).pow(2).mean()


# ------------------------------------------------------------ fine-tuning

def diversity_loss(probs):
    """Negative entropy of the batch-mean prediction; lies in [-log C, 0]."""
    if probs.ndim != 2:
        raise ShapeMismatch(f"diversity_loss expects (B, C), got {tuple(probs.shape)}")
    if len(probs) == 0:
        raise EmptyBatch("diversity_loss needs at least one sample")
    mean = probs.mean(dim=0)
    return _xlogy(mean, mean).sum()


def entropy_loss(probs):
    """Batch-mean per-sample prediction entropy."""
    return -_xlogy(probs, probs).sum(dim=1).mean()


def pseudo_label_loss(p_target, y_source, y_target):
    """Cross entropy on samples whose two branch predictions agree.

    Returns the mean over agreeing samples and 0 when none agree.
    """
    if p_target.ndim != 2:
        raise ShapeMismatch(f"pseudo_label_loss expects (B, C), got {tuple(p_target.shape)}")
    y_s = torch.as_tensor(y_source, dtype=torch.long)
    y_t = torch.as_tensor(y_target, dtype=torch.long)
    n_cls = p_target.shape[1]
    for y in (y_s, y_t):
        if len(y) and (y.min() < 0 or y.max() >= n_cls):
            raise IndexOutOfRange(f"pseudo labels must lie in [0, {n_cls}), got {y.tolist()}")
    agree = y_s == y_t
    if not agree.any():
        return p_target.sum() * 0.0
    picked = p_target[agree].gather(1, y_t[agree].unsqueeze(1)).squeeze(1)
    return -torch.log(picked.clamp_min(EPS)).mean()


# ------------------------------------------------------ BN statistics

def bn_stats_loss(batch_stats, running_stats):
    """Sum over BN layers of squared L2 gaps between batch and running moments.

    Both arguments are sequences of (mean, var) pairs, one per BN layer.
    """
    if len(batch_stats) != len(running_stats):
        raise LayerCountMismatch(f"{len(batch_stats)} batch-stat layers vs {len(running_stats)} running-stat layers")
    total = None
    for (mu, var), (mu_r, var_r) in zip(batch_stats, running_stats):
        _same_shape(mu, mu_r, "bn_stats_loss mean")
        _same_shape(var, var_r, "bn_stats_loss var")
        term = (mu - mu_r.detach()).pow(2).sum() + (var - var_r.detach()).pow(2).sum()
        total = term if total is None else total + term
    return total if total is not None else torch.zeros(())


class BNStatsRecorder:
    """Forward hooks recording per-channel input moments of every BatchNorm2d.

    Use as a context manager around a forward pass; ``batch_stats`` then holds
    the (mean, biased var) of each BN layer's input, in module order, and
    ``running_stats`` the layer's stored running moments.
    """

    def __init__(self, model: torch.nn.Module):
        self.layers = [m for m in model.modules() if isinstance(m, torch.nn.BatchNorm2d)]
        self.batch_stats = []
        self._handles = []

    def _hook(self, module, inputs, output):
        x = inputs[0]
        self.batch_stats.append((x.mean(dim=(0, 2, 3)), x.var(dim=(0, 2, 3), unbiased=False)))

    def __enter__(self):
        self.batch_stats = []
        self._handles = [m.register_forward_hook(self._hook) for m in self.layers]
        return self

    def __exit__(self, *exc):
        for h in self._handles:
            h.remove()
        self._handles = []

    @property
    def running_stats(self):
        return [(m.running_mean, m.running_var) for m in self.layers]


def total_sfit_loss(weights: LossWeights, terms: dict):
    """Weighted sum of the named loss terms; zero-weight terms are skipped."""
    total = None
    for name, w in weights.items():
        if w == 0:
            continue
        if name not in terms:
            raise KeyError(f"loss term {name!r} has weight {w} but was not computed")
        term = terms[name] if w == 1 else w * terms[name]
        total = term if total is None else total + term
    return total if total is not None else torch.zeros(())
