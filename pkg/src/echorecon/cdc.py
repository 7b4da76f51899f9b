"""Deformation codebook: temporal positional encoding + element-wise vector quantization.

The codebook entries are buffers maintained by an exponential moving average,
never by the optimizer. Encoder features receive gradients through a
straight-through estimator and the weighted commitment term.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ParameterError, ShapeError


@dataclass
class QuantizeResult:
    quantized: torch.Tensor  # straight-through output, shape of the input
    codes: torch.Tensor  # Z[indices], no gradient
    shifted: torch.Tensor  # F + P_n, carries gradient
    indices: torch.Tensor  # integer tensor, input shape without the feature axis
    q_error: torch.Tensor  # mean over positions of squared residual norm


def nearest_entries(x: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
    """Index of the nearest codebook row for every row of ``x``; ties go to the lowest index.

    Distances come from the expanded form in float64; rows whose two best
    candidates are within rounding distance of each other are re-scored with
    explicit differences in the input precision, so the result matches an
    exhaustive search exactly.
    """
    x64 = x.double()
    e64 = entries.double()
    e_sq = (e64 * e64).sum(1)
    dist = (x64 * x64).sum(1, keepdim=True) - 2.0 * x64 @ e64.T + e_sq
    best = torch.topk(dist, 2, dim=1, largest=False)
    idx = best.indices[:, 0].clone()
    scale = (x64 * x64).sum(1) + e_sq.max()
    slack = 64 * torch.finfo(x.dtype).eps * scale + 1e-300
    close = torch.nonzero(best.values[:, 1] - best.values[:, 0] <= slack).flatten()
    if close.numel():
        exact = ((x[close][:, None, :] - entries[None, :, :]) ** 2).sum(-1)
        idx[close] = torch.argmin(exact, dim=1)
    return idx


def quantize(features: torch.Tensor, entries: torch.Tensor, positional: torch.Tensor | None) -> QuantizeResult:
    """Quantize ``(..., N, h, w, d)`` features after adding the per-frame positional row."""
    if features.ndim < 4:
        raise ShapeError(f"features must be (..., N, h, w, d), got {tuple(features.shape)}")
    d = features.shape[-1]
    if entries.ndim != 2 or entries.shape[1] != d:
        raise ShapeError(f"codebook is {tuple(entries.shape)}, features have dim {d}")
    n = features.shape[-4]
    shifted = features
    if positional is not None:
        if positional.shape[1] != d:
            raise ShapeError("positional table dim does not match features")
        if n > positional.shape[0]:
            raise ShapeError(f"{n} frames exceed positional table length {positional.shape[0]}")
        shifted = features + positional[:n, None, None, :]

    flat = shifted.detach().reshape(-1, d)
    indices = nearest_entries(flat, entries.detach())
    codes = entries.detach()[indices].reshape(shifted.shape)
    quantized = shifted + (codes - shifted).detach()
    q_error = ((shifted.detach() - codes) ** 2).sum(-1).mean()
    return QuantizeResult(quantized, codes, shifted, indices.reshape(shifted.shape[:-1]), q_error)


def commitment_loss(shifted: torch.Tensor, quantized: torch.Tensor, lam: float = 0.25,
                    return_terms: bool = False):
    """Codebook term plus ``lam`` times the encoder commitment term.

    Both are means over positions of squared Euclidean norms. Only the second
    term reaches the encoder; the first has no trainable target because the
    codebook follows its EMA.
    """
    if shifted.shape != quantized.shape:
        raise ShapeError(f"{tuple(shifted.shape)} vs {tuple(quantized.shape)}")
    codebook_term = ((shifted.detach() - quantized) ** 2).sum(-1).mean()
    commit_term = ((quantized.detach() - shifted) ** 2).sum(-1).mean()
    total = codebook_term + lam * commit_term
    if return_terms:
        return total, codebook_term, commit_term
    return total


def ema_blend(old: torch.Tensor, new: torch.Tensor, omega: float) -> torch.Tensor:
    return (1.0 - omega) * old + omega * new


class DeformationCodebook(nn.Module):
    """K x d EMA codebook with a learnable N_max x d temporal positional table."""

    def __init__(self, n_entries: int = 128, dim: int = 32, max_frames: int = 64, omega: float = 0.01,
                 dead_threshold: float = 1e-3, positional_std: float = 0.02, use_positional: bool = True,
                 generator: torch.Generator | None = None):
        super().__init__()
        if n_entries < 2:
            raise ParameterError("codebook needs at least 2 entries")
        if not 0.0 < omega <= 1.0:
            raise ParameterError(f"omega must lie in (0, 1], got {omega}")
        self.omega = omega
        self.dead_threshold = dead_threshold
        self.use_positional = use_positional
        self.register_buffer("entries", torch.randn(n_entries, dim, generator=generator))
        self.register_buffer("usage", torch.zeros(n_entries))
        self.register_buffer("initialized", torch.zeros(()))
        self.positional = nn.Parameter(positional_std * torch.randn(max_frames, dim, generator=generator),
                                       requires_grad=use_positional)

    @property
    def n_entries(self) -> int:
        return self.entries.shape[0]

    def forward(self, features: torch.Tensor) -> QuantizeResult:
        pos = self.positional if self.use_positional else None
        return quantize(features, self.entries, pos)

    @torch.no_grad()
    def ema_update(self, result: QuantizeResult, rng: np.random.Generator | None = None) -> None:
        """Move assigned entries toward the mean of their assigned vectors, then revive dead ones."""
        flat = result.shifted.detach().reshape(-1, self.entries.shape[1]).to(self.entries.dtype)
        if not bool(self.initialized):
            # lazy init from live features so the first assignments are meaningful
            rng = rng if rng is not None else np.random.default_rng(0)
            pick = torch.as_tensor(rng.choice(flat.shape[0], self.n_entries, replace=flat.shape[0] < self.n_entries))
            self.entries.copy_(flat[pick])
            self.initialized.fill_(1.0)
            return
        ema_update(self.entries, self.usage, result.indices.reshape(-1), flat, self.omega)
        # usage is left as is, so an entry keeps being reseeded until it wins assignments
        dead = torch.nonzero(self.usage < self.dead_threshold).flatten()
        if dead.numel() and rng is not None:
            pick = torch.as_tensor(rng.choice(flat.shape[0], dead.numel(), replace=flat.shape[0] < dead.numel()))
            self.entries[dead] = flat[pick]


@torch.no_grad()
def ema_update(entries: torch.Tensor, usage: torch.Tensor, indices: torch.Tensor, vectors: torch.Tensor,
               omega: float) -> None:
    """In-place EMA step on ``entries`` and ``usage``; entries with no assignments stay bitwise unchanged."""
    if not 0.0 < omega <= 1.0:
        raise ParameterError(f"omega must lie in (0, 1], got {omega}")
    if vectors.shape[0] != indices.shape[0] or vectors.shape[1] != entries.shape[1]:
        raise ShapeError("vectors and indices do not match the codebook")
    k = entries.shape[0]
    counts = torch.bincount(indices, minlength=k).to(entries.dtype)
    sums = torch.zeros_like(entries).index_add_(0, indices, vectors.to(entries.dtype))
    hit = counts > 0
    means = sums[hit] / counts[hit, None]
    entries[hit] = ema_blend(entries[hit], means, omega)
    usage.copy_(ema_blend(usage, counts, omega))
