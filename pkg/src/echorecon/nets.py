"""Encoder, decoder, discriminators and patch utilities.

Video tensors are channels-last: ``(B, N, H, W, C)`` for clips and
``(B, N, h, w, d)`` for feature maps, matching the on-disk clip layout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .cdc import DeformationCodebook, QuantizeResult
from .errors import ParameterError, ShapeError

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class PatchGrid:
    patch_h: int
    patch_w: int
    grid_h: int
    grid_w: int

    @classmethod
    def for_frame(cls, height: int, width: int, patch_h: int, patch_w: int | None = None) -> "PatchGrid":
        patch_w = patch_h if patch_w is None else patch_w
        if patch_h <= 0 or patch_w <= 0 or height % patch_h or width % patch_w:
            raise ShapeError(f"{height}x{width} frame does not tile into {patch_h}x{patch_w} patches")
        return cls(patch_h, patch_w, height // patch_h, width // patch_w)

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w


def _check_grid(x: torch.Tensor, grid: PatchGrid) -> None:
    h, w = x.shape[-3], x.shape[-2]
    if h != grid.patch_h * grid.grid_h or w != grid.patch_w * grid.grid_w:
        raise ShapeError(f"{h}x{w} frames do not match grid {grid}")


def extract_patch_tubes(clip: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
    """Split ``(..., N, H, W, C)`` into row-major tubes ``(..., P, N, ph, pw, C)``."""
    _check_grid(clip, grid)
    *lead, n, _, _, c = clip.shape
    x = clip.reshape(*lead, n, grid.grid_h, grid.patch_h, grid.grid_w, grid.patch_w, c)
    k = len(lead)
    # (..., gh, gw, N, ph, pw, C)
    x = x.permute(*range(k), k + 1, k + 3, k, k + 2, k + 4, k + 5)
    return x.reshape(*lead, grid.n_patches, n, grid.patch_h, grid.patch_w, c)


def assemble_patch_tubes(tubes: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
    """Inverse of :func:`extract_patch_tubes`."""
    *lead, p, n, ph, pw, c = tubes.shape
    if p != grid.n_patches or ph != grid.patch_h or pw != grid.patch_w:
        raise ShapeError("tubes do not match grid")
    k = len(lead)
    x = tubes.reshape(*lead, grid.grid_h, grid.grid_w, n, ph, pw, c)
    x = x.permute(*range(k), k + 2, k, k + 3, k + 1, k + 4, k + 5)
    return x.reshape(*lead, n, grid.grid_h * ph, grid.grid_w * pw, c)


def mask_patches(clip, grid: PatchGrid, ratio: float, rng: np.random.Generator):
    """Zero a random subset of patches, the same subset in every frame.

    Returns ``(masked, bitmap)`` with ``bitmap`` a ``grid_h x grid_w`` bool array.
    Accepts numpy arrays or tensors shaped ``(N, H, W, C)``.
    """
    if not 0.0 <= ratio < 1.0:
        raise ParameterError(f"mask ratio must lie in [0, 1), got {ratio}")
    _check_grid(clip, grid)
    n_mask = int(np.floor(ratio * grid.n_patches))
    bitmap = np.zeros(grid.n_patches, dtype=bool)
    if n_mask:
        bitmap[rng.choice(grid.n_patches, n_mask, replace=False)] = True
    bitmap = bitmap.reshape(grid.grid_h, grid.grid_w)
    pixel = np.repeat(np.repeat(bitmap, grid.patch_h, 0), grid.patch_w, 1)
    if isinstance(clip, torch.Tensor):
        keep = torch.as_tensor(~pixel, dtype=clip.dtype)[:, :, None]
    else:
        keep = (~pixel).astype(clip.dtype)[:, :, None]
    return clip * keep, bitmap


class _SpaceTimeStage(nn.Module):
    """Per-frame spatial conv, then a pointwise temporal mixing conv over the frame axis.

    Up stages run both convs at the input resolution and upsample last; the
    temporal conv is pointwise in space, so it commutes with nearest upsampling.
    """

    def __init__(self, cin: int, cout: int, down: bool):
        super().__init__()
        self.down = down
        if down:
            self.spatial = nn.Conv2d(cin, cout, 4, stride=2, padding=1)
        else:
            self.spatial = nn.Conv2d(cin, cout, 3, padding=1)
        # (3, 1) kernel over (frames, pixels) == a pointwise 3-tap temporal conv
        self.temporal = nn.Conv2d(cout, cout, (3, 1), padding=(1, 0))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, C, N, H, W)
        b, c, n, h, w = x.shape
        y = self.spatial(x.transpose(1, 2).reshape(b * n, c, h, w))
        c2, h2, w2 = y.shape[1:]
        y = self.temporal(y.reshape(b, n, c2, h2 * w2).transpose(1, 2))
        if self.down:
            return y.reshape(b, c2, n, h2, w2)
        y = F.interpolate(y.transpose(1, 2).reshape(b * n, c2, h2, w2), scale_factor=2, mode="nearest")
        return y.reshape(b, n, c2, 2 * h2, 2 * w2).transpose(1, 2)


class Encoder(nn.Module):
    """Three stride-2 space-time stages: 1/8 spatial resolution, ``dim`` channels."""

    factor = 8

    def __init__(self, in_channels: int = 1, dim: int = 32, channels=(16, 32)):
        super().__init__()
        widths = [in_channels, *channels, dim]
        self.stages = nn.ModuleList(_SpaceTimeStage(a, b, down=True) for a, b in zip(widths[:-1], widths[1:]))
        self.act = nn.LeakyReLU(0.2)

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        if clip.ndim != 5:
            raise ShapeError(f"expected (B, N, H, W, C), got {tuple(clip.shape)}")
        h, w = clip.shape[2:4]
        if h % self.factor or w % self.factor:
            raise ShapeError(f"{h}x{w} frames are not divisible by {self.factor}")
        x = clip.permute(0, 4, 1, 2, 3)
        for stage in self.stages:
            x = self.act(stage(x))
        return x.permute(0, 2, 3, 4, 1)


class Decoder(nn.Module):
    """Mirror of :class:`Encoder` with nearest-neighbour upsampling and a sigmoid output."""

    def __init__(self, out_channels: int = 1, dim: int = 32, channels=(32, 16, 8)):
        super().__init__()
        widths = [dim, *channels]
        self.dim = dim
        self.stages = nn.ModuleList(_SpaceTimeStage(a, b, down=False) for a, b in zip(widths[:-1], widths[1:]))
        self.act = nn.LeakyReLU(0.2)
        self.head = nn.Conv2d(widths[-1], out_channels, 3, padding=1)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.ndim != 5 or features.shape[-1] != self.dim:
            raise ShapeError(f"expected (B, N, h, w, {self.dim}), got {tuple(features.shape)}")
        x = features.permute(0, 4, 1, 2, 3)
        for stage in self.stages:
            x = self.act(stage(x))
        b, c, n, h, w = x.shape
        y = self.head(x.transpose(1, 2).reshape(b * n, c, h, w))
        y = torch.sigmoid(y).reshape(b, n, -1, h, w)
        return y.permute(0, 1, 3, 4, 2)


def _clamp_prob(logit: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(logit).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)


class SpatialDiscriminator(nn.Module):
    """Scores single frames ``(M, H, W, C)`` -> ``(M,)`` probabilities."""

    def __init__(self, in_channels: int = 1, width: int = 8):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 1, 3, padding=1),
        )

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.ndim != 4:
            raise ShapeError(f"expected (M, H, W, C), got {tuple(frames.shape)}")
        logit = self.net(frames.permute(0, 3, 1, 2)).mean(dim=(1, 2, 3))
        return _clamp_prob(logit)


class TemporalDiscriminator(nn.Module):
    """Scores whole clips or patch tubes ``(M, N, H', W', C)`` -> ``(M,)`` via global pooling."""

    def __init__(self, in_channels: int = 1, width: int = 8):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv3d(in_channels, width, (3, 4, 4), stride=(1, 2, 2), padding=1), nn.LeakyReLU(0.2),
            nn.Conv3d(width, 2 * width, (3, 4, 4), stride=(2, 2, 2), padding=1), nn.LeakyReLU(0.2),
            nn.Conv3d(2 * width, 1, 3, padding=1),
        )

    def forward(self, tubes: torch.Tensor) -> torch.Tensor:
        if tubes.ndim != 5:
            raise ShapeError(f"expected (M, N, H, W, C), got {tuple(tubes.shape)}")
        logit = self.net(tubes.permute(0, 4, 1, 2, 3)).mean(dim=(1, 2, 3, 4))
        return _clamp_prob(logit)


class Discriminators(nn.Module):
    """The three critics for one translation direction."""

    def __init__(self, in_channels: int = 1, width: int = 8):
        super().__init__()
        self.spatial = SpatialDiscriminator(in_channels, width)
        self.temporal = TemporalDiscriminator(in_channels, width)
        self.patch = TemporalDiscriminator(in_channels, width)


class Translator(nn.Module):
    """Encoder -> deformation codebook -> decoder for one direction."""

    def __init__(self, in_channels: int = 1, dim: int = 32, n_entries: int = 128, max_frames: int = 64,
                 omega: float = 0.01, use_codebook: bool = True, use_positional: bool = True,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.encoder = Encoder(in_channels, dim)
        self.codebook = DeformationCodebook(n_entries, dim, max_frames, omega=omega,
                                            use_positional=use_positional, generator=generator)
        self.decoder = Decoder(in_channels, dim)
        self.use_codebook = use_codebook

    def quantize(self, features: torch.Tensor) -> QuantizeResult:
        if self.use_codebook:
            return self.codebook(features)
        zero = features.new_zeros(())
        return QuantizeResult(features, features.detach(), features, torch.zeros(features.shape[:-1], dtype=torch.long), zero)

    def forward(self, clip: torch.Tensor):
        feats = self.encoder(clip)
        q = self.quantize(feats)
        return self.decoder(q.quantized), q


def pooled(features: torch.Tensor) -> torch.Tensor:
    """Mean over frames and positions: ``(B, N, h, w, d)`` -> ``(B, d)``."""
    return features.mean(dim=(1, 2, 3))
