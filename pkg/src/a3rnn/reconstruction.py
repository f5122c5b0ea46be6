"""Peripheral (BU-masked, full frame) and foveal (TD-centred patch) decoders
plus the cropping helpers that build their inputs and targets."""
from __future__ import annotations

import warnings

import torch
import torch.nn as nn

from .attention import ContractError, grid_coordinates


def inverse_spatial_softmax(points: torch.Tensor, grid: tuple[int, int], sharpness: float = 0.05) -> torch.Tensor:
    """Normalized isotropic Gaussian heatmap per point.

    points: (..., K, 2) normalized (x, y); sharpness is the Gaussian standard
    deviation in normalized units. Returns (..., K, H, W) summing to 1 per map.
    Out-of-range points are clamped with a warning.
    """
    if sharpness <= 0:
        raise ValueError("sharpness must be positive")
    with torch.no_grad():
        outside = bool(((points < 0) | (points > 1)).any())
    if outside:
        warnings.warn("attention points outside [0, 1] clamped", RuntimeWarning, stacklevel=2)
        points = points.clamp(0.0, 1.0)
    h, w = grid
    gx, gy = grid_coordinates(h, w, points.device, points.dtype)
    dx = gx - points[..., 0:1]
    dy = gy - points[..., 1:2]
    logits = -(dx * dx + dy * dy) / (2 * sharpness * sharpness)
    return torch.softmax(logits, dim=-1).reshape(*points.shape[:-1], h, w)


def peripheral_mask(points: torch.Tensor, grid: tuple[int, int], sharpness: float = 0.05) -> torch.Tensor:
    """Sum of the per-point heatmaps clipped to [0, 1]: (..., K, 2) -> (..., H, W)."""
    return inverse_spatial_softmax(points, grid, sharpness).sum(dim=-3).clamp(0.0, 1.0)


def _window_starts(points: torch.Tensor, h: int, w: int, size: int) -> tuple[torch.Tensor, torch.Tensor]:
    p = points.detach()
    col = torch.floor(p[..., 0] * w).long().clamp(0, w - 1)
    row = torch.floor(p[..., 1] * h).long().clamp(0, h - 1)
    return row - size // 2, col - size // 2


def _crop(x: torch.Tensor, points: torch.Tensor, size: int) -> torch.Tensor:
    """Zero-padded ``size`` windows of x (..., C, H, W) around (..., K, 2)
    points -> (..., K, C, size, size). The window location is not differentiable."""
    lead = x.shape[:-3]
    if points.shape[:-2] != lead:
        raise ContractError(f"points {tuple(points.shape)} do not match maps {tuple(x.shape)}")
    c, h, w = x.shape[-3:]
    k = points.shape[-2]
    xb = x.reshape(-1, c, h, w)
    pad = size
    padded = nn.functional.pad(xb, (pad, pad, pad, pad))
    hp, wp = h + 2 * pad, w + 2 * pad
    r0, c0 = _window_starts(points.reshape(-1, k, 2), h, w, size)
    offs = torch.arange(size, device=x.device)
    rows = (r0 + pad)[..., None, None] + offs[:, None]
    cols = (c0 + pad)[..., None, None] + offs[None, :]
    lin = (rows * wp + cols).reshape(xb.shape[0], 1, k * size * size).expand(-1, c, -1)
    patches = padded.reshape(xb.shape[0], c, hp * wp).gather(2, lin)
    patches = patches.reshape(xb.shape[0], c, k, size, size).permute(0, 2, 1, 3, 4)
    return patches.reshape(*lead, k, c, size, size)


def crop_attention_area(f_td: torch.Tensor, points: torch.Tensor, patch: int = 5) -> torch.Tensor:
    """Feature windows around each point's grid cell: (..., K, D, patch, patch)."""
    return _crop(f_td, points, patch)


def foveal_target_crop(image: torch.Tensor, center: torch.Tensor, size: int = 16) -> torch.Tensor:
    """Raw-image crop(s) centred at normalized ``center``.

    ``center`` may be (..., 2) for one crop per image or (..., K, 2).
    """
    single = center.dim() == image.dim() - 2
    if single:
        center = center.unsqueeze(-2)
    out = _crop(image, center, size)
    return out.squeeze(-4) if single else out


class PeripheralDecoder(nn.Module):
    """Masked skip features (D, H, W) -> full image (3, 4H, 4W) in [0, 1]."""

    def __init__(self, d_td: int = 32, sharpness: float = 0.05):
        super().__init__()
        self.sharpness = sharpness
        c1, c2 = d_td // 2, d_td // 4
        self.net = nn.Sequential(
            nn.ConvTranspose2d(d_td, c1, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(c1, c2, 3, stride=1, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(c2, 3, 4, stride=2, padding=1),
        )

    def decode(self, masked: torch.Tensor) -> torch.Tensor:
        lead = masked.shape[:-3]
        out = torch.sigmoid(self.net(masked.reshape(-1, *masked.shape[-3:])))
        return out.reshape(*lead, *out.shape[-3:])

    def forward(self, pt_bu_hat: torch.Tensor, f_td_skip: torch.Tensor, mask: torch.Tensor | None = None):
        if mask is None:
            if pt_bu_hat.shape[:-2] != f_td_skip.shape[:-3]:
                raise ContractError("BU points and skip features disagree in batch shape")
            mask = peripheral_mask(pt_bu_hat, tuple(f_td_skip.shape[-2:]), self.sharpness)
        return self.decode(f_td_skip * mask.unsqueeze(-3))


def peripheral_reconstruct(decoder: PeripheralDecoder, pt_bu_hat, f_td_skip):
    return decoder(pt_bu_hat, f_td_skip)


class FovealDecoder(nn.Module):
    """5x5 feature window -> 16x16 RGB patch; shared by every call site."""

    def __init__(self, d_td: int = 32):
        super().__init__()
        c1, c2 = d_td // 2, d_td // 4
        self.net = nn.Sequential(
            nn.ConvTranspose2d(d_td, c1, 3, stride=1, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(c1, c2, 2, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(c2, 3, 4, stride=2, padding=1),
        )

    def forward(self, patches: torch.Tensor, logits: bool = False) -> torch.Tensor:
        lead = patches.shape[:-3]
        out = self.net(patches.reshape(-1, *patches.shape[-3:]))
        out = out.reshape(*lead, *out.shape[-3:])
        return out if logits else torch.sigmoid(out)


def foveal_reconstruct(decoder: FovealDecoder, patches):
    return decoder(patches)
