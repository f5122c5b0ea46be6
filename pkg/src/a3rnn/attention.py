"""Amalgamated attention: BU saliency maps, pseudo-queries, TD queries, their
fusion, and the two kinds of attention points.

Tensors carry arbitrary leading batch dimensions. Coordinates are normalized
pixel centers, ``x`` along columns and ``y`` along rows, both in ``[0, 1]``.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class InvalidInputError(ValueError):
    pass


class ContractError(ValueError):
    pass


class AttentionState(NamedTuple):
    m_bu: torch.Tensor  # (..., N_BU, H, W)
    q_bu: torch.Tensor  # (..., N_BU, D)
    q_td: torch.Tensor  # (..., N_TD, D)
    q_a: torch.Tensor  # (..., N_TD, D)
    pt_td: torch.Tensor  # (..., N_TD, 2)
    pt_bu: torch.Tensor  # (..., N_BU, 2)


def grid_coordinates(h: int, w: int, device=None, dtype=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Normalized pixel-center coordinates, each flattened to (H*W,) row-major."""
    ys = (torch.arange(h, device=device, dtype=dtype) + 0.5) / h
    xs = (torch.arange(w, device=device, dtype=dtype) + 0.5) / w
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return gx.reshape(-1), gy.reshape(-1)


def _require_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise InvalidInputError(f"{what} contains non-finite values")


def spatial_softmax(f: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Softmax over the H*W grid of every channel independently."""
    if temperature <= 0:
        raise InvalidInputError("temperature must be positive")
    _require_finite(f, "feature map")
    h, w = f.shape[-2:]
    flat = f.reshape(*f.shape[:-2], h * w) / temperature
    return torch.softmax(flat, dim=-1).reshape(f.shape)


def soft_argmax(maps: torch.Tensor) -> torch.Tensor:
    """Expected (x, y) under normalized maps (..., K, H, W) -> (..., K, 2)."""
    h, w = maps.shape[-2:]
    gx, gy = grid_coordinates(h, w, maps.device, maps.dtype)
    flat = maps.reshape(*maps.shape[:-2], h * w)
    return torch.stack([flat @ gx, flat @ gy], dim=-1)


def extract_pseudo_queries(m_bu: torch.Tensor, f_td: torch.Tensor) -> torch.Tensor:
    """Mask-weighted spatial average of ``f_td`` for every BU map.

    m_bu: (..., N_BU, H, W), f_td: (..., D, H, W) -> (..., N_BU, D)
    """
    if m_bu.shape[-2:] != f_td.shape[-2:] or m_bu.shape[:-3] != f_td.shape[:-3]:
        raise ContractError(f"mask {tuple(m_bu.shape)} and features {tuple(f_td.shape)} disagree")
    return torch.einsum("...nhw,...dhw->...nd", m_bu, f_td)


def similarity_maps(q_a: torch.Tensor, f_td: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Scaled dot-product similarity of each query with every location,
    spatially soft-maxed: (..., N, D) x (..., D, H, W) -> (..., N, H, W)."""
    if q_a.shape[-1] != f_td.shape[-3]:
        raise ContractError(f"query width {q_a.shape[-1]} != feature depth {f_td.shape[-3]}")
    if temperature <= 0:
        raise InvalidInputError("temperature must be positive")
    sim = torch.einsum("...nd,...dhw->...nhw", q_a, f_td) / math.sqrt(q_a.shape[-1])
    _require_finite(sim, "similarity map")
    return spatial_softmax(sim, temperature)


def estimate_td_points(q_a: torch.Tensor, f_td: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Soft-argmax of the query/feature similarity map, (..., N_TD, 2)."""
    return soft_argmax(similarity_maps(q_a, f_td, temperature))


def extract_bu_points(m_bu: torch.Tensor) -> torch.Tensor:
    """Hard argmax of each map; ties go to the first cell in row-major order."""
    h, w = m_bu.shape[-2:]
    idx = m_bu.reshape(*m_bu.shape[:-2], h * w).argmax(dim=-1)
    rows = torch.div(idx, w, rounding_mode="floor")
    cols = idx - rows * w
    return torch.stack([(cols.to(m_bu.dtype) + 0.5) / w, (rows.to(m_bu.dtype) + 0.5) / h], dim=-1)


class TDQueryGenerator(nn.Module):
    """MLP from the previous shared hidden state to N_TD query rows."""

    def __init__(self, hidden_size: int, n_td: int, d_td: int, width: int = 64):
        super().__init__()
        self.n_td, self.d_td = n_td, d_td
        self.mlp = nn.Sequential(nn.Linear(hidden_size, width), nn.ReLU(), nn.Linear(width, n_td * d_td))

    def forward(self, h_shared: torch.Tensor) -> torch.Tensor:
        return self.mlp(h_shared).reshape(*h_shared.shape[:-1], self.n_td, self.d_td)


def generate_td_queries(h_shared: torch.Tensor, generator: TDQueryGenerator) -> torch.Tensor:
    return generator(h_shared)


def _check_fusion_inputs(q_bu: torch.Tensor, q_td: torch.Tensor) -> None:
    if q_bu.shape[-2] == 0:
        raise ContractError("empty BU query set")
    if q_bu.shape[-1] != q_td.shape[-1]:
        raise ContractError(f"query widths differ: {q_bu.shape[-1]} vs {q_td.shape[-1]}")


class TransformerFusion(nn.Module):
    """BU pseudo-queries as keys/values, TD queries as queries.

    One post-norm encoder layer over the BU set (optional) and one decoder
    layer; no positional encoding, so the BU rows behave as a set.
    """

    def __init__(self, d_td: int, n_heads: int = 2, ff_mult: int = 2, use_encoder: bool = True):
        super().__init__()
        self.use_encoder = use_encoder
        if use_encoder:
            self.encoder = nn.TransformerEncoderLayer(d_td, n_heads, ff_mult * d_td, dropout=0.0,
                                                      batch_first=True)
        self.decoder = nn.TransformerDecoderLayer(d_td, n_heads, ff_mult * d_td, dropout=0.0,
                                                  batch_first=True)

    def encode(self, q_bu: torch.Tensor) -> torch.Tensor:
        if not self.use_encoder:
            return q_bu
        lead = q_bu.shape[:-2]
        out = self.encoder(q_bu.reshape(-1, *q_bu.shape[-2:]))
        return out.reshape(*lead, *out.shape[-2:])

    def decode(self, memory: torch.Tensor, q_td: torch.Tensor) -> torch.Tensor:
        lead = q_td.shape[:-2]
        out = self.decoder(q_td.reshape(-1, *q_td.shape[-2:]), memory.reshape(-1, *memory.shape[-2:]))
        return out.reshape(*lead, *out.shape[-2:])

    def forward(self, q_bu: torch.Tensor, q_td: torch.Tensor) -> torch.Tensor:
        _check_fusion_inputs(q_bu, q_td)
        return self.decode(self.encode(q_bu), q_td)


class MLPFusion(nn.Module):
    """Ablation: mean-pooled BU set concatenated to each TD query, then an MLP."""

    def __init__(self, d_td: int, ff_mult: int = 2):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(2 * d_td, ff_mult * d_td), nn.ReLU(),
                                 nn.Linear(ff_mult * d_td, d_td))

    def encode(self, q_bu: torch.Tensor) -> torch.Tensor:
        return q_bu.mean(dim=-2, keepdim=True)

    def decode(self, pooled: torch.Tensor, q_td: torch.Tensor) -> torch.Tensor:
        pooled = pooled.expand(*q_td.shape[:-1], pooled.shape[-1])
        return self.mlp(torch.cat([pooled, q_td], dim=-1))

    def forward(self, q_bu: torch.Tensor, q_td: torch.Tensor) -> torch.Tensor:
        _check_fusion_inputs(q_bu, q_td)
        return self.decode(self.encode(q_bu), q_td)


def fuse_queries(q_bu: torch.Tensor, q_td: torch.Tensor, block: TransformerFusion) -> torch.Tensor:
    return block(q_bu, q_td)


def fuse_queries_mlp(q_bu: torch.Tensor, q_td: torch.Tensor, block: MLPFusion) -> torch.Tensor:
    return block(q_bu, q_td)


class A3Module(nn.Module):
    """Feature maps + previous shared hidden state -> attention state.

    ``fusion`` is ``"transformer"``, ``"mlp"`` or ``"none"``; with ``"none"``
    the TD queries drive point estimation directly.
    """

    def __init__(self, n_td: int, n_bu: int, d_td: int, shared_size: int, fusion: str = "transformer",
                 query_width: int = 64, bu_temperature: float = 1.0, td_temperature: float = 1.0,
                 fusion_encoder: bool = True):
        super().__init__()
        self.n_td, self.n_bu, self.d_td = n_td, n_bu, d_td
        self.fusion_mode = fusion
        self.bu_temperature = bu_temperature
        self.td_temperature = td_temperature
        self.queries = TDQueryGenerator(shared_size, n_td, d_td, query_width)
        if fusion == "transformer":
            self.fusion = TransformerFusion(d_td, use_encoder=fusion_encoder)
        elif fusion == "mlp":
            self.fusion = MLPFusion(d_td)
        elif fusion == "none":
            self.fusion = None
        else:
            raise ContractError(f"unknown fusion mode {fusion!r}")

    def bottom_up(self, f_bu: torch.Tensor, f_td: torch.Tensor):
        """Steps that do not depend on the recurrent state: maps, pseudo-queries,
        BU points and the fusion memory."""
        m_bu = spatial_softmax(f_bu, self.bu_temperature)
        q_bu = extract_pseudo_queries(m_bu, f_td)
        pt_bu = extract_bu_points(m_bu)
        memory = self.fusion.encode(q_bu) if self.fusion is not None else None
        return m_bu, q_bu, pt_bu, memory

    def top_down(self, h_shared: torch.Tensor, f_td: torch.Tensor, memory):
        q_td = self.queries(h_shared)
        q_a = q_td if self.fusion is None else self.fusion.decode(memory, q_td)
        pt_td = estimate_td_points(q_a, f_td, self.td_temperature)
        return q_td, q_a, pt_td

    def forward(self, f_bu: torch.Tensor, f_td: torch.Tensor, h_shared: torch.Tensor) -> AttentionState:
        if f_bu.shape[-2:] != f_td.shape[-2:]:
            raise ContractError("BU and TD feature maps must share H, W")
        m_bu, q_bu, pt_bu, memory = self.bottom_up(f_bu, f_td)
        q_td, q_a, pt_td = self.top_down(h_shared, f_td, memory)
        return AttentionState(m_bu, q_bu, q_td, q_a, pt_td, pt_bu)
