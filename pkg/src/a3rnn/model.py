"""End-to-end model: CNN encoder -> A3 attention -> H-LSTM -> reconstruction."""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn

from . import losses as L
from .attention import A3Module, AttentionState
from .config import ModelConfig
from .reconstruction import (FovealDecoder, PeripheralDecoder, crop_attention_area,
                             foveal_target_crop)
from .recurrent import HLSTM, HLSTMState, StepPrediction


class Encoder(nn.Module):
    """Image (3, 4H, 4W) -> BU saliency logits (N_BU, H, W) and TD features (D, H, W)."""

    def __init__(self, n_bu: int, d_td: int, channels: tuple[int, int] = (16, 32),
                 td_norm: bool = True):
        super().__init__()
        c1, c2 = channels
        self.trunk = nn.Sequential(
            nn.Conv2d(3, c1, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c1, c2, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c2, c2, 3, padding=1), nn.ReLU(),
        )
        self.bu_head = nn.Conv2d(c2, n_bu, 3, padding=1)
        self.td_head = nn.Conv2d(c2, d_td, 3, padding=1)
        # fixed-scale TD features keep the soft-argmax logits bounded while the
        # decoders pull on feature magnitude
        self.td_norm = nn.LayerNorm(d_td, elementwise_affine=False) if td_norm else None

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        lead = images.shape[:-3]
        z = self.trunk(images.reshape(-1, *images.shape[-3:]))
        f_bu, f_td = self.bu_head(z), self.td_head(z)
        if self.td_norm is not None:
            f_td = self.td_norm(f_td.movedim(1, -1)).movedim(-1, 1)
        return (f_bu.reshape(*lead, *f_bu.shape[-3:]), f_td.reshape(*lead, *f_td.shape[-3:]))


class SequenceOutput(NamedTuple):
    f_td: torch.Tensor  # (B, T, D, H, W)
    m_bu: torch.Tensor  # (B, T, N_BU, H, W)
    q_bu: torch.Tensor  # (B, T, N_BU, D)
    q_td: torch.Tensor  # (B, T, N_TD, D)
    q_a: torch.Tensor  # (B, T, N_TD, D)
    pt_td: torch.Tensor  # (B, T, N_TD, 2) encoder side
    pt_bu: torch.Tensor  # (B, T, N_BU, 2) encoder side
    pt_td_hat: torch.Tensor  # (B, T, N_TD, 2) prediction for t+1
    pt_bu_hat: torch.Tensor  # (B, T, N_BU, 2) prediction for t+1
    joint_hat: torch.Tensor  # (B, T, D_J) prediction for t+1


class A3RNN(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.n_bu, cfg.d_td, cfg.cnn_channels, cfg.td_feature_norm)
        self.attention = A3Module(cfg.n_td, cfg.n_bu, cfg.d_td, cfg.shared, cfg.fusion,
                                  cfg.query_width, cfg.bu_temperature, cfg.td_temperature,
                                  cfg.fusion_encoder)
        self.hlstm = HLSTM(cfg.n_td, cfg.n_bu, cfg.d_joint, cfg.hidden, cfg.shared, cfg.feedback,
                           cfg.joint_residual)
        self.peripheral = PeripheralDecoder(cfg.d_td, cfg.sharpness) if cfg.peripheral else None
        self.foveal = FovealDecoder(cfg.d_td) if cfg.foveal else None

    def init_state(self, batch: int) -> HLSTMState:
        return self.hlstm.init_state((batch,))

    def step(self, frame: torch.Tensor, joint: torch.Tensor, state: HLSTMState,
             pt_override: tuple[torch.Tensor, torch.Tensor] | None = None):
        """One closed-loop step on (B, 3, H, W) frames.

        ``pt_override`` replaces the encoder-side points fed to the H-LSTM
        (used to feed back the model's own predictions).
        """
        f_bu, f_td = self.encoder(frame)
        att = self.attention(f_bu, f_td, state.h_shared)
        pt_td, pt_bu = pt_override if pt_override is not None else (att.pt_td, att.pt_bu)
        pred, state = self.hlstm(pt_td, pt_bu, joint, state)
        return att, pred, state, f_td

    def forward(self, frames: torch.Tensor, joints: torch.Tensor, joint_mix: float = 0.0) -> SequenceOutput:
        """Teacher-forced pass over (B, T, 3, H, W) frames and (B, T, D_J) joints.

        With ``joint_mix`` > 0 the joint input at t > 0 blends in the model's own
        prediction from t - 1, so training sees its own drift.
        """
        B, T = frames.shape[:2]
        f_bu, f_td = self.encoder(frames)
        m_bu, q_bu, pt_bu, memory = self.attention.bottom_up(f_bu, f_td)
        state = self.init_state(B)
        rows = {k: [] for k in ("q_td", "q_a", "pt_td", "pt_td_hat", "pt_bu_hat", "joint_hat")}
        # unbind once: per-step indexing would scatter a full-size gradient every step
        f_td_t, pt_bu_t, joints_t = f_td.unbind(1), pt_bu.unbind(1), joints.unbind(1)
        mem = memory.unbind(1) if memory is not None else [None] * T
        for t in range(T):
            q_td, q_a, pt_td = self.attention.top_down(state.h_shared, f_td_t[t], mem[t])
            j_in = joints_t[t]
            if joint_mix and t > 0:
                j_in = (1.0 - joint_mix) * j_in + joint_mix * rows["joint_hat"][-1]
            pred, state = self.hlstm(pt_td, pt_bu_t[t], j_in, state)
            for k, v in (("q_td", q_td), ("q_a", q_a), ("pt_td", pt_td), ("pt_td_hat", pred.pt_td_hat),
                         ("pt_bu_hat", pred.pt_bu_hat), ("joint_hat", pred.joint_hat)):
                rows[k].append(v)
        s = {k: torch.stack(v, dim=1) for k, v in rows.items()}
        return SequenceOutput(f_td=f_td, m_bu=m_bu, q_bu=q_bu, q_td=s["q_td"], q_a=s["q_a"],
                              pt_td=s["pt_td"], pt_bu=pt_bu, pt_td_hat=s["pt_td_hat"],
                              pt_bu_hat=s["pt_bu_hat"], joint_hat=s["joint_hat"])


def build_model(cfg: ModelConfig) -> A3RNN:
    torch.manual_seed(cfg.seed)
    return A3RNN(cfg)


def reconstruct(model: A3RNN, out: SequenceOutput, frames: torch.Tensor, rec_steps=None) -> dict:
    """Decoder outputs and their targets, aligned on the predicted frame.

    ``rec_steps`` optionally restricts the decoders to a subset of source
    steps t in [0, T-2] (targets at t+1).
    """
    cfg = model.cfg
    T = frames.shape[1]
    src = torch.arange(T - 1) if rec_steps is None else torch.as_tensor(rec_steps)
    nxt = src + 1
    res = {}
    if model.peripheral is not None:
        tgt_idx = nxt if cfg.peripheral_target == "next" else src
        res["per_hat"] = model.peripheral(out.pt_bu_hat[:, src], out.f_td[:, src])
        res["per_target"] = frames[:, tgt_idx]
    if model.foveal is not None:
        p, s = cfg.fovea_patch, cfg.fovea_size
        # encoder side: current frame at the current point, for t and t+1
        steps_enc = torch.unique(torch.cat([src, nxt]))
        enc_patches = crop_attention_area(out.f_td[:, steps_enc], out.pt_td[:, steps_enc], p)
        enc_hat = model.foveal(enc_patches)
        enc_target = foveal_target_crop(frames[:, steps_enc], out.pt_td[:, steps_enc], s)
        # decoder side: current features at the predicted next point, next frame
        dec_pts = out.pt_td_hat[:, src]
        dec_hat = model.foveal(crop_attention_area(out.f_td[:, src], dec_pts, p))
        res["fov_dec_hat"] = dec_hat
        res["fov_dec_target"] = foveal_target_crop(frames[:, nxt], dec_pts, s)
        pos = {int(t): i for i, t in enumerate(steps_enc)}
        src_i = torch.tensor([pos[int(t)] for t in src])
        nxt_i = torch.tensor([pos[int(t)] for t in nxt])
        res["fov_enc_hat"] = enc_hat[:, src_i]
        res["fov_enc_target"] = enc_target[:, src_i]
        res["fov_enc_next"] = enc_hat[:, nxt_i]
    return res


def compute_losses(model: A3RNN, out: SequenceOutput, frames: torch.Tensor, joints: torch.Tensor,
                   rec_steps=None) -> L.LossBreakdown:
    cfg = model.cfg
    terms = {"body": L.body_loss(out.joint_hat, joints)}
    rec = reconstruct(model, out, frames, rec_steps) if (cfg.peripheral or cfg.foveal) else {}
    if cfg.peripheral:
        terms["rec_per"] = L._mse(rec["per_hat"], rec["per_target"])
    if cfg.foveal:
        terms["rec_fov_enc"] = L._mse(rec["fov_enc_hat"], rec["fov_enc_target"])
        terms["rec_fov_dec"] = L._mse(rec["fov_dec_hat"], rec["fov_dec_target"])
    if cfg.consistency:
        terms["reg_bu_consist"] = L._mse(out.pt_bu_hat[:, :-1], out.pt_bu[:, 1:])
        terms["reg_fov_consist"] = L._mse(rec["fov_enc_next"], rec["fov_dec_hat"])
    if cfg.spatial:
        enc = L.bounds_penalty(out.pt_td)
        dec = L.bounds_penalty(out.pt_td_hat[:, :-1])
        terms["reg_displacement"] = L.displacement_penalty(out.pt_td)
        terms["reg_bounds"] = enc + dec
        terms["reg_bounds_enc"], terms["reg_bounds_dec"] = enc, dec
    return L.make_breakdown(terms, cfg.alpha, cfg.beta)


__all__ = ["A3RNN", "AttentionState", "Encoder", "SequenceOutput", "StepPrediction", "build_model",
           "compute_losses", "reconstruct"]
