"""Hierarchical LSTM: one LSTM per modality (TD points, BU points, joints)
coupled through a smaller shared LSTM."""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn

from .attention import ContractError


class HLSTMState(NamedTuple):
    h_td: torch.Tensor
    c_td: torch.Tensor
    h_bu: torch.Tensor
    c_bu: torch.Tensor
    h_joint: torch.Tensor
    c_joint: torch.Tensor
    h_shared: torch.Tensor
    c_shared: torch.Tensor


class StepPrediction(NamedTuple):
    pt_td_hat: torch.Tensor  # (..., N_TD, 2)
    pt_bu_hat: torch.Tensor  # (..., N_BU, 2)
    joint_hat: torch.Tensor  # (..., D_J)


def init_state(hidden: int = 64, shared: int = 32, batch: tuple[int, ...] = (),
               dtype: torch.dtype = torch.float32) -> HLSTMState:
    """Fresh zero state; every field is a separate tensor."""
    def z(n):
        return torch.zeros(*batch, n, dtype=dtype)
    return HLSTMState(z(hidden), z(hidden), z(hidden), z(hidden),
                      z(hidden), z(hidden), z(shared), z(shared))


class HLSTM(nn.Module):
    """Modality LSTMs read their input concatenated with a projection of the
    previous shared hidden state; the shared LSTM reads the three new modality
    hidden states. Readouts are linear maps of the modality hidden states;
    with ``joint_residual`` the joint readout is added to the current joint
    vector, so a fresh state predicts "stay put"."""

    def __init__(self, n_td: int, n_bu: int, d_joint: int, hidden: int = 64, shared: int = 32,
                 feedback: int = 16, joint_residual: bool = True):
        super().__init__()
        self.joint_residual = joint_residual
        self.n_td, self.n_bu, self.d_joint = n_td, n_bu, d_joint
        self.hidden, self.shared = hidden, shared
        self.td_cell = nn.LSTMCell(2 * n_td + feedback, hidden)
        self.bu_cell = nn.LSTMCell(2 * n_bu + feedback, hidden)
        self.joint_cell = nn.LSTMCell(d_joint + feedback, hidden)
        self.shared_cell = nn.LSTMCell(3 * hidden, shared)
        self.feedback_td = nn.Linear(shared, feedback)
        self.feedback_bu = nn.Linear(shared, feedback)
        self.feedback_joint = nn.Linear(shared, feedback)
        self.out_td = nn.Linear(hidden, 2 * n_td)
        self.out_bu = nn.Linear(hidden, 2 * n_bu)
        self.out_joint = nn.Linear(hidden, d_joint)
        for name, p in self.named_parameters():
            if "bias" in name.rsplit(".", 1)[-1]:
                nn.init.zeros_(p)

    def init_state(self, batch: tuple[int, ...] = (), dtype: torch.dtype | None = None) -> HLSTMState:
        dtype = dtype or self.out_joint.weight.dtype
        return init_state(self.hidden, self.shared, batch, dtype)

    def forward(self, pt_td: torch.Tensor, pt_bu: torch.Tensor, joint: torch.Tensor,
                state: HLSTMState) -> tuple[StepPrediction, HLSTMState]:
        if pt_td.shape[-2:] != (self.n_td, 2) or pt_bu.shape[-2:] != (self.n_bu, 2):
            raise ContractError(f"attention points {tuple(pt_td.shape)}/{tuple(pt_bu.shape)} "
                                f"do not match N_TD={self.n_td}, N_BU={self.n_bu}")
        if joint.shape[-1] != self.d_joint:
            raise ContractError(f"joint width {joint.shape[-1]} != {self.d_joint}")
        lead = joint.shape[:-1]
        hs = state.h_shared
        x_td = torch.cat([pt_td.reshape(*lead, -1), self.feedback_td(hs)], -1)
        x_bu = torch.cat([pt_bu.reshape(*lead, -1), self.feedback_bu(hs)], -1)
        x_j = torch.cat([joint, self.feedback_joint(hs)], -1)
        h_td, c_td = self.td_cell(x_td, (state.h_td, state.c_td))
        h_bu, c_bu = self.bu_cell(x_bu, (state.h_bu, state.c_bu))
        h_j, c_j = self.joint_cell(x_j, (state.h_joint, state.c_joint))
        h_s, c_s = self.shared_cell(torch.cat([h_td, h_bu, h_j], -1), (hs, state.c_shared))
        joint_hat = self.out_joint(h_j)
        if self.joint_residual:
            joint_hat = joint_hat + joint
        pred = StepPrediction(self.out_td(h_td).reshape(*lead, self.n_td, 2),
                              self.out_bu(h_bu).reshape(*lead, self.n_bu, 2), joint_hat)
        return pred, HLSTMState(h_td, c_td, h_bu, c_bu, h_j, c_j, h_s, c_s)


def hlstm_step(model: HLSTM, pt_td, pt_bu, joint, state: HLSTMState):
    return model(pt_td, pt_bu, joint, state)
