"""Training objective: body prediction, three reconstruction terms and four
regularizers, combined as ``body + alpha * rec + beta * reg``.

Every MSE averages over all axes so the weights do not depend on grid or
image size.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import torch

from .attention import ContractError

DISPLACEMENT_LIMIT = 0.1  # 10% of the image side, in normalized units

REC_TERMS = ("rec_per", "rec_fov_enc", "rec_fov_dec")
REG_TERMS = ("reg_bu_consist", "reg_fov_consist", "reg_displacement", "reg_bounds")


class LossConfigError(ValueError):
    pass


def _mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


@dataclass
class LossBreakdown:
    body: torch.Tensor
    rec_per: torch.Tensor
    rec_fov_enc: torch.Tensor
    rec_fov_dec: torch.Tensor
    reg_bu_consist: torch.Tensor
    reg_fov_consist: torch.Tensor
    reg_displacement: torch.Tensor
    reg_bounds: torch.Tensor
    total: torch.Tensor
    # the two halves of reg_bounds: encoder-side and decoder-side TD points
    reg_bounds_enc: torch.Tensor | None = None
    reg_bounds_dec: torch.Tensor | None = None

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)
                if getattr(self, f.name) is not None}


def body_loss(joint_hat: torch.Tensor, joint_true: torch.Tensor, shift: int = 1) -> torch.Tensor:
    """MSE of predictions against the targets ``shift`` steps ahead.

    ``joint_hat[..., t, :]`` is the prediction made at step t, so by default
    it is compared with ``joint_true[..., t + 1, :]``.
    """
    if joint_hat.shape != joint_true.shape:
        raise ContractError(f"shape mismatch {tuple(joint_hat.shape)} vs {tuple(joint_true.shape)}")
    if shift == 0:
        return _mse(joint_hat, joint_true)
    return _mse(joint_hat[..., :-shift, :], joint_true[..., shift:, :])


def reconstruction_loss(per_hat, per_target, fov_enc_hat, fov_enc_target, fov_dec_hat, fov_dec_target):
    """(rec_per, rec_fov_enc, rec_fov_dec) for pre-aligned predictions/targets."""
    return (_mse(per_hat, per_target), _mse(fov_enc_hat, fov_enc_target),
            _mse(fov_dec_hat, fov_dec_target))


def displacement_penalty(pt_td_seq: torch.Tensor, limit: float = DISPLACEMENT_LIMIT) -> torch.Tensor:
    """Mean over steps and points of ``max(0, |pt_t - pt_{t-1}| - limit)``.

    pt_td_seq: (..., T, N, 2).
    """
    step = torch.linalg.vector_norm(pt_td_seq[..., 1:, :, :] - pt_td_seq[..., :-1, :, :], dim=-1)
    return torch.relu(step - limit).mean()


def bounds_penalty(points: torch.Tensor) -> torch.Tensor:
    """Mean squared distance of each point to its projection onto [0, 1]^2."""
    gap = points - points.clamp(0.0, 1.0)
    return (gap ** 2).sum(dim=-1).mean()


def regularization_loss(pt_bu, pt_bu_hat, fov_enc, fov_dec, pt_td_seq, pt_td_hat_seq,
                        limit: float = DISPLACEMENT_LIMIT) -> dict[str, torch.Tensor]:
    """The four regularizers; inputs are already time-aligned pairs."""
    enc = bounds_penalty(pt_td_seq)
    dec = bounds_penalty(pt_td_hat_seq)
    return {
        "reg_bu_consist": _mse(pt_bu_hat, pt_bu),
        "reg_fov_consist": _mse(fov_enc, fov_dec),
        "reg_displacement": displacement_penalty(pt_td_seq, limit),
        "reg_bounds": enc + dec,
        "reg_bounds_enc": enc,
        "reg_bounds_dec": dec,
    }


def total_loss(terms, alpha: float = 0.1, beta: float = 0.1) -> torch.Tensor:
    """``body + alpha * sum(rec) + beta * sum(reg)``; ``terms`` is a
    LossBreakdown or a mapping with the same keys."""
    if alpha < 0 or beta < 0:
        raise LossConfigError(f"loss weights must be non-negative, got alpha={alpha}, beta={beta}")
    get = terms.get if isinstance(terms, dict) else lambda k: getattr(terms, k)
    rec = sum(get(k) for k in REC_TERMS)
    reg = sum(get(k) for k in REG_TERMS)
    return get("body") + alpha * rec + beta * reg


def make_breakdown(terms: dict[str, torch.Tensor], alpha: float, beta: float) -> LossBreakdown:
    zero = terms["body"].new_zeros(())
    full = {k: terms.get(k, zero) for k in ("body",) + REC_TERMS + REG_TERMS}
    full["reg_bounds_enc"] = terms.get("reg_bounds_enc")
    full["reg_bounds_dec"] = terms.get("reg_bounds_dec")
    return LossBreakdown(total=total_loss(full, alpha, beta), **full)

