"""Training loop, checkpoints, metrics records, rollouts and the ablation suite."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from . import env as E
from .config import (ModelConfig, SuiteConfig, TrainConfig, config_to_dict, model_config_from_dict,
                     variant_config)
from .model import A3RNN, build_model, compute_losses

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "a3rnn-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainRecord:
    epoch: int
    losses: dict[str, float]
    similarity: list[float]
    wall_time: float = 0.0
    checkpoint: str | None = None

    def to_json(self) -> dict:
        # wall time lives in timing.jsonl so metrics files stay reproducible
        return {"epoch": self.epoch, "losses": self.losses, "similarity": self.similarity,
                "checkpoint": self.checkpoint}


def episodes_to_tensors(episodes) -> tuple[torch.Tensor, torch.Tensor]:
    frames = torch.from_numpy(np.stack([ep.frames for ep in episodes])).float()
    joints = torch.from_numpy(np.stack([ep.joints for ep in episodes])).float()
    return frames, joints


def head_similarity(q_a: torch.Tensor, q_bu: torch.Tensor) -> torch.Tensor:
    """Per TD head: max over BU pseudo-queries of the cosine similarity,
    averaged over every leading (batch/time) axis. (..., N_TD, D), (..., N_BU, D) -> (N_TD,)"""
    a = torch.nn.functional.normalize(q_a, dim=-1)
    b = torch.nn.functional.normalize(q_bu, dim=-1)
    cos = a @ b.transpose(-1, -2)
    best = cos.max(dim=-1).values
    return best.reshape(-1, best.shape[-1]).mean(dim=0)


@torch.no_grad()
def query_similarity(model: A3RNN, episode) -> np.ndarray:
    frames, joints = episodes_to_tensors([episode])
    model.eval()
    out = model(frames, joints)
    return head_similarity(out.q_a, out.q_bu).numpy()


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: A3RNN, path, epoch: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = config_to_dict(model.cfg)["model"]
    torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "epoch": epoch,
                "config": cfg, "config_hash": model.cfg.config_hash(),
                "state_dict": model.state_dict()}, path)
    return path


def load_checkpoint(path) -> tuple[A3RNN, int]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")
    cfg = model_config_from_dict(blob["config"])
    if cfg.config_hash() != blob["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    model = A3RNN(cfg)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob["epoch"]


# ---------------------------------------------------------------- training


def _rec_steps(T: int, stride: int, offset: int):
    if stride == 1:
        return None
    return torch.arange(offset % stride, T - 1, stride)


def train(model: A3RNN, episodes, tcfg: TrainConfig, out_dir=None, epochs: int | None = None,
          progress: bool = False) -> list[TrainRecord]:
    """Full-sequence BPTT over all episodes for ``epochs`` epochs.

    Writes ``metrics.jsonl`` (one record per epoch), ``timing.jsonl`` and
    checkpoints into ``out_dir`` when given.
    """
    epochs = tcfg.epochs if epochs is None else epochs
    torch.manual_seed(tcfg.seed)
    gen = torch.Generator().manual_seed(tcfg.seed)
    frames, joints = episodes_to_tensors(episodes)
    n, T = frames.shape[:2]
    opt = torch.optim.Adam(model.parameters(), lr=tcfg.lr)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        for name in ("metrics.jsonl", "timing.jsonl"):
            (out / name).write_text("")
        (out / "config.json").write_text(json.dumps(
            {**config_to_dict(model.cfg, tcfg), "config_hash": model.cfg.config_hash()}, indent=2))
    records = []
    step_count = 0
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = torch.randperm(n, generator=gen)
        sums: dict[str, float] = {}
        sim = torch.zeros(model.cfg.n_td)
        mix = tcfg.joint_mix * min(1.0, epoch / tcfg.joint_mix_warmup) if tcfg.joint_mix_warmup else tcfg.joint_mix
        for start in range(0, n, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            f, j = frames[idx], joints[idx]
            j_in = j
            if tcfg.joint_noise:
                # input-only noise; targets stay clean
                j_in = j + tcfg.joint_noise * torch.randn(j.shape, generator=gen)
            seq = model(f, j_in, joint_mix=mix)
            lb = compute_losses(model, seq, f, j, _rec_steps(T, tcfg.rec_stride, step_count))
            step_count += 1
            if not torch.isfinite(lb.total):
                rec = {"epoch": epoch, "losses": lb.as_floats(), "diverged": True}
                if out is not None:
                    with open(out / "metrics.jsonl", "a") as fh:
                        fh.write(json.dumps(rec) + "\n")
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", rec)
            opt.zero_grad()
            lb.total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip)
            opt.step()
            w = len(idx) / n
            for k, v in lb.as_floats().items():
                sums[k] = sums.get(k, 0.0) + w * v
            sim += w * head_similarity(seq.q_a.detach(), seq.q_bu.detach())
        ckpt = None
        if out is not None and (epoch in tcfg.checkpoint_epochs or epoch == epochs):
            ckpt = save_checkpoint(model, out / f"checkpoint_{epoch:04d}.pt", epoch).name
        rec = TrainRecord(epoch, sums, [float(s) for s in sim], time.perf_counter() - t0, ckpt)
        records.append(rec)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(rec.to_json()) + "\n")
            with open(out / "timing.jsonl", "a") as fh:
                fh.write(json.dumps({"epoch": epoch, "wall_time": rec.wall_time}) + "\n")
        if progress and (epoch % 10 == 0 or epoch == 1):
            log.info("epoch %d total %.4f body %.4f sim %s", epoch, sums["total"], sums["body"],
                     np.round(rec.similarity, 3).tolist())
    return records


def read_metrics(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    return [json.loads(line) for line in lines if line.strip()]


# ---------------------------------------------------------------- rollouts


class Rollout(NamedTuple):
    joints: np.ndarray  # (T, D_J) executed joint vectors
    frames: np.ndarray  # (T, 3, H, W)
    pt_td: np.ndarray  # (T, N_TD, 2) encoder side
    pt_bu: np.ndarray  # (T, N_BU, 2) encoder side
    m_bu: np.ndarray  # (T, N_BU, h, w)
    pt_td_hat: np.ndarray
    pt_bu_hat: np.ndarray
    joint_hat: np.ndarray  # (T, D_J) predictions for t+1
    box_center_px: np.ndarray
    slot: int
    failed: bool = False


@torch.no_grad()
def rollout(model: A3RNN, slot: int = 0, mode: str = "closed_loop", seed: int = 0,
            episode=None, feedback: str = "encoder", env_cfg: E.EnvConfig = E.EnvConfig()) -> Rollout:
    """Run the model for T steps.

    closed_loop: each predicted joint vector is executed in a fresh PickEnv
    and the rendered frame is the next input. open_loop: the frames and joints
    of ``episode`` are fed instead. ``feedback="predicted"`` feeds the model's
    own attention-point predictions back to the H-LSTM.
    """
    model.eval()
    if mode == "open_loop":
        if episode is None:
            raise ValueError("open_loop rollout needs an episode")
        world = None
        frame, joint = episode.frames[0], episode.joints[0]
        slot, box = episode.box_slot, episode.box_center_px
    elif mode == "closed_loop":
        world = E.PickEnv(slot, seed, env_cfg)
        frame, joint = world.reset()
        box = world.box_rest.copy()
    else:
        raise ValueError(f"unknown mode {mode!r}")
    state = model.init_state(1)
    traces = {k: [] for k in ("joints", "frames", "pt_td", "pt_bu", "m_bu", "pt_td_hat",
                              "pt_bu_hat", "joint_hat")}
    prev = None
    failed = False
    T = E.T_STEPS
    for t in range(T):
        f = torch.from_numpy(np.asarray(frame, dtype=np.float32))[None]
        j = torch.from_numpy(np.asarray(joint, dtype=np.float32))[None]
        override = None
        if feedback == "predicted" and prev is not None:
            override = (prev.pt_td_hat, prev.pt_bu_hat)
        att, pred, state, _ = model.step(f, j, state, override)
        prev = pred
        for k, v in (("joints", j[0]), ("frames", f[0]), ("pt_td", att.pt_td[0]),
                     ("pt_bu", att.pt_bu[0]), ("m_bu", att.m_bu[0]), ("pt_td_hat", pred.pt_td_hat[0]),
                     ("pt_bu_hat", pred.pt_bu_hat[0]), ("joint_hat", pred.joint_hat[0])):
            traces[k].append(v.numpy())
        if not torch.isfinite(pred.joint_hat).all():
            failed = True
            break
        if t == T - 1:
            break
        if mode == "open_loop":
            frame, joint = episode.frames[t + 1], episode.joints[t + 1]
        else:
            joint = np.clip(pred.joint_hat[0].numpy(), 0.0, 1.0)
            frame = world.step(joint)
    arr = {k: np.stack(v) for k, v in traces.items()}
    return Rollout(box_center_px=np.asarray(box), slot=slot, failed=failed, **arr)


def score_rollout(r: Rollout, env_cfg: E.EnvConfig = E.EnvConfig()) -> dict:
    if r.failed or len(r.joints) < E.T_STEPS:
        return {"attention_success": False, "pick_success": False}
    return E.success_metric(r.joints, r.box_center_px, r.pt_td, env_cfg)


# ---------------------------------------------------------------- ablation


@dataclass
class AblationResult:
    cells: dict = field(default_factory=dict)  # variant -> seed -> slot -> scores
    errors: dict = field(default_factory=dict)  # variant -> seed -> message
    seeds: dict = field(default_factory=dict)  # variant -> list of seeds run

    def to_json(self) -> dict:
        return {"cells": self.cells, "errors": self.errors, "seeds": self.seeds}

    @classmethod
    def from_json(cls, d: dict) -> "AblationResult":
        return cls(d.get("cells", {}), d.get("errors", {}), d.get("seeds", {}))

    def rate(self, variant: str, key: str = "attention_success") -> tuple[int, int]:
        ok = tot = 0
        for slots in self.cells.get(variant, {}).values():
            for scores in slots.values():
                tot += 1
                ok += bool(scores[key])
        return ok, tot


def train_variant(name: str, episodes, tcfg: TrainConfig, seed: int, out_dir=None,
                  model_overrides: dict | None = None) -> tuple[A3RNN, list[TrainRecord]]:
    cfg = variant_config(name, seed=seed, **(model_overrides or {}))
    model = build_model(cfg)
    tc = TrainConfig(**{**tcfg.__dict__, "seed": seed})
    records = train(model, episodes, tc, out_dir)
    return model, records


def run_ablation(suite: SuiteConfig, episodes, out_dir, progress: bool = False) -> AblationResult:
    """Train every variant for every seed, then score closed-loop rollouts
    on every slot. Failures are recorded and the suite moves on."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = AblationResult()
    for name in suite.variants:
        result.cells.setdefault(name, {})
        result.seeds[name] = list(suite.seeds)
        for seed in suite.seeds:
            run_dir = out / name / f"seed_{seed}"
            try:
                model, _ = train_variant(name, episodes, suite.train, seed, run_dir, suite.model)
                cell = {}
                for slot in suite.slots:
                    r = rollout(model, slot, "closed_loop", seed=suite.rollout_seed + slot)
                    np.savez_compressed(run_dir / f"rollout_slot{slot}.npz", **r._asdict())
                    cell[str(slot)] = score_rollout(r)
                result.cells[name][str(seed)] = cell
            except Exception as exc:  # recorded per cell; the suite continues
                log.exception("variant %s seed %s failed", name, seed)
                result.errors.setdefault(name, {})[str(seed)] = f"{type(exc).__name__}: {exc}"
            if progress:
                log.info("%s seed %s: %s", name, seed, result.cells[name].get(str(seed)))
            (out / "results.json").write_text(json.dumps(result.to_json(), indent=2))
    return result
