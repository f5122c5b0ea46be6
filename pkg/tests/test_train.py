import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from a3rnn.config import ModelConfig, SuiteConfig, TrainConfig, variant_config
from a3rnn.env import generate_episode
from a3rnn.model import build_model
from a3rnn.train import (AblationResult, CheckpointError, TrainingDiverged, episodes_to_tensors,
                         head_similarity, load_checkpoint, query_similarity, read_metrics, rollout,
                         run_ablation, save_checkpoint, score_rollout, train)

from oracles import loop_head_similarity

SMALL = dict(cnn_channels=(4, 8), d_td=8, hidden=16, shared=8, feedback=4, query_width=16)


def short(ep, T=12):
    return replace(ep, frames=ep.frames[:T], joints=ep.joints[:T], box_track=ep.box_track[:T])


@pytest.fixture(scope="module")
def episodes():
    return [generate_episode(slot, seed) for slot, seed in ((0, 1), (1, 2), (2, 3))]


def tcfg(**kw):
    return TrainConfig(**{"epochs": 1, "batch_size": 2, "checkpoint_epochs": (1,), **kw})


def test_smoke_one_epoch_one_episode(episodes, tmp_path):
    model = build_model(ModelConfig(**SMALL))
    records = train(model, [short(episodes[0])], tcfg(), tmp_path)
    assert len(records) == 1
    assert all(math.isfinite(v) for v in records[0].losses.values())
    assert all(-1.0 <= s <= 1.0 for s in records[0].similarity)
    assert (tmp_path / "checkpoint_0001.pt").exists()
    lines = read_metrics(tmp_path / "metrics.jsonl")
    assert lines[0]["epoch"] == 1 and "wall_time" not in lines[0]
    assert "wall_time" in json.loads((tmp_path / "timing.jsonl").read_text().splitlines()[0])


@pytest.mark.parametrize("name", ["proposed", "a2rnn", "variant1", "variant2", "variant3", "variant4"])
def test_every_variant_trains(name, episodes):
    model = build_model(variant_config(name, **SMALL))
    rec = train(model, [short(e) for e in episodes], tcfg())
    assert math.isfinite(rec[0].losses["total"])


def test_same_seed_same_metrics(episodes, tmp_path):
    eps = [short(e) for e in episodes]
    for run in ("a", "b"):
        train(build_model(ModelConfig(seed=3, **SMALL)), eps, tcfg(epochs=2, seed=3, rec_stride=3),
              tmp_path / run)
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    train(build_model(ModelConfig(seed=4, **SMALL)), eps, tcfg(epochs=2, seed=4, rec_stride=3), tmp_path / "c")
    assert a != (tmp_path / "c" / "metrics.jsonl").read_bytes()


def test_checkpoint_round_trip_is_bit_exact(episodes, tmp_path):
    model = build_model(variant_config("proposed", **SMALL))
    train(model, [short(episodes[0])], tcfg())
    path = save_checkpoint(model, tmp_path / "m.pt", epoch=7)
    loaded, epoch = load_checkpoint(path)
    assert epoch == 7
    frames, joints = episodes_to_tensors([short(episodes[1])])
    model.eval()
    with torch.no_grad():
        a, b = model(frames, joints), loaded(frames, joints)
    for x, y in zip(a, b):
        assert torch.equal(x, y)


def test_checkpoint_rejects_tampered_config(tmp_path):
    model = build_model(ModelConfig(**SMALL))
    path = save_checkpoint(model, tmp_path / "m.pt")
    blob = torch.load(path, weights_only=False)
    blob["config"]["n_bu"] = 8
    torch.save(blob, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_divergence_is_reported(episodes, tmp_path):
    model = build_model(ModelConfig(**SMALL))
    with torch.no_grad():
        model.hlstm.out_joint.weight.fill_(float("nan"))
    with pytest.raises(TrainingDiverged) as info:
        train(model, [short(episodes[0])], tcfg(), tmp_path)
    assert info.value.record["diverged"]
    assert read_metrics(tmp_path / "metrics.jsonl")[-1]["diverged"]


def test_open_loop_rollout_matches_forward(episodes):
    model = build_model(ModelConfig(**SMALL))
    ep = episodes[0]
    r = rollout(model, mode="open_loop", episode=ep)
    assert len(r.joints) == len(r.pt_td) == 120
    frames, joints = episodes_to_tensors([ep])
    with torch.no_grad():
        out = model(frames, joints)
    np.testing.assert_allclose(r.pt_td, out.pt_td[0].numpy(), atol=1e-5)
    np.testing.assert_allclose(r.joint_hat, out.joint_hat[0].numpy(), atol=1e-5)


def test_closed_loop_rollout_traces(episodes):
    model = build_model(ModelConfig(**SMALL))
    r = rollout(model, slot=2, mode="closed_loop", seed=5)
    assert r.frames.shape == (120, 3, 64, 64) and r.pt_bu.shape == (120, 16, 2)
    assert r.m_bu.shape == (120, 16, 16, 16)
    assert set(score_rollout(r)) == {"attention_success", "pick_success"}
    with pytest.raises(ValueError):
        rollout(model, mode="sideways")


def test_head_similarity_cases():
    q_bu = torch.randn(5, 16, 8)
    assert torch.allclose(head_similarity(q_bu[:, 3:7], q_bu), torch.ones(4), atol=1e-6)
    q_bu = torch.zeros(5, 3, 8)
    q_bu[..., :4] = torch.randn(5, 3, 4)
    q_a = torch.zeros(5, 4, 8)
    q_a[..., 4:] = torch.randn(5, 4, 4)
    assert torch.allclose(head_similarity(q_a, q_bu), torch.zeros(4), atol=1e-7)


def test_head_similarity_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        q_a, q_bu = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 6, 5))
        got = head_similarity(torch.tensor(q_a), torch.tensor(q_bu)).numpy()
        np.testing.assert_allclose(got, loop_head_similarity(q_a, q_bu), atol=1e-6)


def test_query_similarity_range(episodes):
    sim = query_similarity(build_model(ModelConfig(**SMALL)), short(episodes[0]))
    assert sim.shape == (4,) and np.all(np.abs(sim) <= 1.0)


def test_ablation_records_failures_and_continues(episodes, tmp_path):
    suite = SuiteConfig(variants=("a2rnn", "proposed"), seeds=(0,), slots=(1,), train=tcfg(),
                        model={**SMALL, "n_td": 0})
    result = run_ablation(suite, [short(e) for e in episodes], tmp_path)
    assert set(result.errors) == {"a2rnn", "proposed"}
    suite = replace(suite, model=SMALL)
    result = run_ablation(suite, [short(e) for e in episodes], tmp_path)
    assert not result.errors
    assert result.rate("proposed")[1] == 1 and result.seeds["a2rnn"] == [0]
    saved = AblationResult.from_json(json.loads((tmp_path / "results.json").read_text()))
    assert saved.cells == result.cells
    assert (tmp_path / "proposed" / "seed_0" / "rollout_slot1.npz").exists()


def test_joint_mix_zero_is_plain_teacher_forcing(episodes):
    model = build_model(ModelConfig(**SMALL))
    frames, joints = episodes_to_tensors([short(episodes[0])])
    with torch.no_grad():
        a, b = model(frames, joints), model(frames, joints, joint_mix=0.0)
    assert torch.equal(a.joint_hat, b.joint_hat)


def test_joint_mix_one_feeds_back_predictions(episodes):
    # with full mixing the ground-truth joints after t = 0 are never read
    model = build_model(ModelConfig(**SMALL))
    frames, joints = episodes_to_tensors([short(episodes[0])])
    other = joints.clone()
    other[:, 1:] = torch.rand_like(other[:, 1:])
    with torch.no_grad():
        a = model(frames, joints, joint_mix=1.0)
        b = model(frames, other, joint_mix=1.0)
    assert torch.equal(a.joint_hat, b.joint_hat)


def test_joint_mix_step_oracle(episodes):
    model = build_model(ModelConfig(**SMALL))
    frames, joints = episodes_to_tensors([short(episodes[0], T=4)])
    with torch.no_grad():
        out = model(frames, joints, joint_mix=0.3)
        state, prev = model.init_state(1), None
        for t in range(4):
            j_in = joints[:, t] if prev is None else 0.7 * joints[:, t] + 0.3 * prev
            _, pred, state, _ = model.step(frames[:, t], j_in, state)
            prev = pred.joint_hat
            torch.testing.assert_close(pred.joint_hat, out.joint_hat[:, t], atol=1e-5, rtol=0)


def test_joint_mix_and_noise_train_deterministically(episodes, tmp_path):
    eps = [short(e) for e in episodes]
    for run in ("a", "b"):
        train(build_model(ModelConfig(**SMALL)), eps, tcfg(joint_mix=0.5, joint_noise=0.02), tmp_path / run)
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_joint_mix_warmup_ramps(episodes, monkeypatch):
    seen = []
    model = build_model(ModelConfig(**SMALL))
    orig = model.forward

    def spy(frames, joints, joint_mix=0.0):
        seen.append(joint_mix)
        return orig(frames, joints, joint_mix=joint_mix)

    monkeypatch.setattr(model, "forward", spy)
    train(model, [short(episodes[0])], tcfg(epochs=4, joint_mix=0.8, joint_mix_warmup=2))
    assert seen == pytest.approx([0.4, 0.8, 0.8, 0.8])
