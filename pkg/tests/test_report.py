import csv
import json

import numpy as np
import pytest

from a3rnn.config import ModelConfig
from a3rnn.env import generate_episode
from a3rnn.model import build_model
from a3rnn.report import (ReportError, emit_results_table, plot_similarity_curves,
                          render_attention_grid, write_results_table)
from a3rnn.train import AblationResult, rollout, save_checkpoint

SMALL = dict(cnn_channels=(4, 8), d_td=8, hidden=16, shared=8, feedback=4, query_width=16)


def _metrics(path, n_epochs, n_heads=4, seed=0):
    rng = np.random.default_rng(seed)
    recs = [{"epoch": e + 1, "losses": {"total": 1.0}, "similarity": rng.uniform(-1, 1, n_heads).tolist(),
             "checkpoint": None} for e in range(n_epochs)]
    path.write_text("".join(json.dumps(r) + "\n" for r in recs))
    return recs


def test_similarity_csv_passthrough(tmp_path):
    recs = _metrics(tmp_path / "metrics.jsonl", 7)
    png, csv_path = plot_similarity_curves(tmp_path / "metrics.jsonl", tmp_path / "out")
    assert png.stat().st_size > 0
    rows = list(csv.reader(open(csv_path)))
    assert rows[0] == ["epoch", "head_1", "head_2", "head_3", "head_4"]
    assert len(rows) - 1 == 7
    for rec, row in zip(recs, rows[1:]):
        assert int(row[0]) == rec["epoch"]
        assert [float(v) for v in row[1:]] == rec["similarity"]


def test_similarity_outputs_are_reproducible(tmp_path):
    _metrics(tmp_path / "metrics.jsonl", 5)
    a = plot_similarity_curves(tmp_path / "metrics.jsonl", tmp_path / "a")
    b = plot_similarity_curves(tmp_path / "metrics.jsonl", tmp_path / "b")
    assert a[1].read_bytes() == b[1].read_bytes()
    assert a[0].read_bytes() == b[0].read_bytes()


def test_similarity_empty_records_error(tmp_path):
    (tmp_path / "metrics.jsonl").write_text("")
    with pytest.raises(ReportError):
        plot_similarity_curves(tmp_path / "metrics.jsonl", tmp_path)


def _result(complete=True):
    r = AblationResult()
    for v in ("proposed", "a2rnn", "variant1", "variant2", "variant3", "variant4"):
        r.seeds[v] = [0, 1, 2]
        r.cells[v] = {}
        for seed in (0, 1, 2):
            r.cells[v][str(seed)] = {str(s): {"attention_success": (s + seed) % 3 != 0 or v == "proposed",
                                              "pick_success": s == 0} for s in range(3)}
    if not complete:
        del r.cells["variant3"]["2"]
        del r.cells["variant4"]
        r.errors["variant4"] = {"0": "RuntimeError: boom"}
    return r


def test_results_table_layout_and_arithmetic():
    text, table_csv, complete = emit_results_table(_result())
    assert complete
    rows = list(csv.reader(table_csv.splitlines()))
    assert rows[0] == ["Metric", "Proposed", "A2RNN", "(1)", "(2)", "(3)", "(4)"]
    assert rows[1][1] == "100.0" and rows[1][2] == "66.7"
    assert rows[2][1:] == ["33.3"] * 6
    assert rows[3][1:] == ["9"] * 6
    assert "incomplete" not in text


def test_results_table_marks_gaps():
    text, table_csv, complete = emit_results_table(_result(complete=False))
    assert not complete
    rows = list(csv.reader(table_csv.splitlines()))
    assert rows[1][6] == "--" and rows[3][5] == "6"
    assert "incomplete" in text and "failed ['0']" in text


def test_write_results_table(tmp_path):
    txt, table_csv, complete = write_results_table(_result(), tmp_path)
    assert complete and txt.read_text().startswith("Metric")


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "checkpoint_0010.pt"
    save_checkpoint(build_model(ModelConfig(**SMALL)), path, epoch=10)
    return path


def test_attention_grid(checkpoint, tmp_path):
    ep = generate_episode(1, 4)
    grid = render_attention_grid([checkpoint, tmp_path / "checkpoint_0100.pt"], ep, tmp_path / "g.png")
    assert grid.path.stat().st_size > 0
    assert grid.shape == (2, 4)
    assert [c.timestep for c in grid.cells[0]] == [0, 30, 60, 90]
    assert all(c.missing is None for c in grid.cells[0])
    assert all(c.missing and "not found" in c.missing for c in grid.cells[1])
    # circle centers are the recorded TD points scaled to pixels
    from a3rnn.train import load_checkpoint
    model, _ = load_checkpoint(checkpoint)
    trace = rollout(model, mode="open_loop", episode=ep)
    for cell in grid.cells[0]:
        np.testing.assert_allclose(cell.td_px, trace.pt_td[cell.timestep] * 64, atol=1e-6)
        assert cell.bu_map.shape == (16, 16)
        assert 0.0 <= cell.bu_map.min() and cell.bu_map.max() <= 1.0


def test_attention_grid_rejects_bad_timesteps(checkpoint, tmp_path):
    with pytest.raises(ReportError):
        render_attention_grid([checkpoint], generate_episode(0, 0), tmp_path / "g.png", timesteps=(0, 120))
