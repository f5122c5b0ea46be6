import csv
import io
import json

import pytest
import yaml

from a3rnn.cli import EXIT_INCOMPLETE, main

SMALL = dict(cnn_channels=[4, 8], d_td=8, hidden=16, shared=8, feedback=4, query_width=16)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--slots", "3", "--per-slot", "1", "--seed", "5", "--out", str(out)]) == 0
    return out


def test_gen_data_writes_manifest(data_dir, capsys):
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert len(manifest["episodes"]) == 3 and manifest["seed"] == 5


def test_gen_data_default_count(tmp_path, capsys):
    assert main(["gen-data", "--slots", "3", "--per-slot", "5", "--seed", "0", "--out", str(tmp_path)]) == 0
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out), delimiter="\t"))
    assert rows[0] == ["file", "slot", "seed"] and len(rows) == 16


def test_train_rollout_and_reports(data_dir, tmp_path, capsys):
    cfg = tmp_path / "run.yaml"
    run = tmp_path / "run"
    cfg.write_text(yaml.safe_dump({"variant": "proposed", "model": SMALL,
                                   "train": {"epochs": 2, "checkpoint_epochs": [1, 2], "rec_stride": 8,
                                             "data_dir": str(data_dir), "out_dir": str(run)}}))
    assert main(["train", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split("\t")[:3] == ["epoch", "total", "body"] and out[1].startswith("2\t")
    assert (run / "checkpoint_0002.pt").exists()

    assert main(["rollout", "--ckpt", str(run / "checkpoint_0002.pt"), "--slot", "1",
                 "--mode", "closed_loop", "--out", str(tmp_path / "r.npz")]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[1].split("\t")[:4] == ["2", "1", "closed_loop", "120"]
    assert (tmp_path / "r.npz").exists()

    assert main(["report", "similarity", "--in", str(run), "--out", str(tmp_path / "rep")]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 3
    assert (tmp_path / "rep" / "similarity.png").exists()

    assert main(["report", "grid", "--in", str(run), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "attention_grid.png").exists()


def test_ablate_and_table(data_dir, tmp_path, capsys):
    suite = tmp_path / "suite.yaml"
    suite.write_text(yaml.safe_dump({"variants": ["proposed", "a2rnn"], "seeds": [0], "slots": [0],
                                     "model": SMALL, "train": {"epochs": 1, "checkpoint_epochs": [1],
                                                               "rec_stride": 8}}))
    out = tmp_path / "abl"
    code = main(["ablate", "--suite", str(suite), "--data", str(data_dir), "--out", str(out)])
    # only two of six columns were run, so the table is incomplete
    assert code == EXIT_INCOMPLETE
    text = capsys.readouterr().out
    assert text.splitlines()[0].split("|")[1].strip() == "Proposed"
    assert main(["report", "table", "--in", str(out), "--out", str(tmp_path / "t")]) == EXIT_INCOMPLETE
    assert (tmp_path / "t" / "results_table.csv").exists()


def test_bad_config_exits_with_error(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(yaml.safe_dump({"model": {"unknown_knob": 1}}))
    assert main(["train", "--config", str(cfg)]) == 2
    assert "unknown" in capsys.readouterr().err


def test_missing_dataset_message(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"train": {"data_dir": str(tmp_path / "nope")}}))
    with pytest.raises(SystemExit, match="gen-data"):
        main(["train", "--config", str(cfg)])
