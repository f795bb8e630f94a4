import json
import math

import numpy as np
import pytest

from ddghm.cli import RunManifest, main, sha256_file
from ddghm.config import TrainConfig
from ddghm.data import InteractionEvent, Preprocessed, Vocabulary, dumps_processed, serialize_events
from ddghm.model import DDGHM
from ddghm.synthetic import synthetic_log, toy_problem

from test_data import oracle_preprocess


def write_processed(path, triples, n_items):
    vocab = Vocabulary({d: [f"{d.lower()}{i:03d}" for i in range(n_items)] for d in "AB"}, {d: [1] * n_items for d in "AB"})
    users = [f"u{u}" for u in sorted({t.user for t in triples})]
    path.write_text(dumps_processed(Preprocessed(triples, vocab, users, {})))
    return vocab


@pytest.fixture
def log_file(tmp_path):
    p = tmp_path / "log.tsv"
    p.write_text(serialize_events(synthetic_log()))
    return p


@pytest.fixture
def small_run(tmp_path):
    proc = tmp_path / "proc.tsv"
    write_processed(proc, toy_problem(8, 6, 3, seed=1), 6)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"dim": 4, "epochs": 2, "batch_size": 4}}))
    return proc, cfg


class TestPreprocess:
    def test_stats_match_oracle(self, log_file, tmp_path, capsys):
        out = tmp_path / "p.tsv"
        assert main(["preprocess", str(log_file), "--out", str(out)]) == 0
        printed = capsys.readouterr().out
        stats = json.loads((tmp_path / "p.tsv.stats.json").read_text())
        want = oracle_preprocess(synthetic_log())
        assert {k: stats[k] for k in want} == want
        for k, v in want.items():
            assert f"{k}" in printed and str(v) in printed

    def test_idempotent(self, log_file, tmp_path):
        a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
        main(["preprocess", str(log_file), "--out", str(a)])
        main(["preprocess", str(log_file), "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_exhausted(self, tmp_path, capsys):
        log = tmp_path / "one.tsv"
        log.write_text(serialize_events([InteractionEvent("u", f"i{k}", 1.0, k, "A") for k in range(12)]))
        assert main(["preprocess", str(log), "--out", str(tmp_path / "x.tsv")]) == 3
        cap = capsys.readouterr()
        assert "dataset exhausted" in cap.err
        assert "dataset statistics" in cap.out

    def test_missing_input(self, tmp_path):
        assert main(["preprocess", str(tmp_path / "nope.tsv"), "--out", str(tmp_path / "x")]) == 3

    def test_env_override(self, log_file, tmp_path, monkeypatch):
        monkeypatch.setenv("DDGHM_MIN_INTERACTIONS", "3")
        monkeypatch.setenv("DDGHM_MIN_ITEMS_PER_DOMAIN", "3")
        out = tmp_path / "p.tsv"
        assert main(["preprocess", str(log_file), "--out", str(out)]) == 0
        stats = json.loads((tmp_path / "p.tsv.stats.json").read_text())
        assert stats == {**stats, **oracle_preprocess(synthetic_log(), 3, 90 * 86_400, 3)}


class TestTrain:
    def test_outputs_and_manifest(self, small_run, tmp_path):
        proc, cfg = small_run
        out = tmp_path / "run"
        assert main(["train", str(proc), "--config", str(cfg), "--out", str(out), "--seed", "3"]) == 0
        man = RunManifest.read(out / "manifest.json")
        assert man.status == "complete" and man.seed == 3
        assert man.inputs == {str(proc): sha256_file(proc), str(cfg): sha256_file(cfg)}
        assert man.verify_inputs() == []
        rows = (out / "epochs.tsv").read_text().splitlines()
        assert len(rows) == 3 and rows[0].startswith("epoch\tL_A")
        model, extra = DDGHM.load(out / "checkpoint.ckpt")
        assert model.config.seed == 3 and extra["best_epoch"] == man.outputs["best_epoch"]

    def test_config_errors_before_compute(self, small_run, tmp_path, capsys):
        proc, _ = small_run
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"dim": -1, "lr": 0}))
        out = tmp_path / "run"
        assert main(["train", str(proc), "--config", str(bad), "--out", str(out)]) == 2
        err = capsys.readouterr().err
        assert "dim" in err and "lr" in err
        assert not out.exists()

    def test_bad_processed(self, tmp_path):
        p = tmp_path / "p.tsv"
        p.write_text("not a processed file\n")
        assert main(["train", str(p), "--out", str(tmp_path / "r")]) == 3

    def test_divergence_exit(self, small_run, tmp_path, monkeypatch):
        proc, cfg = small_run
        import ddghm.cli as cli
        from ddghm.training import DivergenceError

        def boom(*a, **k):
            raise DivergenceError("non-finite loss at epoch 1", {"emb.A": math.inf})

        monkeypatch.setattr(cli, "train", boom)
        out = tmp_path / "run"
        assert main(["train", str(proc), "--config", str(cfg), "--out", str(out)]) == 4
        assert RunManifest.read(out / "manifest.json").status == "diverged"

    def test_unknown_subcommand(self):
        assert main(["bake"]) == 2


class TestEvaluate:
    def test_roundtrip_and_reports(self, small_run, tmp_path, capsys):
        proc, cfg = small_run
        run = tmp_path / "run"
        main(["train", str(proc), "--config", str(cfg), "--out", str(run)])
        capsys.readouterr()
        ev = tmp_path / "ev"
        assert main(["evaluate", str(run / "checkpoint.ckpt"), str(proc), "--split", "all", "--out", str(ev)]) == 0
        tsv = capsys.readouterr().out.splitlines()
        assert tsv[0].startswith("domain\tn\tskipped\tHR@5")
        assert json.loads((ev / "metrics.json").read_text())["counts"] == {"A": 8, "B": 8}

    def test_corrupt_header(self, small_run, tmp_path, capsys):
        proc, _ = small_run
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOT-A-CKPT\n" + b"\0" * 32)
        assert main(["evaluate", str(bad), str(proc)]) == 3
        assert "header" in capsys.readouterr().err

    def test_vocabulary_mismatch(self, small_run, tmp_path, capsys):
        proc, _ = small_run
        ckpt = tmp_path / "m.ckpt"
        DDGHM({"A": 7, "B": 6}, TrainConfig(dim=4)).save(ckpt)
        assert main(["evaluate", str(ckpt), str(proc)]) == 3
        assert "vocabulary mismatch" in capsys.readouterr().err

    def test_random_checkpoint_on_hundred_items(self, tmp_path):
        rng = np.random.default_rng(8)
        triples = toy_problem(600, 100, 3, seed=8)
        proc = tmp_path / "p.tsv"
        write_processed(proc, triples, 100)
        ckpt = tmp_path / "m.ckpt"
        DDGHM({"A": 100, "B": 100}, TrainConfig(dim=8, seed=int(rng.integers(100)))).save(ckpt)
        out = tmp_path / "ev"
        assert main(["evaluate", str(ckpt), str(proc), "--split", "all", "--out", str(out)]) == 0
        rep = json.loads((out / "metrics.json").read_text())
        n = sum(rep["counts"].values())
        hr = sum(rep["metrics"][d]["HR@10"] * rep["counts"][d] for d in "AB") / n
        assert abs(hr - 0.1) <= 3 * math.sqrt(0.1 * 0.9 / n)
