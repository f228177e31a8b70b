import json

import numpy as np
import pytest

from rankloss import losses
from rankloss.cli import resolve_seed, run_command
from rankloss.scorer import ScorerParams


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "d.json"
    assert run_command(["gen-data", "--users", "60", "--items", "150", "--seed", "3", "--out", str(path)]) == 0
    return path


class TestHappyPath:
    def test_train_sce(self, data, tmp_path):
        out = tmp_path / "run.csv"
        code = run_command(["train", "--data", str(data), "--loss", "SCE", "--alpha", "100", "--K", "100",
                            "--epochs", "50", "--seed", "7", "--out", str(out)])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "epoch,train_loss,ndcg@10,hr@10,mrr@10"
        assert len(lines) == 51

    def test_checkpoint_then_eval(self, data, tmp_path):
        ck, rep = tmp_path / "p.npz", tmp_path / "eval.json"
        assert run_command(["train", "--data", str(data), "--epochs", "2", "--checkpoint", str(ck),
                            "--out", str(tmp_path / "r.csv")]) == 0
        assert ScorerParams.load(ck).item_count == 150
        assert run_command(["eval", "--data", str(data), "--params", str(ck), "--format", "json",
                            "--out", str(rep)]) == 0
        rows = [json.loads(line) for line in rep.read_text().splitlines()]
        assert [r["k"] for r in rows] == [1, 5, 10]

    def test_json_format(self, data, tmp_path):
        out = tmp_path / "r.json"
        assert run_command(["train", "--data", str(data), "--epochs", "1", "--format", "json",
                            "--out", str(out)]) == 0
        rec = json.loads(out.read_text())
        assert rec["config"]["loss"]["kind"] == "CE"

    def test_verify_binomial(self, tmp_path):
        out = tmp_path / "v.csv"
        assert run_command(["verify-bounds", "--suite", "binomial", "--out", str(out)]) == 0
        assert "supported" in out.read_text()

    def test_sweep_c(self, data, tmp_path):
        out = tmp_path / "s.csv"
        assert run_command(["sweep", "--sweep", "c", "--values", "1", "10", "--data", str(data),
                            "--loss", "NCE", "--K", "5", "--epochs", "1", "--out", str(out)]) == 0
        assert len(out.read_text().splitlines()) == 3


class TestErrors:
    def test_missing_data(self, capsys):
        assert run_command(["train", "--loss", "SCE"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_no_subcommand(self):
        assert run_command([]) == 1

    def test_unknown_flag(self, data):
        assert run_command(["train", "--data", str(data), "--momentum", "0.9"]) == 1

    def test_option_not_for_loss(self, data, capsys):
        assert run_command(["train", "--data", str(data), "--loss", "CE", "--alpha", "3"]) == 1
        assert "do not apply" in capsys.readouterr().err

    def test_bad_data_file(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{oops")
        assert run_command(["train", "--data", str(bad), "--epochs", "1"]) == 2

    def test_missing_data_file(self, tmp_path):
        assert run_command(["train", "--data", str(tmp_path / "nope.json"), "--epochs", "1"]) == 2

    def test_bad_interaction_log(self, tmp_path):
        log = tmp_path / "log.tsv"
        log.write_text("1\t2\n")
        assert run_command(["gen-data", "--interactions", str(log)]) == 2

    def test_divergence_exit(self, data, monkeypatch):
        monkeypatch.setattr(losses, "ce_loss", lambda t, s: np.full(np.shape(t), np.nan))
        assert run_command(["train", "--data", str(data), "--epochs", "1", "--out", "/dev/null"]) == 4

    def test_broken_sce_violates_lemma(self, monkeypatch, capsys):
        def unscaled(s_pos, neg, alpha):
            s_pos = np.asarray(s_pos, dtype=float)
            both = np.concatenate([s_pos[..., None], np.asarray(neg, dtype=float)], axis=-1)
            return np.logaddexp.reduce(both, axis=-1) - s_pos

        monkeypatch.setattr(losses, "sce_loss", unscaled)
        code = run_command(["verify-bounds", "--suite", "lemmas", "--trials", "100000", "--seed", "1",
                            "--out", "/dev/null"])
        assert code == 3
        assert "SCE_floor" in capsys.readouterr().err


class TestReproducible:
    def test_train_byte_identical(self, data, tmp_path):
        args = ["train", "--data", str(data), "--loss", "NCE", "--K", "8", "--epochs", "3", "--seed", "5"]
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert run_command(args + ["--out", str(a)]) == 0
        assert run_command(args + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_gen_data_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        for p in (a, b):
            assert run_command(["gen-data", "--users", "20", "--items", "30", "--seed", "1", "--out", str(p)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_verify_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        for p in (a, b):
            assert run_command(["verify-bounds", "--suite", "identities", "--trials", "100",
                                "--format", "json", "--out", str(p)]) == 0
        assert a.read_bytes() == b.read_bytes()


class TestLayering:
    def test_flags_override_config(self, data, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"epochs": 2, "lr": 0.05, "loss": {"kind": "NEG", "K": 4}}))
        out = tmp_path / "r.json"
        assert run_command(["train", "--data", str(data), "--config", str(cfg), "--epochs", "1",
                            "--format", "json", "--out", str(out)]) == 0
        rec = json.loads(out.read_text())
        assert rec["config"]["epochs"] == 1
        assert rec["config"]["lr"] == 0.05
        assert rec["config"]["loss"] == {"kind": "NEG", "K": 4}

    def test_sampled_loss_defaults(self, data, tmp_path):
        out = tmp_path / "r.json"
        assert run_command(["train", "--data", str(data), "--loss", "SCE", "--epochs", "1",
                            "--format", "json", "--out", str(out)]) == 0
        loss = json.loads(out.read_text())["config"]["loss"]
        assert loss["alpha"] == 100.0 and loss["K"] == 8

    def test_seed_precedence(self, monkeypatch):
        monkeypatch.setenv("RANKLOSS_SEED", "11")
        assert resolve_seed(None, {}) == 11
        assert resolve_seed(None, {"seed": 4}) == 4
        assert resolve_seed(2, {"seed": 4}) == 2
        monkeypatch.delenv("RANKLOSS_SEED")
        assert resolve_seed(None, {}) == 0

    def test_env_seed_changes_output(self, data, tmp_path, monkeypatch):
        outs = []
        for seed in ("1", "1", "2"):
            monkeypatch.setenv("RANKLOSS_SEED", seed)
            p = tmp_path / f"r{len(outs)}.csv"
            assert run_command(["train", "--data", str(data), "--epochs", "1", "--loss", "NEG",
                                "--K", "3", "--out", str(p)]) == 0
            outs.append(p.read_text())
        assert outs[0] == outs[1] != outs[2]

    def test_bad_env_seed(self, data, monkeypatch):
        monkeypatch.setenv("RANKLOSS_SEED", "abc")
        assert run_command(["train", "--data", str(data), "--epochs", "1"]) == 1
