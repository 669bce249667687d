import csv
import os

import pytest

from laddernat.cli import dispatch, load_config, ConfigError

TINY_CFG = """\
[corpus]
src_vocab = 16
tgt_vocab = 16
pairs = 80
min_len = 3
max_len = 5
registers = 2
valid = 12
test = 12

[model]
d_model = 16
heads = 2
ffn_dim = 32
layers = 1
max_positions = 32
dropout = 0.0
t_z = 4
d_z = 6

[train]
max_steps = 4
validate_every = 2
batch_size = 16
valid_sentences = 6

[analysis]
k = 3
sentences = 12
trials = 3
words_changed = 1,2

[bench]
lengths = 4
sentences = 1
runs = 1
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return str(path)


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def body(path):
    with open(path) as fh:
        return [line for line in fh if not line.startswith("#")]


class TestConfig:
    def test_defaults_and_override(self):
        cfg = load_config(overrides=["train.lr_peak=0.003", "corpus.registers=2"])
        assert cfg["train"]["lr_peak"] == 0.003 and cfg["corpus"]["registers"] == 2
        assert cfg["model"]["d_model"] == 64

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="train.learning_rate"):
            load_config(overrides=["train.learning_rate=1"])

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="corpus.pairs"):
            load_config(overrides=["corpus.pairs=many"])


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        assert dispatch(["gen-data", "--bogus"]) == 1

    def test_unknown_config_key(self, tmp_path, capsys):
        assert dispatch(["gen-data", "--out", str(tmp_path), "--set", "corpus.colour=red"]) == 1
        assert "corpus.colour" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert dispatch(["gen-data", "--config", str(tmp_path / "nope.cfg")]) == 1

    def test_missing_checkpoint(self, tmp_path, cfg_file, capsys):
        data_dir = str(tmp_path / "data")
        assert dispatch(["gen-data", "--config", cfg_file, "--out", data_dir]) == 0
        code = dispatch(["eval", "--config", cfg_file, "--data", data_dir, "--runs", str(tmp_path / "none"),
                         "--models", "laddernmt", "--out", str(tmp_path / "e.csv")])
        assert code == 2
        assert "checkpoint" in capsys.readouterr().err

    def test_missing_data(self, tmp_path, cfg_file):
        assert dispatch(["train", "--config", cfg_file, "--model", "lanmt", "--data", str(tmp_path)]) == 2

    def test_invalid_corpus_spec(self, tmp_path):
        assert dispatch(["gen-data", "--out", str(tmp_path), "--set", "corpus.min_len=9",
                         "--set", "corpus.max_len=3"]) == 1


class TestGenData:
    def test_deterministic(self, tmp_path, cfg_file):
        a, b = tmp_path / "a", tmp_path / "b"
        assert dispatch(["gen-data", "--config", cfg_file, "--out", str(a), "--seed", "3"]) == 0
        assert dispatch(["gen-data", "--config", cfg_file, "--out", str(b), "--seed", "3"]) == 0
        for name in ("train.tsv", "valid.tsv", "test.tsv", "train.tsv.manifest.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()
        assert len(body(a / "train.tsv")) == 56


class TestPipeline:
    def test_train_eval_analyze_bench(self, tmp_path, cfg_file):
        data_dir, runs = str(tmp_path / "data"), str(tmp_path / "runs")
        base = ["--config", cfg_file]
        assert dispatch(["gen-data", *base, "--out", data_dir]) == 0
        assert dispatch(["train", *base, "--model", "laddernmt", "--data", data_dir, "--out", runs]) == 0
        assert dispatch(["train", *base, "--model", "lanmt", "--data", data_dir, "--out", runs, "--beta", "2"]) == 0
        assert dispatch(["train-at", *base, "--data", data_dir, "--out", str(tmp_path / "at")]) == 0
        metrics = rows(os.path.join(runs, "seed0", "LadderNMT.metrics.csv"))
        assert [r["step"] for r in metrics] == ["2", "4"]

        out = str(tmp_path / "eval.csv")
        assert dispatch(["eval", *base, "--data", data_dir, "--runs", runs, "--models", "lanmt,laddernmt",
                         "--out", out]) == 0
        got = {(r["model"], r["metric"]) for r in rows(out)}
        assert ("LadderNMT", "bleu_fwd_test") in got and ("LaNMT", "bleu_rev_test") in got

        out = str(tmp_path / "an" / "analysis.csv")
        assert dispatch(["analyze", *base, "--data", data_dir, "--runs", runs, "--out", out]) == 0
        metrics = {(r["model"], r["metric"]) for r in rows(out)}
        for m in ("cca_score", "language_purity", "relative_sensitivity.w1", "relative_sensitivity.w2",
                  "params.total"):
            assert ("LadderNMT", m) in metrics and ("LaNMT", m) in metrics
        assert os.path.exists(str(tmp_path / "an" / "analysis.LadderNMT.pca.csv"))
        assert len(body(tmp_path / "an" / "analysis.LaNMT.latents.csv")) == 1 + 2 * 12

        inp = tmp_path / "in.txt"
        inp.write_text("3 4 5\n6 7 8 9\n")
        assert dispatch(["translate", *base, "--checkpoint", os.path.join(runs, "seed0", "LadderNMT"),
                         "--input", str(inp), "--out", str(tmp_path / "out.txt")]) == 0
        assert len(body(tmp_path / "out.txt")) == 2

        bench = str(tmp_path / "bench.csv")
        assert dispatch(["bench", *base, "--nat", os.path.join(runs, "seed0", "LadderNMT"),
                         "--at", str(tmp_path / "at"), "--out", bench]) == 0
        assert {r["model"] for r in rows(bench)} == {"LadderNMT", "AT"}
