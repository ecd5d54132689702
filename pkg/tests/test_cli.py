import json

import numpy as np
import pytest
import yaml

from crfgen import __version__
from crfgen.cli import main
from crfgen.compute import load_checkpoint, save_checkpoint
from crfgen.corpus import read_corpus
from crfgen.evaluation import fit_kn, gen_stats, perplexity

TINY = ["--latent-dim", "2", "--embed-dim", "4", "--hidden-dim", "8", "--enc-dim", "8",
        "--enc-embed-dim", "4", "--batch-size", "32", "--epochs", "1", "--kl-warmup", "10",
        "--max-len", "6", "--lr", "0.01"]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    corpus, model = root / "corpus", root / "model"
    assert main(["make-corpus", "--out", str(corpus), "--states", "3", "--words", "8",
                 "--n", "400", "--max-len", "6", "--vocab-size", "11", "--seed", "1"]) == 0
    assert main(["train", "--out", str(model), "--corpus", str(corpus), *TINY]) == 0
    return root


class TestMakeCorpus:
    def test_outputs(self, run):
        c = run / "corpus"
        for name in ("train.txt", "heldout.txt", "vocab.txt", "synth.yaml",
                     "make-corpus.config.yaml", "VERSION"):
            assert (c / name).exists()
        train = read_corpus(c / "train.txt")
        held = read_corpus(c / "heldout.txt")
        assert all(1 <= len(s) <= 6 for s in train + held)
        assert abs(len(held) - 0.1 * (len(train) + len(held))) <= 1
        assert (c / "vocab.txt").read_text().splitlines()[0] != "<bos>"
        assert __version__ in (c / "VERSION").read_text()

    def test_ingest_plain_text(self, tmp_path):
        src = tmp_path / "in.txt"
        src.write_text("The cat sat\nthe dog sat\n\n" + "x " * 20 + "\n", encoding="utf-8")
        assert main(["make-corpus", "--out", str(tmp_path / "c"), "--input", str(src),
                     "--heldout", "0", "--vocab-size", "5", "--max-len", "15"]) == 0
        # "sat" and "the" tie on count and fill the two word slots; the long line is dropped
        assert read_corpus(tmp_path / "c" / "train.txt") == [["the", "<unk>", "sat"]] * 2
        assert (tmp_path / "c" / "vocab.txt").read_text() == "sat\nthe\n"

    def test_synth_spec_file(self, tmp_path):
        spec = tmp_path / "hmm.yaml"
        spec.write_text(yaml.safe_dump({"transition": [[0, 1], [1, 0]],
                                        "emission": [[0.9, 0.0, 0.1], [0.0, 0.9, 0.1]],
                                        "seed": 3}))
        assert main(["make-corpus", "--out", str(tmp_path / "c"), "--synth-spec", str(spec),
                     "--n", "300", "--heldout", "0"]) == 0
        for s in read_corpus(tmp_path / "c" / "train.txt"):
            assert all(a != b for a, b in zip(s, s[1:]))


class TestTrainAndGenerate:
    def test_train_outputs(self, run):
        m = run / "model"
        assert (m / "model.ckpt").exists() and (m / "VERSION").exists()
        assert (m / "trainlog.csv").read_text().startswith("epoch,elbo,recon,kl,seconds\n")
        cfg = yaml.safe_load((m / "train.config.yaml").read_text())
        assert cfg["command"] == "train" and cfg["latent_dim"] == 2 and cfg["version"] == __version__

    def test_generate_is_byte_identical(self, run):
        outs = []
        for k in range(2):
            path = run / f"gen{k}" / "samples.txt"
            assert main(["generate", "--checkpoint", str(run / "model" / "model.ckpt"),
                         "--out", str(path), "--n", "3000", "--seed", "7"]) == 0
            outs.append(path.read_bytes())
        assert outs[0] == outs[1]
        assert len(outs[0].decode().split("\n")) == 3001
        assert (run / "gen0" / "generate.config.yaml").exists()

    def test_generate_modes(self, run):
        ckpt = str(run / "model" / "model.ckpt")
        a, b = run / "fixed.txt", run / "ssm.txt"
        assert main(["generate", "--checkpoint", ckpt, "--out", str(a), "--n", "200",
                     "--length-mode", "fixed", "--length", "3"]) == 0
        assert all(len(s) <= 3 for s in read_corpus(a, keep_empty=True))
        assert main(["generate", "--checkpoint", ckpt, "--out", str(b), "--n", "200",
                     "--unary-only"]) == 0
        assert main(["generate", "--checkpoint", ckpt, "--out", str(a), "--n", "5",
                     "--length-mode", "fixed"]) == 1

    def test_saved_config_reruns_bit_identically(self, run):
        again = run / "again"
        assert main(["train", "--config", str(run / "model" / "train.config.yaml"),
                     "--out", str(again)]) == 0
        assert (again / "model.ckpt").read_bytes() == (run / "model" / "model.ckpt").read_bytes()

    def test_flags_override_config(self, run):
        other = run / "other"
        assert main(["train", "--config", str(run / "model" / "train.config.yaml"),
                     "--out", str(other), "--seed", "5"]) == 0
        assert (other / "model.ckpt").read_bytes() != (run / "model" / "model.ckpt").read_bytes()
        assert yaml.safe_load((other / "train.config.yaml").read_text())["seed"] == 5


class TestEval:
    def test_training_file_as_samples(self, run, capsys):
        c = run / "corpus"
        out = run / "eval"
        assert main(["eval", "--train-file", str(c / "train.txt"), "--samples",
                     f"TRAIN={c / 'train.txt'}", "--heldout", str(c / "heldout.txt"),
                     "--vocab", str(c / "vocab.txt"), "--out", str(out)]) == 0
        rows = [json.loads(x) for x in (out / "report.jsonl").read_text().splitlines()]
        assert [r["label"] for r in rows] == ["TRAIN", "ORACLE"]
        train = read_corpus(c / "train.txt")
        lm = fit_kn(train, 2, 0.75, [w for w in ["<eos>", "<unk>"] + (c / "vocab.txt").read_text().split()])
        assert rows[0]["PPL_2"] == pytest.approx(perplexity(lm, train), rel=1e-12)
        assert rows[0]["rho_uni"] == pytest.approx(gen_stats(train).rho_uni)
        assert rows[0]["PPL_2"] < rows[1]["PPL_2"]
        assert (out / "kn2.counts").exists() and (out / "kn3.counts").exists()
        assert "ORACLE" in capsys.readouterr().out

    def test_needs_inputs(self, run):
        c = run / "corpus"
        assert main(["eval", "--train-file", str(c / "train.txt"), "--out", str(run / "e2")]) == 1


class TestExitCodes:
    def test_selftest(self, capsys):
        assert main(["selftest"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and out.count("PASS") >= 6

    @pytest.mark.parametrize("argv", [[], ["bogus"], ["train", "--out", "x", "--epochs", "many"],
                                      ["generate", "--out", "x"]])
    def test_usage_errors(self, argv, capsys):
        assert main(argv) == 1
        assert "error" in capsys.readouterr().err

    def test_missing_file_is_named(self, tmp_path, capsys):
        missing = tmp_path / "nope.ckpt"
        assert main(["generate", "--checkpoint", str(missing), "--out", str(tmp_path / "o")]) == 1
        assert "nope.ckpt" in capsys.readouterr().err

    def test_missing_config(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "c.yaml"), "--out", "x"]) == 1
        assert "c.yaml" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure(self, run, tmp_path):
        t = load_checkpoint(run / "model" / "model.ckpt")
        t["crf.X"] = np.full_like(t["crf.X"], 800.0)
        bad = tmp_path / "bad.ckpt"
        save_checkpoint(bad, t)
        assert main(["generate", "--checkpoint", str(bad), "--out", str(tmp_path / "s.txt"),
                     "--n", "10"]) == 2
