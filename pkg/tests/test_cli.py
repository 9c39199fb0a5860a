import json

import numpy as np
import pytest
from click.testing import CliRunner

from lnprobe import read_checkpoint, write_checkpoint
from lnprobe.cli import main
from lnprobe.encoder import EncoderConfig, init_params, mini_schema
from lnprobe.schema import save_schema


TINY = EncoderConfig(num_layers=2, hidden_dim=16, num_heads=2, ff_dim=32,
                     vocab_size=64, max_seq_len=16)

WORDS = ("alpha beta gamma delta epsilon zeta eta theta iota kappa "
         "lambda mu nu xi omicron pi rho sigma tau upsilon").split()


def run(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


@pytest.fixture(scope="session")
def corpus_file(tmp_path_factory):
    rng = np.random.default_rng(0)
    docs = []
    for _ in range(8):
        words = rng.choice(WORDS, size=30)
        docs.append(" ".join(words))
    path = tmp_path_factory.mktemp("corpus") / "corpus.txt"
    path.write_text("\n\n".join(docs))
    return path


@pytest.fixture(scope="session")
def trained(tmp_path_factory, corpus_file):
    """A short CLI training run shared by the eval/sweep/heatmap tests."""
    out_dir = tmp_path_factory.mktemp("run")
    result = run("train", "--corpus", corpus_file, "--num-layers", 2,
                 "--hidden-dim", 16, "--num-heads", 2, "--ff-dim", 32,
                 "--vocab-size", 64, "--max-seq-len", 16, "--steps", 4,
                 "--batch-size", 4, "--snapshot-every", 100, "--out", out_dir)
    assert result.exit_code == 0, result.output
    return out_dir


@pytest.fixture()
def planted(tmp_path):
    """Mini checkpoint with dim 5 planted as an outlier in every layer."""
    params = init_params(TINY, seed=3)
    rng = np.random.default_rng(0)
    for layer in range(TINY.num_layers):
        for name in (f"layer.{layer}.ln.gamma", f"layer.{layer}.ln.beta"):
            params.tensors[name] += rng.normal(0, 0.02, TINY.hidden_dim).astype(np.float32)
            params.tensors[name][5] = 6.0
    ckpt_path = tmp_path / "planted.safetensors"
    write_checkpoint(params.to_checkpoint(), ckpt_path)
    schema_path = tmp_path / "schema.json"
    save_schema(mini_schema(TINY), schema_path)
    return ckpt_path, schema_path


class TestTrain:
    def test_outputs_present(self, trained):
        names = {p.name for p in trained.iterdir()}
        assert {"vocab.json", "loss.csv", "ln_trajectories.tsv",
                "train.report.json", "step0000000.safetensors",
                "step0000004.safetensors"} <= names
        report = json.loads((trained / "train.report.json").read_text())
        assert len(report["snapshots"]) == 2
        assert "manifest" in report

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exits_4(self, tmp_path, corpus_file):
        result = run("train", "--corpus", corpus_file, "--num-layers", 1,
                     "--hidden-dim", 16, "--num-heads", 2, "--ff-dim", 32,
                     "--vocab-size", 64, "--max-seq-len", 16, "--steps", 30,
                     "--batch-size", 4, "--learning-rate", 1e6,
                     "--out", tmp_path / "div")
        assert result.exit_code == 4


class TestDetect:
    def test_finds_planted_dim(self, planted, tmp_path):
        ckpt, schema = planted
        out = tmp_path / "report.json"
        result = run("detect", ckpt, "--schema", schema, "--out", out)
        assert result.exit_code == 0, result.output
        assert "outlier dims: [5]" in result.output
        payload = json.loads(out.read_text())
        assert payload["outlier_dims"] == [5]
        assert len(payload["fingerprint"]) == 64

    def test_replay_is_byte_identical(self, planted, tmp_path):
        ckpt, schema = planted
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert run("detect", ckpt, "--schema", schema, "--out", a).exit_code == 0
        assert run("detect", ckpt, "--schema", schema, "--out", b).exit_code == 0
        assert a.read_bytes() == b.read_bytes()

    def test_timestamped_mode_adds_timestamp(self, planted, tmp_path):
        ckpt, schema = planted
        out = tmp_path / "t.json"
        assert run("--timestamped", "detect", ckpt, "--schema", schema,
                   "--out", out).exit_code == 0
        payload = json.loads(out.read_text())
        assert "created" in payload["manifest"]

    def test_missing_schema_is_usage_error(self, planted, tmp_path):
        ckpt, _ = planted
        result = run("detect", ckpt, "--out", tmp_path / "r.json")
        assert result.exit_code == 2

    def test_unknown_preset_is_usage_error(self, planted, tmp_path):
        ckpt, _ = planted
        result = run("detect", ckpt, "--preset", "nope", "--out", tmp_path / "r.json")
        assert result.exit_code == 2

    def test_corrupt_checkpoint_exits_3(self, tmp_path, planted):
        _, schema = planted
        bad = tmp_path / "bad.safetensors"
        bad.write_bytes(b"not a checkpoint at all")
        result = run("detect", bad, "--schema", schema, "--out", tmp_path / "r.json")
        assert result.exit_code == 3


class TestStats:
    def test_writes_csv_and_report(self, planted, tmp_path):
        ckpt, schema = planted
        out = tmp_path / "stats.csv"
        result = run("stats", ckpt, "--schema", schema, "--out", out)
        assert result.exit_code == 0, result.output
        lines = out.read_text().splitlines()
        assert lines[0].startswith("layer,")
        assert len(lines) == 1 + TINY.num_layers
        assert (tmp_path / "stats.report.json").exists()


class TestMask:
    def test_inline_dims(self, planted, tmp_path):
        ckpt, schema = planted
        out = tmp_path / "masked.safetensors"
        result = run("mask", ckpt, "--schema", schema, "--dims", "5", "--out", out)
        assert result.exit_code == 0, result.output
        assert f"masked {2 * TINY.num_layers} weights" in result.output
        masked = read_checkpoint(out)
        for layer in range(TINY.num_layers):
            assert masked[f"layer.{layer}.ln.gamma"].as_array()[5] == 0.0
            assert masked[f"layer.{layer}.ln.beta"].as_array()[5] == 0.0
        assert (tmp_path / "masked.plan.json").exists()
        assert (tmp_path / "masked.report.json").exists()

    def test_plan_file_roundtrip(self, planted, tmp_path):
        ckpt, schema = planted
        first = tmp_path / "m1.safetensors"
        assert run("mask", ckpt, "--schema", schema, "--dims", "5",
                   "--out", first).exit_code == 0
        second = tmp_path / "m2.safetensors"
        result = run("mask", ckpt, "--schema", schema, "--plan",
                     tmp_path / "m1.plan.json", "--out", second)
        assert result.exit_code == 0, result.output
        assert first.read_bytes() == second.read_bytes()

    def test_random_baseline_requires_n(self, planted, tmp_path):
        ckpt, schema = planted
        result = run("mask", ckpt, "--schema", schema, "--baseline", "random",
                     "--out", tmp_path / "m.safetensors")
        assert result.exit_code == 2

    def test_lsf_baseline_runs(self, planted, tmp_path):
        ckpt, schema = planted
        out = tmp_path / "lsf.safetensors"
        result = run("mask", ckpt, "--schema", schema, "--baseline", "lsf",
                     "--n", 2, "--out", out)
        assert result.exit_code == 0, result.output
        # the planted 6.0 gammas are globally largest, so dim 5 gets zeroed
        masked = read_checkpoint(out)
        assert masked["layer.0.ln.gamma"].as_array()[5] == 0.0


class TestEval:
    def test_eval_and_masked_eval(self, trained, corpus_file, tmp_path):
        ckpt = trained / "step0000004.safetensors"
        out = tmp_path / "eval.json"
        result = run("eval", ckpt, "--corpus", corpus_file,
                     "--vocab", trained / "vocab.json", "--max-seq-len", 16,
                     "--out", out)
        assert result.exit_code == 0, result.output
        payload = json.loads(out.read_text())
        assert payload["cross_entropy"] > 0
        assert payload["masked_token_count"] > 0

    def test_missing_corpus_exits_2(self, trained, tmp_path):
        result = run("eval", trained / "step0000004.safetensors",
                     "--corpus", tmp_path / "nope.txt",
                     "--vocab", trained / "vocab.json", "--out", tmp_path / "o.json")
        assert result.exit_code == 2


class TestSweepHeatmap:
    def test_sweep_tsv(self, trained, corpus_file, tmp_path):
        out = tmp_path / "sweep.tsv"
        result = run("sweep", trained / "step0000004.safetensors",
                     "--corpus", corpus_file, "--vocab", trained / "vocab.json",
                     "--max-seq-len", 16, "--out", out)
        assert result.exit_code == 0, result.output
        lines = out.read_text().splitlines()
        assert len(lines) == 2 + 16  # header + baseline + one row per dim
        assert json.loads(out.with_suffix(".report.json").read_text())["top_dim"] >= 0

    def test_heatmap_from_text(self, trained, tmp_path):
        out = tmp_path / "heat.tsv"
        result = run("heatmap", trained / "step0000004.safetensors",
                     "--vocab", trained / "vocab.json", "--text", "alpha beta gamma",
                     "--mark", "5", "--max-seq-len", 16, "--out", out)
        assert result.exit_code == 0, result.output
        lines = out.read_text().splitlines()
        assert lines[0] == "layer\ttoken\tdim\tvalue"
        assert len(lines) > 1

    def test_heatmap_needs_text_or_corpus(self, trained, tmp_path):
        result = run("heatmap", trained / "step0000004.safetensors",
                     "--vocab", trained / "vocab.json", "--out", tmp_path / "h.tsv")
        assert result.exit_code == 2


class TestFingerprint:
    def test_stable_across_invocations(self, planted):
        ckpt, schema = planted
        a = run("fingerprint", ckpt, "--schema", schema)
        b = run("fingerprint", ckpt, "--schema", schema)
        assert a.exit_code == b.exit_code == 0
        assert a.output == b.output
        assert a.output.startswith("checkpoint ")
        assert "report " in a.output
