import numpy as np
import pytest
from click.testing import CliRunner
from PIL import Image

from dextts.checkpoint import Checkpoint
from dextts.corpus import ToyCorpus
from dextts.main import EXIT_NUMERIC, EXIT_USAGE, cli
from dextts.pipeline import DexTTS, synthesize
from dextts.utils import read_csv_rows, read_matrix_csv, write_matrix_csv

TINY_TOML = """\
profile = "{profile}"
n_mels = 8
hidden = 8
dp_hidden = 8
dit_blocks = 1
style_layers = 2
codebook_size = 8
codebook_dim = 6
batch_size = 2
epochs = 1
nfe = 2
max_loss = {max_loss}
diffusion_draws = 1

[text]
layers = 1
hidden = 8
heads = 2
vocab = 6
"""

CORPUS_ARGS = ["--n", "4", "--bins", "8", "--vocab", "6", "--min-frames", "10", "--max-frames", "14"]


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def corpus_file(runner, tmp_path):
    path = tmp_path / "toy.dexc"
    result = runner.invoke(cli, ["corpus", "--seed", "0", "--out", str(path), *CORPUS_ARGS])
    assert result.exit_code == 0, result.output
    return path


def _config_file(tmp_path, profile="toy", max_loss=1e6):
    path = tmp_path / f"{profile}.toml"
    path.write_text(TINY_TOML.format(profile=profile, max_loss=max_loss))
    return path


@pytest.fixture
def dex_ckpt(tiny_config, tmp_path):
    return Checkpoint.from_model(DexTTS(tiny_config)).save(tmp_path / "dex.dext")


@pytest.fixture
def gedex_ckpt(tiny_gedex_config, tmp_path):
    return Checkpoint.from_model(DexTTS(tiny_gedex_config)).save(tmp_path / "gedex.dext")


def test_corpus_is_reproducible(runner, corpus_file, tmp_path):
    other = tmp_path / "again.dexc"
    result = runner.invoke(cli, ["corpus", "--seed", "0", "--out", str(other), *CORPUS_ARGS])
    assert result.exit_code == 0
    first = runner.invoke(cli, ["corpus", "--seed", "0", "--out", str(corpus_file), "--force", *CORPUS_ARGS])
    assert first.output.strip().split("sha256=")[1] == result.output.strip().split("sha256=")[1]
    assert len(ToyCorpus.load(other)) == 4


def test_corpus_refuses_overwrite_and_bad_sizes(runner, corpus_file, tmp_path):
    result = runner.invoke(cli, ["corpus", "--out", str(corpus_file)])
    assert result.exit_code == EXIT_USAGE
    assert "--force" in result.output
    result = runner.invoke(cli, ["corpus", "--out", str(tmp_path / "empty.dexc"), "--n", "0"])
    assert result.exit_code == EXIT_USAGE
    assert "Error:" in result.output


def test_train_writes_checkpoint_losses_and_alignments(runner, corpus_file, tmp_path):
    out = tmp_path / "run" / "model.dext"
    result = runner.invoke(cli, ["train", "--config", str(_config_file(tmp_path)), "--corpus", str(corpus_file),
                                 "--out", str(out), "--alignments", str(tmp_path / "align.csv")])
    assert result.exit_code == 0, result.output
    assert '"hidden": 8' in result.output
    assert Checkpoint.load(out).epoch == 1
    assert len(read_csv_rows(tmp_path / "run" / "model.losses.csv")) == 1
    rows = read_csv_rows(tmp_path / "align.csv")
    data = ToyCorpus.load(corpus_file)
    assert len(rows) == sum(len(u.phonemes) for u in data)
    assert sum(int(r["duration"]) for r in rows) == sum(u.mel.frames for u in data)
    assert list((tmp_path / "logs").glob("run_*.json"))


def test_train_error_exit_codes(runner, corpus_file, tmp_path):
    out = str(tmp_path / "m.dext")
    result = runner.invoke(cli, ["train", "--corpus", str(tmp_path / "missing.dexc"), "--out", out])
    assert result.exit_code == EXIT_USAGE
    result = runner.invoke(cli, ["train", "--config", "no-such-profile", "--corpus", str(corpus_file), "--out", out])
    assert result.exit_code == EXIT_USAGE
    diverging = _config_file(tmp_path, max_loss=1e-9)
    result = runner.invoke(cli, ["train", "--config", str(diverging), "--corpus", str(corpus_file), "--out", out])
    assert result.exit_code == EXIT_NUMERIC
    assert "exceeded" in result.output


def test_train_resume_continues_a_checkpoint(runner, corpus_file, tmp_path):
    config = str(_config_file(tmp_path))
    first, resumed, straight = tmp_path / "e1.dext", tmp_path / "resumed.dext", tmp_path / "straight.dext"
    args = ["train", "--config", config, "--corpus", str(corpus_file)]
    assert runner.invoke(cli, [*args, "--out", str(first)]).exit_code == 0
    assert runner.invoke(cli, [*args, "--out", str(straight), "--epochs", "2"]).exit_code == 0

    result = runner.invoke(cli, ["train", "--resume", str(first), "--epochs", "2", "--corpus", str(corpus_file),
                                 "--out", str(resumed)])
    assert result.exit_code == 0, result.output
    ckpt = Checkpoint.load(resumed)
    assert ckpt.epoch == 2 and ckpt.step == 4
    assert [r["epoch"] for r in read_csv_rows(tmp_path / "resumed.losses.csv")] == ["2"]
    assert ckpt.to_bytes() == Checkpoint.load(straight).to_bytes()

    result = runner.invoke(cli, ["train", "--resume", str(first), "--seed", "3", "--corpus", str(corpus_file),
                                 "--out", str(tmp_path / "x.dext")])
    assert result.exit_code == EXIT_USAGE


def test_info(runner, dex_ckpt):
    result = runner.invoke(cli, ["info", "--config", "paper-gedex"])
    assert result.exit_code == 0
    assert '"patch_size": 4' in result.output and "mode=gedex epoch=0" in result.output
    result = runner.invoke(cli, ["info", "--ckpt", str(dex_ckpt)])
    assert result.exit_code == 0
    assert "mode=dex" in result.output and '"n_mels": 8' in result.output


def test_synth_outputs_and_single_step_identity(runner, dex_ckpt, tmp_path):
    ref = np.random.default_rng(0).normal(size=(8, 10))
    f0 = np.random.default_rng(1).normal(size=10)
    write_matrix_csv(tmp_path / "ref.csv", ref)
    write_matrix_csv(tmp_path / "f0.csv", f0)
    out, plot = tmp_path / "mel.csv", tmp_path / "mel.png"
    result = runner.invoke(cli, ["synth", "--ckpt", str(dex_ckpt), "--text-ids", "1,2,3", "--ref",
                                 str(tmp_path / "ref.csv"), "--ref-f0", str(tmp_path / "f0.csv"), "--nfe", "1",
                                 "--seed", "5", "--durations", "2,3,4", "--out", str(out), "--plot", str(plot)])
    assert result.exit_code == 0, result.output
    values = read_matrix_csv(out)
    assert values.shape == (8, 9)
    expected, _ = synthesize(Checkpoint.load(dex_ckpt).to_model(), [1, 2, 3], ref=ref, log_f0=f0, nfe=1, seed=5,
                             durations=[2, 3, 4])
    np.testing.assert_array_equal(values, expected.values)
    with Image.open(plot) as image:
        assert image.size == (9, 8)


def test_synth_input_errors(runner, dex_ckpt, tmp_path):
    write_matrix_csv(tmp_path / "ref.csv", np.zeros((5, 10)))
    result = runner.invoke(cli, ["synth", "--ckpt", str(dex_ckpt), "--text-ids", "1,2", "--ref",
                                 str(tmp_path / "ref.csv"), "--out", str(tmp_path / "o.csv")])
    assert result.exit_code == EXIT_USAGE
    result = runner.invoke(cli, ["synth", "--ckpt", str(dex_ckpt), "--text-ids", "1,2", "--out",
                                 str(tmp_path / "o.csv")])
    assert result.exit_code == EXIT_USAGE
    result = runner.invoke(cli, ["synth", "--ckpt", str(dex_ckpt), "--text-ids", "1,x", "--out",
                                 str(tmp_path / "o.csv")])
    assert result.exit_code == EXIT_USAGE


def test_synth_reference_free_warns_and_ignores_reference(runner, gedex_ckpt, tmp_path):
    write_matrix_csv(tmp_path / "ref.csv", np.ones((8, 6)))
    base = ["synth", "--ckpt", str(gedex_ckpt), "--text-ids", "0,4", "--nfe", "2", "--durations", "3,3"]
    plain = runner.invoke(cli, base + ["--out", str(tmp_path / "a.csv")])
    with_ref = runner.invoke(cli, base + ["--ref", str(tmp_path / "ref.csv"), "--out", str(tmp_path / "b.csv")])
    assert plain.exit_code == 0 and with_ref.exit_code == 0
    assert "Warning: reference-free checkpoint" in with_ref.output
    np.testing.assert_array_equal(read_matrix_csv(tmp_path / "a.csv"), read_matrix_csv(tmp_path / "b.csv"))


def test_sweep_report(runner, gedex_ckpt, corpus_file, tmp_path):
    out = tmp_path / "sweep.csv"
    result = runner.invoke(cli, ["sweep", "--ckpt", str(gedex_ckpt), "--corpus", str(corpus_file),
                                 "--nfe-list", "1,2", "--repeat", "2", "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "nfe=1: mean rtf" in result.output and "nfe=2: mean rtf" in result.output
    assert [(r["nfe"], r["repeat"]) for r in read_csv_rows(out)] == [("1", "0"), ("1", "1"), ("2", "0"), ("2", "1")]


def test_ablate_rejects_unknown_kind(runner, corpus_file, tmp_path):
    result = runner.invoke(cli, ["ablate", "--corpus", str(corpus_file), "--kinds", "conv-freq,wavelet",
                                 "--out", str(tmp_path / "a.csv")])
    assert result.exit_code == EXIT_USAGE
    assert "wavelet" in result.output
