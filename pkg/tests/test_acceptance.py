"""
End-to-end runs on the toy profile. Minutes of CPU each; run with `pytest -m slow`.
"""
import numpy as np
import pytest

from dextts.corpus import synth_corpus
from dextts.models import EmbeddingKind, profile_config
from dextts.pipeline import DexTTS
from dextts.sweep import run_embedding_ablation, run_nfe_sweep, sample_mse
from dextts.trainer import train
from dextts.utils import read_csv_rows

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def toy_corpus():
    return synth_corpus(0, 8)


@pytest.fixture(scope="module")
def overfit(toy_corpus, tmp_path_factory):
    config = profile_config("toy")
    loss_csv = tmp_path_factory.mktemp("overfit") / "losses.csv"
    ckpt = train(config, toy_corpus, loss_csv=loss_csv)
    return config, ckpt, read_csv_rows(loss_csv)


def test_overfit_reduces_prior_loss(overfit):
    _, ckpt, rows = overfit
    assert ckpt.step <= 300
    prior = [float(r["L_prior"]) for r in rows]
    assert prior[-1] <= 0.1 * prior[0]


def test_overfit_total_loss_decreases_between_quartiles(overfit):
    _, _, rows = overfit
    total = np.array([float(r["total"]) for r in rows])
    quarter = max(1, len(total) // 4)
    assert total[-quarter:].mean() < total[:quarter].mean()


def test_overfit_sample_beats_untrained(overfit, toy_corpus):
    config, ckpt, _ = overfit
    utt = toy_corpus[0]
    trained = sample_mse(ckpt.to_model(), utt, nfe=50)
    untrained = sample_mse(DexTTS(config), utt, nfe=50)
    assert trained * 5 <= untrained


def test_rtf_grows_with_nfe(overfit, toy_corpus):
    _, ckpt, _ = overfit
    report = run_nfe_sweep(ckpt.to_model(), toy_corpus, [10, 25, 50], repeat=2)
    assert report.mean_rtf(10) < report.mean_rtf(25) < report.mean_rtf(50)


def test_every_embedding_kind_runs(tiny_gedex_config, tiny_corpus):
    rows = run_embedding_ablation(tiny_gedex_config, tiny_corpus, list(EmbeddingKind), steps=2, nfe=2,
                                  overlap_both=True)
    assert [row.kind for row in rows] == list(EmbeddingKind) + [EmbeddingKind.CONV_FREQ]
    status = {(row.kind, row.overlap): row.long_status for row in rows}
    assert status[(EmbeddingKind.TIME_FREQ, True)] == "extent error"
    assert status[(EmbeddingKind.CONV_FREQ, True)] == "ok"
    assert status[(EmbeddingKind.CONV_FREQ, False)] == "ok"
