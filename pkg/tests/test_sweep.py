import json
import math

import pytest
from pydantic import ValidationError

from dextts.logger import run_logger
from dextts.models import EmbeddingKind, RunReport, profile_config
from dextts.pipeline import DexTTS
from dextts.sweep import (
    ABLATION_COLUMNS,
    REPORT_COLUMNS,
    ablation_variants,
    real_time_factor,
    run_embedding_ablation,
    run_nfe_sweep,
    trained_time_patches,
    variant_label,
    write_ablation_csv,
    write_report_csv,
)
from dextts.utils import read_csv_rows


def test_real_time_factor():
    # 100 frames at hop 256 / 22050 Hz is about 1.161 s of speech
    assert real_time_factor(2.0, 100, 256, 22050) == pytest.approx(2.0 / (100 * 256 / 22050))
    assert real_time_factor(0.5, 441, 100, 22050) == pytest.approx(0.25)


def test_nfe_sweep_rows(tiny_gedex_config, tiny_corpus, tmp_path):
    model = DexTTS(tiny_gedex_config)
    report = run_nfe_sweep(model, tiny_corpus, [1, 2], repeat=2)
    assert [(r.nfe, r.repeat) for r in report.rows] == [(1, 0), (1, 1), (2, 0), (2, 1)]
    frames = sum(tiny_corpus[0].durations)
    for row in report.rows:
        assert row.frames == frames
        assert row.rtf == pytest.approx(real_time_factor(row.seconds, frames, report.hop_length, report.sample_rate))
    assert report.mean_rtf(1) > 0
    assert math.isnan(report.mean_rtf(7))

    rows = read_csv_rows(write_report_csv(tmp_path / "sweep.csv", report))
    assert list(rows[0]) == REPORT_COLUMNS and len(rows) == 4


def test_report_rejects_rtf_inconsistent_with_raw_columns():
    with pytest.raises(ValidationError, match="inconsistent"):
        RunReport(hop_length=256, sample_rate=22050,
                  rows=[{"nfe": 1, "repeat": 0, "mse": 0.1, "seconds": 1.0, "frames": 10, "rtf": 123.0}])
    rtf = 1.0 / (10 * 256 / 22050)
    report = RunReport(hop_length=256, sample_rate=22050,
                       rows=[{"nfe": 1, "repeat": 0, "mse": 0.1, "seconds": 1.0, "frames": 10, "rtf": rtf}])
    assert report.mean_rtf(1) == rtf


def test_ablation_variants():
    base = profile_config("toy")
    variants = ablation_variants(base, list(EmbeddingKind), [2, 4], overlap_both=True)
    assert len(variants) == 10
    assert {(v.embedding, v.overlap, v.patch_size) for v in variants} >= {
        (EmbeddingKind.CONV_FREQ, False, 4), (EmbeddingKind.SIN_COS, True, 2)}
    assert sum(not v.overlap for v in variants) == 2
    assert len(ablation_variants(base, ["conv-freq"], [2], overlap_both=False)) == 1


def test_trained_time_patches(tiny_corpus):
    longest = max(u.mel.frames for u in tiny_corpus)
    assert trained_time_patches(tiny_corpus, 2) == -(-longest // 4)


def test_time_freq_embedding_fails_on_unseen_length(tiny_gedex_config, tiny_corpus, tmp_path):
    rows = run_embedding_ablation(tiny_gedex_config, tiny_corpus,
                                  [EmbeddingKind.TIME_FREQ, EmbeddingKind.CONV_FREQ], steps=1, nfe=1, threads=1)
    by_kind = {row.kind: row for row in rows}
    assert by_kind[EmbeddingKind.TIME_FREQ].long_status == "extent error"
    assert by_kind[EmbeddingKind.TIME_FREQ].long_mse is None
    assert by_kind[EmbeddingKind.CONV_FREQ].long_status == "ok"
    assert by_kind[EmbeddingKind.CONV_FREQ].long_mse >= 0
    for row in rows:
        assert row.eval_mse is not None and row.params > 0

    table = read_csv_rows(write_ablation_csv(tmp_path / "ablation.csv", rows))
    assert list(table[0]) == ABLATION_COLUMNS
    assert table[0]["kind"] == "time-freq" and table[0]["long_mse"] == ""


def test_concurrent_ablation_keeps_run_log_rows_apart(tiny_gedex_config, tiny_corpus):
    kinds = [EmbeddingKind.SIN_COS, EmbeddingKind.CONV_FREQ]
    with run_logger("ablate test") as run:
        run_embedding_ablation(tiny_gedex_config, tiny_corpus, kinds, steps=4, nfe=1, threads=2)
    record = json.loads(run.json_file.read_text())
    labels = ["sin-cos-P2-overlap", "conv-freq-P2-overlap"]
    for label in labels:
        assert [e["epoch"] for e in record["epochs"] if e["variant"] == label] == [1, 2]
        assert record["variant_steps"][label] == 4
    assert len(record["epochs"]) == 4
    assert record["steps"] == 8
    assert variant_label(tiny_gedex_config) == "conv-freq-P2-overlap"
