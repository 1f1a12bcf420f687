"""
Evaluation harnesses: the NFE/RTF sweep and the patch-embedding ablation.
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from dextts.corpus import ToyCorpus, Utterance, synth_corpus
from dextts.errors import ExtentError
from dextts.layers.decoder import DOWN_FACTOR
from dextts.models import AblationRow, EmbeddingKind, ModelConfig, RunReport, RunReportRow
from dextts.numerics import no_grad
from dextts.pipeline import DexTTS, synthesize, total_loss
from dextts.settings import get_settings
from dextts.trainer import train
from dextts.utils import write_csv

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["nfe", "repeat", "mse", "seconds", "frames", "rtf"]
ABLATION_COLUMNS = ["kind", "overlap", "patch_size", "params", "train_loss", "eval_mse", "long_mse", "long_status"]


def real_time_factor(seconds: float, frames: int, hop_length: int, sample_rate: int) -> float:
    """Synthesis time over the duration of the synthesized speech."""
    return seconds / (frames * hop_length / sample_rate)


def _synthesize_utterance(model: DexTTS, utt: Utterance, nfe: int, seed: int):
    ref = None if model.reference_free else utt.mel
    f0 = None if model.reference_free else utt.log_f0
    return synthesize(model, utt.phonemes, ref=ref, log_f0=f0, nfe=nfe, seed=seed, durations=utt.durations)


def sample_mse(model: DexTTS, utt: Utterance, nfe: int, seed: int = 0) -> float:
    """MSE of a sample (ground-truth durations, own reference) against the utterance's mel."""
    mel, _ = _synthesize_utterance(model, utt, nfe, seed)
    return float(np.mean((mel.values - utt.mel.values) ** 2))


def run_nfe_sweep(model: DexTTS, corpus: ToyCorpus, nfe_list: Sequence[int], repeat: int = 1,
                  seed: int = 0, utterance: int = 0) -> RunReport:
    """
    Time synthesis of one corpus utterance for every (nfe, repeat).

    Timing covers the whole synthesis call (style encoding through the
    sampler loop) and excludes model loading. Runs are sequential.
    """
    cfg = model.config
    utt = corpus[utterance]
    rows = []
    for nfe in nfe_list:
        for r in range(repeat):
            start = time.perf_counter()
            mel, _ = _synthesize_utterance(model, utt, nfe, seed + r)
            seconds = time.perf_counter() - start
            rows.append(RunReportRow(
                nfe=nfe,
                repeat=r,
                mse=float(np.mean((mel.values - utt.mel.values) ** 2)),
                seconds=seconds,
                frames=mel.frames,
                rtf=real_time_factor(seconds, mel.frames, cfg.hop_length, cfg.sample_rate),
            ))
            logger.info(f"nfe={nfe} repeat={r}: {seconds:.3f}s, rtf={rows[-1].rtf:.4f}, mse={rows[-1].mse:.4f}")
    return RunReport(hop_length=cfg.hop_length, sample_rate=cfg.sample_rate, rows=rows)


def write_report_csv(path: Union[str, Path], report: RunReport) -> Path:
    return write_csv(path, REPORT_COLUMNS, [row.model_dump() for row in report.rows])


# ------------------------------------------------------------- ablation

def trained_time_patches(corpus: ToyCorpus, patch_size: int) -> int:
    """Time patches of the longest corpus utterance at the decoder bottleneck."""
    multiple = DOWN_FACTOR * patch_size
    return max(math.ceil(u.mel.frames / multiple) for u in corpus)


def ablation_variants(base: ModelConfig, kinds: Sequence[EmbeddingKind], patch_sizes: Sequence[int],
                      overlap_both: bool) -> List[ModelConfig]:
    """One config per (patch size, kind, overlap); the non-overlapping rerun applies to conv-freq."""
    variants = []
    for p in patch_sizes:
        for kind in kinds:
            kind = EmbeddingKind(kind)
            overlaps = [True, False] if overlap_both and kind == EmbeddingKind.CONV_FREQ else [True]
            for overlap in overlaps:
                variants.append(base.model_copy(update={"embedding": kind, "overlap": overlap, "patch_size": p}))
    return variants


def variant_label(config: ModelConfig) -> str:
    """Run-log tag of one ablation variant, e.g. `conv-freq-P2-overlap`."""
    return f"{config.embedding.value}-P{config.patch_size}-{'overlap' if config.overlap else 'plain'}"


def _run_variant(config: ModelConfig, corpus: ToyCorpus, long_utt: Utterance, nfe: int) -> AblationRow:
    ckpt = train(config, corpus, label=variant_label(config))
    model = ckpt.to_model()
    eval_mse = sample_mse(model, corpus[0], nfe, seed=config.seed)
    long_mse, status = None, "ok"
    try:
        long_mse = sample_mse(model, long_utt, nfe, seed=config.seed)
    except ExtentError as e:
        logger.info(f"{config.embedding.value} on an unseen length: {e}")
        status = "extent error"
    loss = _final_loss(model, corpus, config)
    row = AblationRow(kind=config.embedding, overlap=config.overlap, patch_size=config.patch_size,
                      params=model.num_parameters(), train_loss=loss, eval_mse=eval_mse,
                      long_mse=long_mse, long_status=status)
    logger.info(f"Ablation variant done: {row.model_dump()}")
    return row


def _final_loss(model: DexTTS, corpus: ToyCorpus, config: ModelConfig) -> float:
    """Total loss of the trained model on the whole corpus with fixed noise."""
    with no_grad():
        _, components = total_loss(corpus.utterances, model, np.random.default_rng([config.seed, 2]),
                                   update_codebook=False)
    return components.total


def run_embedding_ablation(base: ModelConfig, corpus: ToyCorpus, kinds: Sequence[EmbeddingKind],
                           steps: int, patch_sizes: Optional[Sequence[int]] = None, overlap_both: bool = False,
                           nfe: int = 10, threads: Optional[int] = None) -> List[AblationRow]:
    """
    Train and evaluate one model per embedding variant.

    Each variant trains for about `steps` optimizer steps with its time
    extent fixed to the corpus' longest utterance, then is evaluated on a
    training utterance and on an unseen utterance one time patch longer than
    anything seen in training. Variants run on up to `threads` workers
    (default DEX_THREADS); row order follows variant order.
    """
    patch_sizes = list(patch_sizes or [base.patch_size])
    batches_per_epoch = math.ceil(len(corpus) / base.batch_size)
    epochs = max(1, math.ceil(steps / batches_per_epoch))
    variants = []
    for cfg in ablation_variants(base, kinds, patch_sizes, overlap_both):
        extent = trained_time_patches(corpus, cfg.patch_size)
        variants.append(cfg.model_copy(update={"epochs": epochs, "save_every": 0, "max_time_patches": extent}))

    jobs = []
    for cfg in variants:
        long_frames = (cfg.max_time_patches + 1) * DOWN_FACTOR * cfg.patch_size
        long_corpus = synth_corpus(cfg.seed + 1000, 1, corpus.vocab, corpus.n_mels, (long_frames, long_frames),
                                   stats=(corpus.mel_mean, corpus.mel_std), prefix="long")
        jobs.append((cfg, long_corpus[0]))

    workers = max(1, min(threads or get_settings().threads, len(jobs)))
    logger.info(f"Running {len(jobs)} ablation variants for {epochs} epochs each on {workers} threads")
    if workers == 1:
        return [_run_variant(cfg, corpus, long_utt, nfe) for cfg, long_utt in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_variant, cfg, corpus, long_utt, nfe) for cfg, long_utt in jobs]
        return [f.result() for f in futures]


def write_ablation_csv(path: Union[str, Path], rows: Sequence[AblationRow]) -> Path:
    return write_csv(path, ABLATION_COLUMNS, [row.model_dump(mode="json") for row in rows])
