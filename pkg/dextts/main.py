"""
Command-line interface for dextts

Commands: corpus, train, synth, sweep, ablate, info.
Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
"""
import functools
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import click
from pydantic import ValidationError

from dextts.checkpoint import Checkpoint
from dextts.corpus import ToyCorpus, synth_corpus
from dextts.errors import DexError, InputError, NumericError, TrainingDivergedError
from dextts.layers.aligner import write_alignment_csv
from dextts.logger import run_logger
from dextts.models import EmbeddingKind, MelSpec, load_config
from dextts.pipeline import DexTTS, align_corpus, synthesize
from dextts.settings import get_settings
from dextts.sweep import run_embedding_ablation, run_nfe_sweep, write_ablation_csv, write_report_csv
from dextts.trainer import train
from dextts.utils import (
    file_sha256,
    parse_int_list,
    parse_str_list,
    read_matrix_csv,
    read_vector_csv,
    save_mel_image,
    write_matrix_csv,
)

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_NUMERIC = 3


def cli_errors(fn):
    """Map library exceptions to exit codes with a one-line message."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (NumericError, TrainingDivergedError) as e:
            logger.error(f"Numeric failure: {e}")
            click.echo(f"Error: {e}", err=True)
            sys.exit(EXIT_NUMERIC)
        except (DexError, ValidationError, FileExistsError) as e:
            logger.error(f"{type(e).__name__}: {e}")
            click.echo(f"Error: {e}", err=True)
            sys.exit(EXIT_USAGE)

    return wrapper


def _check_writable(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists (use --force to overwrite)")


@click.group()
@click.version_option(package_name="dextts")
def cli():
    """Expressive diffusion acoustic model: corpus, training, synthesis and evaluation."""
    settings = get_settings()
    logging.basicConfig(
        level=getattr(logging, settings.log_level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


@cli.command()
@click.option("--seed", type=int, default=0, show_default=True, help="Corpus seed")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="Corpus file to write")
@click.option("--n", "n_utts", type=int, default=8, show_default=True, help="Number of utterances")
@click.option("--bins", type=int, default=16, show_default=True, help="Mel bins")
@click.option("--vocab", type=int, default=12, show_default=True, help="Token vocabulary size")
@click.option("--min-frames", type=int, default=24, show_default=True)
@click.option("--max-frames", type=int, default=48, show_default=True)
@click.option("--force", is_flag=True, help="Overwrite an existing file")
@cli_errors
def corpus(seed, out, n_utts, bins, vocab, min_frames, max_frames, force):
    """Generate the seeded toy corpus."""
    _check_writable(out, force)
    with run_logger(f"corpus --seed {seed} --n {n_utts}"):
        data = synth_corpus(seed, n_utts, vocab, bins, (min_frames, max_frames))
        data.save(out)
    click.echo(f"{out} sha256={file_sha256(out)}")


@cli.command(name="train")
@click.option("--config", "config_src", default="toy", show_default=True, help="Profile name or TOML file")
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="Final checkpoint path")
@click.option("--seed", type=int, default=None, help="Override the config seed")
@click.option("--epochs", type=int, default=None, help="Override the epoch count")
@click.option("--loss-csv", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Loss table (default: <out>.losses.csv)")
@click.option("--alignments", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Write the final MAS durations per utterance")
@click.option("--resume", "resume_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="Continue this checkpoint (its config is used; only --epochs may change)")
@click.option("--progress", is_flag=True, help="Show a progress bar")
@cli_errors
def train_cmd(config_src, corpus_path, out, seed, epochs, loss_csv, alignments, progress, resume_path):
    """Train a model on a corpus file."""
    resume = None
    if resume_path is not None:
        if seed is not None:
            raise InputError("--seed cannot change a resumed run")
        resume = Checkpoint.load(resume_path)
        config = resume.config.model_copy(update={"epochs": epochs if epochs is not None else resume.config.epochs})
        config_src = str(resume_path)
    else:
        overrides = {k: v for k, v in {"seed": seed, "epochs": epochs}.items() if v is not None}
        config = load_config(config_src, **overrides)
    click.echo(json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True))
    data = ToyCorpus.load(corpus_path)
    loss_csv = loss_csv or out.with_suffix(".losses.csv")
    with run_logger(f"train --config {config_src} --corpus {corpus_path}") as run:
        if run:
            run.log_config(config.model_dump(mode="json"))
        ckpt = train(config, data, out_dir=out.parent, loss_csv=loss_csv, progress=progress, resume=resume)
        ckpt.save(out)
        if run:
            run.log_checkpoint(str(out), ckpt.epoch)
        if alignments is not None:
            write_alignment_csv(alignments, align_corpus(ckpt.to_model(), data.utterances))
    click.echo(f"Wrote {out} and {loss_csv}")


@cli.command()
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--text-ids", required=True, help="Comma-separated token ids")
@click.option("--ref", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="Reference mel CSV (rows = mel bins)")
@click.option("--ref-f0", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="Reference log-F0 CSV (one value per frame)")
@click.option("--nfe", type=click.IntRange(min=1), default=None, help="Sampler steps (config default)")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--durations", default=None, help="Comma-separated frame counts overriding the predictor")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="Output mel CSV")
@click.option("--plot", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Grayscale mel image (.png or .pgm)")
@click.option("--trace", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Sampler trace CSV")
@cli_errors
def synth(ckpt, text_ids, ref, ref_f0, nfe, seed, durations, out, plot, trace):
    """Synthesize a mel-spectrogram from token ids (and a reference)."""
    with run_logger(f"synth --ckpt {ckpt} --text-ids {text_ids}") as run:
        model = Checkpoint.load(ckpt).to_model()
        ids = parse_int_list(text_ids, "text ids")
        ref_mel: Optional[MelSpec] = None
        log_f0 = None
        if ref is not None:
            if model.reference_free:
                logger.warning("Reference-free checkpoint: ignoring --ref")
                click.echo("Warning: reference-free checkpoint, --ref ignored", err=True)
            else:
                values = read_matrix_csv(ref)
                if values.shape[0] != model.config.n_mels:
                    raise InputError(f"Reference has {values.shape[0]} bins, model expects {model.config.n_mels}")
                ref_mel = MelSpec(values=values, sample_rate=model.config.sample_rate,
                                  hop_length=model.config.hop_length)
                log_f0 = read_vector_csv(ref_f0) if ref_f0 is not None else None
        start = time.perf_counter()
        mel, path = synthesize(model, ids, ref=ref_mel, log_f0=log_f0, nfe=nfe, seed=seed,
                               durations=parse_int_list(durations, "durations") if durations else None,
                               ignore_reference=True, trace_path=trace)
        seconds = time.perf_counter() - start
        write_matrix_csv(out, mel.values)
        if plot is not None:
            save_mel_image(plot, mel.values)
        if run:
            run.log_sample(nfe or model.config.nfe, mel.frames, seconds, str(out))
    click.echo(f"Wrote {out} ({mel.n_mels}×{mel.frames}, durations {path.durations})")


@cli.command()
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--nfe-list", default="10,25,50", show_default=True)
@click.option("--repeat", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=Path("sweep.csv"), show_default=True)
@cli_errors
def sweep(ckpt, corpus_path, nfe_list, repeat, seed, out):
    """Time synthesis over several NFE values (RTF report)."""
    with run_logger(f"sweep --ckpt {ckpt} --nfe-list {nfe_list}") as run:
        model = Checkpoint.load(ckpt).to_model()
        data = ToyCorpus.load(corpus_path)
        report = run_nfe_sweep(model, data, parse_int_list(nfe_list, "nfe list"), repeat, seed)
        write_report_csv(out, report)
        if run:
            for row in report.rows:
                run.log_sample(row.nfe, row.frames, row.seconds)
    for nfe in sorted({r.nfe for r in report.rows}):
        click.echo(f"nfe={nfe}: mean rtf {report.mean_rtf(nfe):.4f}")
    click.echo(f"Wrote {out}")


@cli.command()
@click.option("--config", "config_src", default="toy", show_default=True, help="Profile name or TOML file")
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--kinds", default=",".join(k.value for k in EmbeddingKind), show_default=True)
@click.option("--steps", type=click.IntRange(min=1), default=300, show_default=True)
@click.option("--patch-sizes", default=None, help="Comma-separated patch sizes (config default)")
@click.option("--overlap-both", is_flag=True, help="Also run conv-freq with non-overlapping patches")
@click.option("--nfe", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=Path("ablation.csv"),
              show_default=True)
@cli_errors
def ablate(config_src, corpus_path, kinds, steps, patch_sizes, overlap_both, nfe, out):
    """Compare patch-embedding kinds (and patch sizes / overlap) on the toy corpus."""
    config = load_config(config_src)
    try:
        kind_list = [EmbeddingKind(k) for k in parse_str_list(kinds)]
    except ValueError as e:
        raise InputError(f"Unknown embedding kind in '{kinds}'") from e
    sizes = parse_int_list(patch_sizes, "patch sizes") if patch_sizes else None
    with run_logger(f"ablate --kinds {kinds} --steps {steps}") as run:
        if run:
            run.log_config(config.model_dump(mode="json"))
        rows = run_embedding_ablation(config, ToyCorpus.load(corpus_path), kind_list, steps, sizes,
                                      overlap_both, nfe)
        write_ablation_csv(out, rows)
    for row in rows:
        click.echo(f"{row.kind.value:>9} overlap={row.overlap} P={row.patch_size}: "
                   f"loss {row.train_loss:.4f}, long {row.long_status}")
    click.echo(f"Wrote {out}")


@cli.command()
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@click.option("--config", "config_src", default=None, help="Profile name or TOML file")
@cli_errors
def info(ckpt, config_src):
    """Print a config and its trainable parameter count."""
    if ckpt is not None:
        checkpoint = Checkpoint.load(ckpt)
        model, epoch = checkpoint.to_model(), checkpoint.epoch
    else:
        model, epoch = DexTTS(load_config(config_src or "toy")), 0
    click.echo(json.dumps(model.config.model_dump(mode="json"), indent=2, sort_keys=True))
    click.echo(f"mode={model.config.mode.value} epoch={epoch} parameters={model.num_parameters()}")


if __name__ == "__main__":
    cli()
