"""
Training loop: Adam, global gradient clipping, per-epoch loss CSV and
periodic checkpoints. Initialization, data order and noise draws are all
seeded from the config, so a (config, corpus) pair fixes the trajectory.
"""
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from dextts.checkpoint import Checkpoint
from dextts.corpus import ToyCorpus
from dextts.errors import InputError, TrainingDivergedError
from dextts.logger import active_run
from dextts.models import LossComponents, ModelConfig, NoiseSchedule
from dextts.numerics import Tensor
from dextts.pipeline import DexTTS, batches, total_loss
from dextts.utils import write_csv

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ["epoch", "L_dur", "L_prior", "L_diff", "L_vq", "total"]


class Adam:
    """First-order adaptive-moment optimizer over named leaf tensors."""

    def __init__(self, params: List[Tuple[str, Tensor]], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}
        self.t = 0

    def step(self):
        self.t += 1
        for name, p in self.params:
            if p.grad is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * p.grad
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * (p.grad ** 2)
            m_hat = self.m[name] / (1 - self.beta1 ** self.t)
            v_hat = self.v[name] / (1 - self.beta2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def state_dict(self) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray], int]:
        return ({k: v.copy() for k, v in self.m.items()}, {k: v.copy() for k, v in self.v.items()}, self.t)

    def load_state_dict(self, m: Dict[str, np.ndarray], v: Dict[str, np.ndarray], t: int):
        for name in self.m:
            if name in m:
                self.m[name] = np.array(m[name], dtype=np.float64)
                self.v[name] = np.array(v[name], dtype=np.float64)
        self.t = t


def clip_gradients(params: List[Tuple[str, Tensor]], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm; returns the norm before clipping."""
    norm = math.sqrt(sum(float((p.grad ** 2).sum()) for _, p in params if p.grad is not None))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for _, p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def _mean_components(rows: List[LossComponents]) -> Dict[str, float]:
    keys = rows[0].as_row().keys()
    return {k: float(np.mean([r.as_row()[k] for r in rows])) for k in keys}


def estimate_schedule(config: ModelConfig, corpus: ToyCorpus) -> ModelConfig:
    """
    Fit the noise schedule to the corpus: sigma_data becomes the pooled std
    of all mel values and sigma_max is scaled by it. A schedule that was
    already fitted (estimate_sigma_data off) is returned unchanged.

    Raises:
        InputError: If the corpus mels have zero variance
    """
    schedule = config.schedule
    if not schedule.estimate_sigma_data:
        return config
    std = float(np.concatenate([u.mel.values.reshape(-1) for u in corpus]).std())
    if not std > 0:
        raise InputError("Corpus mels have zero variance, cannot estimate sigma_data")
    fitted = NoiseSchedule(**{**schedule.model_dump(), "sigma_data": std,
                              "sigma_max": schedule.sigma_max * std, "estimate_sigma_data": False})
    logger.info(f"Estimated sigma_data={std:.6g} from {len(corpus)} utterances, sigma_max={fitted.sigma_max:.6g}")
    return config.model_copy(update={"schedule": fitted})


def train(config: ModelConfig, corpus: ToyCorpus, out_dir: Optional[Union[str, Path]] = None,
          loss_csv: Optional[Union[str, Path]] = None, progress: bool = False,
          resume: Optional[Checkpoint] = None, label: Optional[str] = None) -> Checkpoint:
    """
    Train a model from scratch, or continue a checkpoint.

    Args:
        config: Model and training hyperparameters. With `resume` only its
            `epochs` is used; everything else comes from the checkpoint
        corpus: Training utterances
        out_dir: Where periodic checkpoints go (every `save_every` epochs)
        loss_csv: Per-epoch loss table (epoch, L_dur, L_prior, L_diff, L_vq, total)
        progress: Show an epoch progress bar
        resume: Checkpoint whose parameters, optimizer moments, generator
            state, epoch and step training continues from
        label: Tags this run's epochs in the active run log

    Returns:
        The checkpoint after the last epoch

    Raises:
        InputError: If the corpus is empty, its bin count differs from the
            config, or the checkpoint is already past `config.epochs`
        TrainingDivergedError: If a batch loss exceeds `max_loss`
    """
    if len(corpus) == 0:
        raise InputError("Cannot train on an empty corpus")
    if resume is not None:
        if resume.epoch > config.epochs:
            raise InputError(f"Checkpoint is at epoch {resume.epoch}, past the requested {config.epochs}")
        config = resume.config.model_copy(update={"epochs": config.epochs})
    if corpus.n_mels != config.n_mels:
        raise InputError(f"Corpus has {corpus.n_mels} mel bins, config expects {config.n_mels}")
    if max(max(u.phonemes.ids) for u in corpus) >= config.text.vocab:
        raise InputError(f"Corpus token ids exceed the configured vocabulary of {config.text.vocab}")

    if resume is None:
        config = estimate_schedule(config, corpus)
        model = DexTTS(config)
        rng = np.random.default_rng([config.seed, 1])
        optimizer = Adam(model.store.parameters(), lr=config.lr)
        first_epoch, step = 1, 0
    else:
        model = DexTTS(config)
        model.store.load_state_dict(resume.params)
        rng = resume.restore_rng() or np.random.default_rng([config.seed, 1])
        optimizer = Adam(model.store.parameters(), lr=resume.lr or config.lr)
        optimizer.load_state_dict(resume.adam_m, resume.adam_v, resume.adam_step)
        first_epoch, step = resume.epoch + 1, resume.step
        logger.info(f"Resuming from epoch {resume.epoch}, step {step}")
    params = model.store.parameters()
    run_log = active_run()
    history: List[Dict[str, float]] = []

    logger.info(f"Training {model.num_parameters()} parameters on {len(corpus)} utterances "
                f"for epochs {first_epoch}..{config.epochs}")
    for epoch in tqdm(range(first_epoch, config.epochs + 1), desc=label or "training", disable=not progress):
        epoch_rows: List[LossComponents] = []
        for batch in batches(corpus.utterances, config.batch_size, rng):
            optimizer.zero_grad()
            loss, components = total_loss(batch, model, rng)
            if not components.total <= config.max_loss:
                raise TrainingDivergedError(
                    f"Loss {components.total:.6g} exceeded {config.max_loss:g} at epoch {epoch}, step {step}")
            loss.backward()
            clip_gradients(params, config.grad_clip)
            optimizer.step()
            step += 1
            epoch_rows.append(components)
            logger.debug(f"step {step}: {components.as_row()}")

        means = _mean_components(epoch_rows)
        history.append({"epoch": epoch, **means})
        if run_log:
            run_log.log_epoch(epoch, means, step, label=label)
        logger.info(f"Epoch {epoch}: total={means['total']:.6g} prior={means['L_prior']:.6g}")

        if out_dir is not None and config.save_every and epoch % config.save_every == 0:
            path = Checkpoint.from_model(model, epoch, step, optimizer, rng).save(
                Path(out_dir) / f"ckpt_epoch{epoch:04d}.dext")
            if run_log:
                run_log.log_checkpoint(str(path), epoch)

    if loss_csv is not None:
        write_csv(loss_csv, LOSS_COLUMNS, history)
    if model.style is not None and model.style.tv is not None:
        codebook = model.style.tv.codebook
        logger.info(f"Codebook: {codebook.used_codes()}/{codebook.size} codes used, "
                    f"perplexity {codebook.perplexity():.2f}")
    return Checkpoint.from_model(model, config.epochs, step, optimizer, rng)
