"""
Model assembly, the four-term training loss and end-to-end synthesis.
"""
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from dextts.corpus import Utterance
from dextts.errors import NumericError, UsageError
from dextts.layers.aligner import Aligner
from dextts.layers.decoder import Decoder, diffusion_loss, sample_euler
from dextts.layers.styles import StyleBundle, StyleEncoder
from dextts.layers.textenc import TextEncoder
from dextts.models import AlignmentPath, LossComponents, MelSpec, ModelConfig, PhonemeSeq
from dextts.numerics import ParamStore, Tensor, no_grad

logger = logging.getLogger(__name__)

LOSS_NAMES = ("dur", "prior", "diff", "vq")


class DexTTS:
    """
    The acoustic model: style encoders (reference-conditioned mode only),
    text encoder, aligner and diffusion decoder over one ParamStore.

    Parameters are initialized from `config.seed`; construction order fixes
    the parameter order in the store.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.store = ParamStore()
        rng = np.random.default_rng([config.seed, 0])
        self.style = None if config.reference_free else StyleEncoder(self.store, "style", config, rng)
        self.text = TextEncoder(self.store, "text", config.text, config.style_dim, rng)
        self.aligner = Aligner(self.store, "aligner", config, rng)
        self.decoder = Decoder(self.store, "decoder", config, rng)
        logger.info(f"Built {config.mode.value} model with {self.num_parameters()} trainable parameters")

    @property
    def reference_free(self) -> bool:
        return self.config.reference_free

    def num_parameters(self) -> int:
        return self.store.num_parameters()

    def encode_styles(self, ref: Optional[Union[MelSpec, np.ndarray]], log_f0: Optional[np.ndarray] = None,
                      update_codebook: bool = False) -> Optional[StyleBundle]:
        """StyleBundle of a reference, or None for the reference-free model."""
        if self.style is None or ref is None:
            return None
        return self.style(ref, log_f0, update_codebook)

    def utterance_losses(self, utt: Utterance, rng: np.random.Generator,
                         update_codebook: bool = True) -> Dict[str, Tensor]:
        """
        The four loss components of one utterance, conditioned on its own reference.

        Raises:
            NumericError: Naming the component that became non-finite
        """
        losses: Dict[str, Tensor] = {}
        with _component("vq"):
            styles = self.encode_styles(utt.mel, utt.log_f0, update_codebook)
            losses["vq"] = styles.vq_loss if styles is not None and styles.vq_loss is not None else Tensor(0.0)
        with _component("prior"):
            h_text = self.text(utt.phonemes, styles.h_e_v if styles is not None else None)
            aligned = self.aligner.forward_train(h_text, utt.mel)
            losses["prior"] = aligned.prior_loss
        with _component("dur"):
            losses["dur"] = aligned.dur_loss
        with _component("diff"):
            draws = [diffusion_loss(self.decoder, utt.mel.values, aligned.h_mel, self.config.schedule, rng, styles)
                     for _ in range(self.config.diffusion_draws)]
            losses["diff"] = draws[0]
            for draw in draws[1:]:
                losses["diff"] = losses["diff"] + draw
            if len(draws) > 1:
                losses["diff"] = losses["diff"] * (1.0 / len(draws))
        for name, value in losses.items():
            if not np.isfinite(value.data).all():
                raise NumericError(f"Loss component {name} is not finite", where=name)
        return losses


@contextmanager
def _component(name: str):
    """Re-raise NumericError tagged with the loss component it occurred in."""
    try:
        yield
    except NumericError as e:
        if e.where in LOSS_NAMES:
            raise
        raise NumericError(f"{e} (in loss component {name})", where=name) from e


def total_loss(batch: Sequence[Utterance], model: DexTTS, rng: np.random.Generator,
               update_codebook: bool = True) -> Tuple[Tensor, LossComponents]:
    """
    Mean over the batch of L_dur + L_prior + L_diff + β·L_vq.

    Returns:
        (differentiable total, component values averaged over the batch)
    """
    if not batch:
        raise UsageError("Empty batch")
    beta = model.config.commitment_weight
    sums = {name: 0.0 for name in LOSS_NAMES}
    total: Optional[Tensor] = None
    for utt in batch:
        parts = model.utterance_losses(utt, rng, update_codebook)
        utt_total = parts["dur"] + parts["prior"] + parts["diff"] + parts["vq"] * beta
        total = utt_total if total is None else total + utt_total
        for name in LOSS_NAMES:
            sums[name] += parts[name].item()
    n = len(batch)
    total = total * (1.0 / n)
    components = LossComponents(
        dur=sums["dur"] / n,
        prior=sums["prior"] / n,
        diff=sums["diff"] / n,
        vq=sums["vq"] / n,
        total=total.item(),
    )
    return total, components


def synthesize(model: DexTTS, phonemes: Union[PhonemeSeq, Sequence[int]],
               ref: Optional[Union[MelSpec, np.ndarray]] = None, log_f0: Optional[np.ndarray] = None,
               nfe: Optional[int] = None, seed: int = 0, durations: Optional[Sequence[int]] = None,
               ignore_reference: bool = False, trace_path: Optional[Union[str, Path]] = None,
               progress: bool = False) -> Tuple[MelSpec, AlignmentPath]:
    """
    Text (and reference) to a mel-spectrogram.

    Args:
        model: Trained or freshly built model
        phonemes: Token ids
        ref: Reference mel (required in dex mode, forbidden in gedex mode)
        log_f0: Reference log-F0 track (zeros when omitted)
        nfe: Sampler steps (config default when None)
        seed: Seed of the sampler noise
        durations: Frame counts overriding the predicted durations
        ignore_reference: Drop `ref` instead of rejecting it in gedex mode
        trace_path: Optional sampler trace CSV
        progress: Show a progress bar

    Returns:
        (mel with Σ durations frames, the durations used)

    Raises:
        UsageError: On a mode/reference mismatch
    """
    if not isinstance(phonemes, PhonemeSeq):
        phonemes = PhonemeSeq(ids=list(phonemes))
    if model.reference_free:
        if ref is not None and not ignore_reference:
            raise UsageError("Reference-free model does not accept a reference")
        ref = None
    elif ref is None:
        raise UsageError("Reference-conditioned model needs a reference mel")

    cfg = model.config
    with no_grad():
        styles = model.encode_styles(ref, log_f0)
        h_text = model.text(phonemes, styles.h_e_v if styles is not None else None)
        h_mel, path = model.aligner.infer(h_text, durations)
        values = sample_euler(model.decoder, h_mel, cfg.schedule, cfg.nfe if nfe is None else nfe,
                              np.random.default_rng(seed),
                              styles=styles, prior_mean=cfg.prior_mean, trace_path=trace_path, progress=progress)
    logger.info(f"Synthesized {path.total} frames for {len(phonemes)} tokens")
    return MelSpec(values=values, sample_rate=cfg.sample_rate, hop_length=cfg.hop_length), path


def batches(utterances: List[Utterance], batch_size: int, rng: np.random.Generator) -> List[List[Utterance]]:
    """Shuffle and split into consecutive batches (the last may be smaller)."""
    order = rng.permutation(len(utterances))
    return [[utterances[i] for i in order[k:k + batch_size]] for k in range(0, len(order), batch_size)]


def align_corpus(model: DexTTS, utterances: Sequence[Utterance]) -> List[Tuple[str, AlignmentPath]]:
    """MAS alignment of every utterance under the current parameters."""
    out = []
    with no_grad():
        for utt in utterances:
            styles = model.encode_styles(utt.mel, utt.log_f0)
            h_text = model.text(utt.phonemes, styles.h_e_v if styles is not None else None)
            out.append((utt.name, model.aligner.forward_train(h_text, utt.mel).path))
    return out
