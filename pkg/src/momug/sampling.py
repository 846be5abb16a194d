"""Dual-mode inference: guided iterative denoising for text-to-motion,
autoregressive decoding for motion-to-text, and replacement inpainting for
partial-motion editing."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from . import corpus as corpus_mod
from .corpus import (Caption, CorpusStats, MotionSequence, Vocabulary,
                     denormalize_frames, tokenize)
from .model import (KIND_MOTION, KIND_TEXT, KIND_TIME, MODE_M2T, MODE_T2M,
                    MixedSequence, MotionTextTransformer, collate_sequences)
from .rng import derive_seed


class SamplingError(ValueError):
    pass


@dataclass
class SampleConfig:
    cfg_scale: float = 2.5
    motion_length: int | None = None
    max_text_len: int = 16
    decode: str = "greedy"      # greedy | temperature | topk
    temperature: float = 1.0
    top_k: int = 5
    guidance: str = "cfg"       # cfg | conditional | unconditional
    seed: int = 0

    def __post_init__(self):
        if self.cfg_scale < 0:
            raise SamplingError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if self.decode not in ("greedy", "temperature", "topk"):
            raise SamplingError(f"unknown decode mode {self.decode!r}")
        if self.guidance not in ("cfg", "conditional", "unconditional"):
            raise SamplingError(f"unknown guidance mode {self.guidance!r}")


def _motion_query_sequence(vocab: Vocabulary, cond_ids, n_frames: int,
                           frames: np.ndarray, t: int) -> MixedSequence:
    """Text-to-motion layout holding an already-noisy x_t payload."""
    prefix = [vocab.bos_id] + tokenize(corpus_mod.T2M_PROMPT, vocab) + list(cond_ids)
    ids = prefix + [vocab.som_id, vocab.pad_id] + [vocab.pad_id] * n_frames + [vocab.eom_id]
    kinds = ([KIND_TEXT] * (len(prefix) + 1) + [KIND_TIME]
             + [KIND_MOTION] * n_frames + [KIND_TEXT])
    L = len(ids)
    return MixedSequence(
        kinds=np.asarray(kinds), token_ids=np.asarray(ids, dtype=np.int64), t=t,
        frames=frames, mode=MODE_T2M,
        lm_mask=np.zeros(L, dtype=bool), lm_targets=np.zeros(L, dtype=np.int64),
        motion_mask=np.asarray(kinds) == KIND_MOTION,
        ddpm_present=False, frames_are_noisy=True)


def _predict_x0(model: MotionTextTransformer, noise_schedule, vocab: Vocabulary,
                cond_ids_list, x_t: np.ndarray, t: int) -> np.ndarray:
    """Clean-motion predictions for each condition, shape (n_cond, N, d)."""
    n = x_t.shape[0]
    seqs = [_motion_query_sequence(vocab, ids, n, x_t, t) for ids in cond_ids_list]
    batch = collate_sequences(seqs, None, model.config.d_motion)
    with torch.no_grad():
        hidden = model.embed_batch(batch, noise_schedule)
        out = model.forward_hidden(hidden)
        preds = model.motion_preds(out, batch.motion_mask)
    return preds.to(torch.float64).cpu().numpy().reshape(len(seqs), n, -1)


def _guided_x0(model, noise_schedule, vocab, caption_ids, x_t, t,
               cfg: SampleConfig) -> np.ndarray:
    """Combine conditional/unconditional predictions per the guidance mode.

    The combination is computed as (1 - s) * uncond + s * cond, which is
    algebraically the usual uncond + s * (cond - uncond) but reduces exactly
    to the conditional prediction at s = 1 and the unconditional one at s = 0.
    """
    nul = [vocab.nul_id]
    if cfg.guidance == "conditional":
        return _predict_x0(model, noise_schedule, vocab, [caption_ids], x_t, t)[0]
    if cfg.guidance == "unconditional":
        return _predict_x0(model, noise_schedule, vocab, [nul], x_t, t)[0]
    preds = _predict_x0(model, noise_schedule, vocab, [caption_ids, nul], x_t, t)
    s = cfg.cfg_scale
    return (1.0 - s) * preds[1] + s * preds[0]


def draw_motion_length(stats: CorpusStats, rng: np.random.Generator) -> int:
    lengths = sorted(stats.length_histogram)
    counts = np.array([stats.length_histogram[k] for k in lengths], dtype=np.float64)
    return int(rng.choice(lengths, p=counts / counts.sum()))


def sample_motion(caption_text: str, model: MotionTextTransformer, noise_schedule,
                  stats: CorpusStats, vocab: Vocabulary,
                  cfg: SampleConfig) -> MotionSequence:
    """Generate a motion for a caption by iterative denoising.

    Starts from Gaussian noise at the final timestep and walks the reverse
    posterior with the guided clean-sample prediction; returns the clip
    denormalized back to corpus units.
    """
    model.eval()
    caption_ids = tokenize(caption_text, vocab)
    rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, "chain")))
    if cfg.motion_length is not None:
        n = int(cfg.motion_length)
    else:
        n = draw_motion_length(stats, np.random.Generator(
            np.random.PCG64(derive_seed(cfg.seed, "length"))))
    if n < 1:
        raise SamplingError(f"motion length must be >= 1, got {n}")
    x = rng.standard_normal((n, model.config.d_motion))
    for t in range(noise_schedule.T, 0, -1):
        x0_hat = _guided_x0(model, noise_schedule, vocab, caption_ids, x, t, cfg)
        z = rng.standard_normal(x.shape) if t > 1 else np.zeros_like(x)
        x = noise_schedule.posterior_sample(x, x0_hat, t, z)
    return MotionSequence(denormalize_frames(x, stats))


# ---------------------------------------------------------------------------
# Motion-to-text decoding
# ---------------------------------------------------------------------------


def _caption_query_sequence(vocab: Vocabulary, frames: np.ndarray,
                            generated_ids) -> MixedSequence:
    prefix = [vocab.bos_id] + tokenize(corpus_mod.M2T_PROMPT, vocab)
    n = frames.shape[0]
    ids = (prefix + [vocab.som_id, vocab.pad_id] + [vocab.pad_id] * n
           + [vocab.eom_id] + list(generated_ids))
    kinds = ([KIND_TEXT] * (len(prefix) + 1) + [KIND_TIME]
             + [KIND_MOTION] * n + [KIND_TEXT] * (1 + len(generated_ids)))
    L = len(ids)
    return MixedSequence(
        kinds=np.asarray(kinds), token_ids=np.asarray(ids, dtype=np.int64), t=0,
        frames=frames, mode=MODE_M2T,
        lm_mask=np.zeros(L, dtype=bool), lm_targets=np.zeros(L, dtype=np.int64),
        motion_mask=np.asarray(kinds) == KIND_MOTION, ddpm_present=False)


def _decode_next(logits: np.ndarray, cfg: SampleConfig,
                 rng: np.random.Generator) -> int:
    if cfg.decode == "greedy":
        return int(np.argmax(logits))
    if cfg.decode == "topk":
        k = min(cfg.top_k, np.isfinite(logits).sum())
        keep = np.argpartition(logits, -k)[-k:]
        restricted = np.full_like(logits, -np.inf)
        restricted[keep] = logits[keep]
        logits = restricted
    scaled = logits / max(cfg.temperature, 1e-12)
    scaled = scaled - scaled.max()
    probs = np.exp(scaled)
    probs = probs / probs.sum()
    return int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))


def sample_text(motion_frames: np.ndarray, model: MotionTextTransformer,
                noise_schedule, vocab: Vocabulary,
                cfg: SampleConfig) -> tuple:
    """Decode a caption for a normalized motion clip.

    Returns (Caption, truncated); truncated is set when the length budget
    ran out before a stop token.  Structural ids (pad/bos/nul/eom) are
    masked out of the decode distribution; <eos> or <som> stop it.
    """
    model.eval()
    frames = np.asarray(motion_frames, dtype=np.float64)
    rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, "decode")))
    blocked = [vocab.pad_id, vocab.bos_id, vocab.nul_id, vocab.eom_id]
    generated = []
    truncated = True
    for _ in range(cfg.max_text_len):
        seq = _caption_query_sequence(vocab, frames, generated)
        batch = collate_sequences([seq], None, model.config.d_motion)
        with torch.no_grad():
            out = model.forward_hidden(model.embed_batch(batch, noise_schedule))
            logits = model.lm_head(out[0, len(seq) - 1])
        logits = logits.to(torch.float64).cpu().numpy()
        logits[blocked] = -np.inf
        token = _decode_next(logits, cfg, rng)
        if token in (vocab.eos_id, vocab.som_id):
            truncated = False
            break
        generated.append(token)
    text = corpus_mod.detokenize(generated, vocab)
    return Caption(text=text, token_ids=generated), truncated


# ---------------------------------------------------------------------------
# Inpainting (motion editing)
# ---------------------------------------------------------------------------


def parse_mask_spec(spec: str, n_frames: int) -> np.ndarray:
    """Known-frame mask from a textual spec: prefix:K, suffix:K or frames:a-b."""
    mask = np.zeros(n_frames, dtype=bool)
    try:
        kind, _, arg = spec.partition(":")
        if kind == "prefix":
            k = int(arg)
            if not 0 <= k <= n_frames:
                raise ValueError
            mask[:k] = True
        elif kind == "suffix":
            k = int(arg)
            if not 0 <= k <= n_frames:
                raise ValueError
            mask[n_frames - k:] = True
        elif kind == "frames":
            a, b = arg.split("-")
            a, b = int(a), int(b)
            if not 0 <= a <= b < n_frames:
                raise ValueError
            mask[a:b + 1] = True
        else:
            raise ValueError
    except ValueError:
        raise SamplingError(
            f"bad mask spec {spec!r} for {n_frames} frames "
            "(expected prefix:K, suffix:K or frames:a-b)")
    return mask


def inpaint_motion(partial_frames: np.ndarray, known_mask: np.ndarray,
                   caption_text, model: MotionTextTransformer, noise_schedule,
                   stats: CorpusStats, vocab: Vocabulary,
                   cfg: SampleConfig) -> MotionSequence:
    """Regenerate the unknown frames of a normalized clip, keeping the known
    ones clamped to their re-noised values at every reverse step.

    With no known frames this reduces exactly to sample_motion under the
    same seed (the clamp noise stream is separate and left untouched).
    """
    model.eval()
    x0_known = np.asarray(partial_frames, dtype=np.float64)
    known = np.asarray(known_mask, dtype=bool)
    if known.shape != (x0_known.shape[0],):
        raise SamplingError("known mask must have one entry per frame")
    if caption_text is None:
        cond_ids = [vocab.nul_id]
        cfg = dataclasses.replace(cfg, guidance="conditional")
    else:
        cond_ids = tokenize(caption_text, vocab)
    rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, "chain")))
    rng_clamp = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, "inpaint")))
    x = rng.standard_normal(x0_known.shape)
    any_known = bool(known.any())
    for t in range(noise_schedule.T, 0, -1):
        x0_hat = _guided_x0(model, noise_schedule, vocab, cond_ids, x, t, cfg)
        z = rng.standard_normal(x.shape) if t > 1 else np.zeros_like(x)
        x = noise_schedule.posterior_sample(x, x0_hat, t, z)
        if any_known:
            if t - 1 >= 1:
                renoised = noise_schedule.q_sample(
                    x0_known, t - 1, rng_clamp.standard_normal(x0_known.shape))
            else:
                renoised = x0_known
            x[known] = renoised[known]
    return MotionSequence(denormalize_frames(x, stats))
