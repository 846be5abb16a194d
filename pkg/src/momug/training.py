"""Unified training loop: mode-mixed batching, the combined
cross-entropy/denoising objective, condition dropout for guidance, AdamW
over the trainable set only, and base-model pretraining on captions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import corpus as corpus_mod
from .corpus import Caption, MotionSequence, Vocabulary, tokenize
from .model import (
    KIND_MOTION, KIND_TEXT, KIND_TIME, MODE_M2T, MODE_T2M,
    Batch, MixedSequence, MotionTextTransformer, SequenceError,
    collate_sequences,
)
from .rng import derive_seed


class TrainingDivergedError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 1e-3
    warmup_frac: float = 0.10
    grad_clip: float = 1.0
    lambda_lm: float = 0.01
    cfg_drop_prob: float = 0.10
    ratio_t2m: int = 6
    ratio_m2t: int = 4
    lm_on_t2m: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lambda_lm <= 0:
            raise ConfigError(f"lambda_lm must be > 0, got {self.lambda_lm}")
        if not 0.0 <= self.cfg_drop_prob < 1.0:
            raise ConfigError(f"cfg_drop_prob must be in [0, 1), got {self.cfg_drop_prob}")
        if self.ratio_t2m <= 0 or self.ratio_m2t <= 0:
            raise ConfigError("task ratio components must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @property
    def p_t2m(self) -> float:
        return self.ratio_t2m / (self.ratio_t2m + self.ratio_m2t)


@dataclass
class StepReport:
    step: int
    mode_mix: float       # fraction of text-to-motion examples in the batch
    lm_loss: float
    ddpm_loss: float
    lm_weighted: float    # lambda * lm_loss as it entered the total
    total: float
    lr: float

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# ---------------------------------------------------------------------------
# Example construction
# ---------------------------------------------------------------------------


def build_example(caption: Caption, motion: MotionSequence, mode: str, t: int,
                  drop_condition: bool, vocab: Vocabulary,
                  lm_on_t2m: bool = True, max_seq_len: int | None = None,
                  ) -> MixedSequence:
    """Lay out one training sequence with its loss masks and targets.

    Text-to-motion: prompt and caption (or the single unconditional token
    when the condition is dropped), then <som>, the time slot, the motion
    span and <eom>; the motion span carries the denoising target and the
    text region is teacher-forced up to predicting <som>.

    Motion-to-text: prompt, then the clean motion span at t = 0, then the
    caption and <eos>; only the caption tokens and <eos> are predicted and
    the denoising loss is absent.
    """
    if mode == MODE_T2M:
        if not t >= 1:
            raise SequenceError(f"text-to-motion needs t >= 1, got {t}")
    elif mode == MODE_M2T:
        if t != 0:
            raise SequenceError(f"motion-to-text needs t = 0, got {t}")
        if drop_condition:
            raise SequenceError("condition dropout only applies to text-to-motion")
    else:
        raise SequenceError(f"unknown mode {mode!r}")

    n_frames = motion.n_frames
    pad = vocab.pad_id

    if mode == MODE_T2M:
        cond_ids = [vocab.nul_id] if drop_condition else list(caption.token_ids)
        prefix = [vocab.bos_id] + tokenize(corpus_mod.T2M_PROMPT, vocab) + cond_ids
        ids = prefix + [vocab.som_id, pad] + [pad] * n_frames + [vocab.eom_id]
        kinds = ([KIND_TEXT] * (len(prefix) + 1) + [KIND_TIME]
                 + [KIND_MOTION] * n_frames + [KIND_TEXT])
        L = len(ids)
        lm_mask = np.zeros(L, dtype=bool)
        lm_targets = np.zeros(L, dtype=np.int64)
        if lm_on_t2m:
            # position i predicts ids[i + 1], up to and including <som>
            for i in range(len(prefix)):
                lm_mask[i] = True
                lm_targets[i] = ids[i + 1]
        motion_mask = np.asarray(kinds) == KIND_MOTION
        seq = MixedSequence(
            kinds=np.asarray(kinds), token_ids=np.asarray(ids, dtype=np.int64),
            t=t, frames=motion.frames.copy(), mode=mode, lm_mask=lm_mask,
            lm_targets=lm_targets, motion_mask=motion_mask, ddpm_present=True)
    else:
        prefix = [vocab.bos_id] + tokenize(corpus_mod.M2T_PROMPT, vocab)
        cap_ids = list(caption.token_ids)
        ids = (prefix + [vocab.som_id, pad] + [pad] * n_frames
               + [vocab.eom_id] + cap_ids + [vocab.eos_id])
        kinds = ([KIND_TEXT] * (len(prefix) + 1) + [KIND_TIME]
                 + [KIND_MOTION] * n_frames
                 + [KIND_TEXT] * (len(cap_ids) + 2))
        L = len(ids)
        lm_mask = np.zeros(L, dtype=bool)
        lm_targets = np.zeros(L, dtype=np.int64)
        eom_pos = len(prefix) + 2 + n_frames
        for i, target in enumerate(cap_ids + [vocab.eos_id]):
            lm_mask[eom_pos + i] = True
            lm_targets[eom_pos + i] = target
        motion_mask = np.asarray(kinds) == KIND_MOTION
        seq = MixedSequence(
            kinds=np.asarray(kinds), token_ids=np.asarray(ids, dtype=np.int64),
            t=0, frames=motion.frames.copy(), mode=mode, lm_mask=lm_mask,
            lm_targets=lm_targets, motion_mask=motion_mask, ddpm_present=False)

    if max_seq_len is not None and len(seq) > max_seq_len:
        raise SequenceError(
            f"mixed sequence length {len(seq)} overflows max_seq_len {max_seq_len}")
    seq.validate(vocab)
    return seq


def sample_mode(rng: np.random.Generator, ratio: tuple) -> str:
    """Per-example task draw with P(t2m) = ratio[0] / sum(ratio)."""
    p = ratio[0] / (ratio[0] + ratio[1])
    return MODE_T2M if rng.random() < p else MODE_M2T


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def lm_loss(logits: torch.Tensor, targets: torch.Tensor,
            mask: torch.Tensor) -> torch.Tensor:
    """Mean token cross entropy over the masked positions (0 if none)."""
    if mask.sum() == 0:
        return torch.zeros((), dtype=logits.dtype)
    return F.cross_entropy(logits[mask], targets[mask])


def ddpm_loss(x0: torch.Tensor, x0_hat: torch.Tensor,
              motion_mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the masked motion entries (0 if none)."""
    n_slots = motion_mask.sum()
    if n_slots == 0:
        return torch.zeros((), dtype=x0_hat.dtype)
    sq = (x0_hat - x0.to(x0_hat.dtype)) ** 2
    sq = sq * motion_mask.unsqueeze(-1).to(x0_hat.dtype)
    return sq.sum() / (n_slots * x0.shape[-1])


def total_loss(lm: torch.Tensor, ddpm: torch.Tensor, lambda_lm: float) -> torch.Tensor:
    return lambda_lm * lm + ddpm


def batch_losses(model: MotionTextTransformer, batch: Batch, noise_schedule,
                 lambda_lm: float) -> tuple:
    """Forward pass and both loss components: (lm, ddpm, total)."""
    hidden = model.embed_batch(batch, noise_schedule)
    out = model.forward_hidden(hidden)
    logits = model.lm_head(out)
    lm = lm_loss(logits, batch.lm_targets, batch.lm_mask)
    preds = model.motion_out(out)
    dd = ddpm_loss(batch.x0, preds, batch.ddpm_mask)
    return lm, dd, total_loss(lm, dd, lambda_lm)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


def lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    """Linear warmup over the first warmup fraction, cosine decay after."""
    warmup = max(1, int(round(config.warmup_frac * total_steps)))
    if step < warmup:
        return config.lr * step / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(params, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        params, lr=config.lr, betas=(config.beta1, config.beta2),
        eps=config.adam_eps, weight_decay=config.weight_decay)


def train_step(model: MotionTextTransformer, optimizer, batch: Batch,
               config: TrainConfig, noise_schedule, step: int,
               total_steps: int) -> StepReport:
    """One optimization step over the trainable set; base weights untouched."""
    lr = lr_at(config, step, total_steps)
    for group in optimizer.param_groups:
        group["lr"] = lr
    model.train()
    lm, dd, total = batch_losses(model, batch, noise_schedule, config.lambda_lm)
    if not torch.isfinite(total):
        raise TrainingDivergedError(
            f"non-finite loss at step {step}: lm={lm.item()} ddpm={dd.item()}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    torch.nn.utils.clip_grad_norm_(
        [p for _, p in model.trainable_parameters()], config.grad_clip)
    optimizer.step()
    n = batch.n_t2m + batch.n_m2t
    return StepReport(
        step=step, mode_mix=batch.n_t2m / n, lm_loss=float(lm.item()),
        ddpm_loss=float(dd.item()), lm_weighted=float((config.lambda_lm * lm).item()),
        total=float(total.item()), lr=lr)


# ---------------------------------------------------------------------------
# Batching from corpus pairs
# ---------------------------------------------------------------------------


def draw_training_batch(pairs, indices, rng: np.random.Generator,
                        config: TrainConfig, vocab: Vocabulary,
                        T: int, max_seq_len: int) -> Batch:
    """Draw modes, timesteps, condition dropout and noise for one batch."""
    seqs, eps_list = [], []
    for idx in indices:
        pair = pairs[idx]
        mode = sample_mode(rng, (config.ratio_t2m, config.ratio_m2t))
        if mode == MODE_T2M:
            t = int(rng.integers(1, T + 1))
            drop = bool(rng.random() < config.cfg_drop_prob)
            eps = rng.standard_normal(pair.motion.frames.shape)
        else:
            t, drop, eps = 0, False, None
        seqs.append(build_example(pair.caption, pair.motion, mode, t, drop,
                                  vocab, lm_on_t2m=config.lm_on_t2m,
                                  max_seq_len=max_seq_len))
        eps_list.append(eps)
    return collate_sequences(seqs, eps_list, pairs[0].motion.feature_dim)


def train_loop(model: MotionTextTransformer, pairs, noise_schedule,
               vocab: Vocabulary, config: TrainConfig,
               on_step=None, on_epoch_end=None) -> list:
    """Run the unified objective for the configured epoch budget.

    `on_step(report)` and `on_epoch_end(epoch, model)` hooks let the caller
    stream logs and write checkpoints between steps.
    """
    rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, "train")))
    torch.manual_seed(derive_seed(config.seed, "train", "dropout"))
    optimizer = make_optimizer([p for _, p in model.trainable_parameters()], config)
    n = len(pairs)
    batches_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * batches_per_epoch
    reports = []
    step = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            indices = perm[start:start + config.batch_size]
            batch = draw_training_batch(pairs, indices, rng, config, vocab,
                                        noise_schedule.T, model.config.max_seq_len)
            report = train_step(model, optimizer, batch, config, noise_schedule,
                                step, total_steps)
            reports.append(report)
            if on_step is not None:
                on_step(report)
            step += 1
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)
    return reports


# ---------------------------------------------------------------------------
# Base-model pretraining (captions only, every base parameter trainable)
# ---------------------------------------------------------------------------


def collate_captions(token_id_lists, pad_id: int, d_motion: int) -> Batch:
    """Text-only batch: [<bos>, caption, <eos>] with next-token targets."""
    B = len(token_id_lists)
    L = max(len(ids) for ids in token_id_lists)
    token_ids = torch.full((B, L), pad_id, dtype=torch.long)
    lm_mask = torch.zeros(B, L, dtype=torch.bool)
    lm_targets = torch.zeros(B, L, dtype=torch.long)
    for i, ids in enumerate(token_id_lists):
        n = len(ids)
        token_ids[i, :n] = torch.as_tensor(ids, dtype=torch.long)
        lm_mask[i, :n - 1] = True
        lm_targets[i, :n - 1] = torch.as_tensor(ids[1:], dtype=torch.long)
    zeros = torch.zeros(B, L, d_motion, dtype=torch.float64)
    false = torch.zeros(B, L, dtype=torch.bool)
    return Batch(token_ids=token_ids, kinds=torch.full((B, L), KIND_TEXT, dtype=torch.long),
                 t=torch.zeros(B, dtype=torch.long), frames=zeros, eps=zeros.clone(),
                 lm_mask=lm_mask, lm_targets=lm_targets, motion_mask=false,
                 ddpm_mask=false.clone(), x0=zeros.clone(), n_t2m=0, n_m2t=B)


def pretrain_base(model: MotionTextTransformer, pairs, noise_schedule,
                  vocab: Vocabulary, config: TrainConfig, on_step=None) -> list:
    """Train all base parameters with the language loss on captions only.

    The adapter branches are disabled for the duration (their B factors are
    zero so the forward is identical either way); freezing afterwards is
    the caller's move when unified training starts.
    """
    rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, "pretrain")))
    torch.manual_seed(derive_seed(config.seed, "pretrain", "dropout"))
    sequences = [[vocab.bos_id] + list(p.caption.token_ids) + [vocab.eos_id]
                 for p in pairs]
    optimizer = make_optimizer([p for _, p in model.base_parameters()], config)
    n = len(sequences)
    batches_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * batches_per_epoch
    model.set_adapters_enabled(False)
    reports = []
    step = 0
    try:
        for _epoch in range(config.epochs):
            perm = rng.permutation(n)
            for start in range(0, n, config.batch_size):
                idx = perm[start:start + config.batch_size]
                batch = collate_captions([sequences[i] for i in idx], vocab.pad_id,
                                         model.config.d_motion)
                lr = lr_at(config, step, total_steps)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                model.train()
                lm, dd, _ = batch_losses(model, batch, noise_schedule, config.lambda_lm)
                if not torch.isfinite(lm):
                    raise TrainingDivergedError(f"non-finite pretraining loss at step {step}")
                optimizer.zero_grad(set_to_none=True)
                lm.backward()
                torch.nn.utils.clip_grad_norm_(
                    [p for _, p in model.base_parameters()], config.grad_clip)
                optimizer.step()
                report = StepReport(step=step, mode_mix=0.0, lm_loss=float(lm.item()),
                                    ddpm_loss=0.0, lm_weighted=0.0,
                                    total=float(lm.item()), lr=lr)
                reports.append(report)
                if on_step is not None:
                    on_step(report)
                step += 1
    finally:
        model.set_adapters_enabled(True)
    model.eval()
    return reports
