"""Mixed-modality decoder transformer.

One causal transformer consumes a single sequence interleaving text tokens,
one diffusion-timestep slot and a span of continuous motion frames.  The
base weights are frozen after pretraining; adaptation happens through
low-rank adapter pairs on every attention/feed-forward projection plus the
timestep MLP and the motion input/output projections.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .rng import derive_seed

KIND_TEXT = 0
KIND_TIME = 1
KIND_MOTION = 2

MODE_T2M = "t2m"
MODE_M2T = "m2t"

BASE_INIT_RANGE = 0.05
ADAPTER_INIT_STD = 0.02


class ModelError(ValueError):
    pass


class SequenceError(ModelError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    d_motion: int = 8
    max_seq_len: int = 128
    T: int = 50
    lora_rank: int = 16
    lora_alpha: float = 32.0
    lora_dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ModelError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.lora_rank < 1:
            raise ModelError(f"lora_rank must be >= 1, got {self.lora_rank}")
        if self.vocab_size < 7:
            raise ModelError("vocab_size must cover the special tokens")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class MixedSequence:
    """One interleaved example: per-slot kind/ids plus the motion payload.

    `frames` holds the values to embed at the motion slots: the clean clip
    for ordinary construction (noising happens at embed time from `t` and a
    supplied eps) or an already-noisy x_t during sampling when
    `frames_are_noisy` is set.
    """

    kinds: np.ndarray        # (L,) int
    token_ids: np.ndarray    # (L,) int, pad id at non-text slots
    t: int
    frames: np.ndarray       # (n_motion_slots, d_motion)
    mode: str                # MODE_T2M | MODE_M2T
    lm_mask: np.ndarray      # (L,) bool: output here predicts the next token
    lm_targets: np.ndarray   # (L,) int, target ids where lm_mask
    motion_mask: np.ndarray  # (L,) bool
    ddpm_present: bool
    frames_are_noisy: bool = False

    def __len__(self):
        return len(self.kinds)

    def validate(self, vocab):
        kinds = np.asarray(self.kinds)
        time_positions = np.flatnonzero(kinds == KIND_TIME)
        if len(time_positions) != 1:
            raise SequenceError(f"expected exactly one time slot, got {len(time_positions)}")
        motion_positions = np.flatnonzero(kinds == KIND_MOTION)
        if len(motion_positions) == 0:
            raise SequenceError("mixed sequence has no motion span")
        start, end = motion_positions[0], motion_positions[-1]
        if not np.array_equal(motion_positions, np.arange(start, end + 1)):
            raise SequenceError("motion span is not contiguous")
        if time_positions[0] != start - 1:
            raise SequenceError("time slot must immediately precede the motion span")
        if start < 2 or self.token_ids[start - 2] != vocab.som_id:
            raise SequenceError("motion span must be preceded by <som> then the time slot")
        if end + 1 >= len(kinds) or self.token_ids[end + 1] != vocab.eom_id:
            raise SequenceError("motion span must be followed by <eom>")
        if self.mode == MODE_M2T and self.t != 0:
            raise SequenceError("motion-to-text sequences must carry t = 0")
        if self.mode == MODE_T2M and self.t < 1:
            raise SequenceError("text-to-motion sequences must carry t >= 1")
        if np.any(np.asarray(self.lm_mask) & np.asarray(self.motion_mask)):
            raise SequenceError("text-target and motion masks overlap")
        if self.frames.shape[0] != len(motion_positions):
            raise SequenceError("frames row count does not match motion slots")


@dataclass
class Batch:
    """Padded tensor view of a list of sequences (pads are trailing)."""

    token_ids: torch.Tensor    # (B, L) long
    kinds: torch.Tensor        # (B, L) long
    t: torch.Tensor            # (B,) long
    frames: torch.Tensor       # (B, L, d_motion)
    eps: torch.Tensor          # (B, L, d_motion)
    lm_mask: torch.Tensor      # (B, L) bool
    lm_targets: torch.Tensor   # (B, L) long
    motion_mask: torch.Tensor  # (B, L) bool
    ddpm_mask: torch.Tensor    # (B, L) bool, motion slots that carry the ddpm loss
    x0: torch.Tensor           # (B, L, d_motion) clean frames at motion slots
    n_t2m: int = 0
    n_m2t: int = 0
    frames_are_noisy: bool = False


def timestep_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of integer timesteps, shape (B, dim)."""
    half = dim // 2
    device, dtype = t.device, torch.get_default_dtype()
    if t.dtype.is_floating_point:
        dtype = t.dtype
    exponent = torch.arange(half, device=device, dtype=dtype)
    freqs = torch.exp(-math.log(10000.0) * exponent / max(half - 1, 1))
    args = t.to(dtype).unsqueeze(1) * freqs.unsqueeze(0)
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class LoRALinear(nn.Module):
    """Frozen-capable linear with an additive low-rank adapter branch."""

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float, dropout: float):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.lora_a = nn.Parameter(torch.empty(rank, d_in))
        self.lora_b = nn.Parameter(torch.zeros(d_out, rank))
        self.scale = alpha / rank
        self.dropout = nn.Dropout(dropout)
        self.adapters_enabled = True

    def forward(self, x):
        out = F.linear(x, self.weight)
        if self.adapters_enabled:
            delta = F.linear(F.linear(self.dropout(x), self.lora_a), self.lora_b)
            out = out + delta * self.scale
        return out


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, r, a, p = cfg.d_model, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout
        self.n_heads = cfg.n_heads
        self.head_dim = d // cfg.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.wq = LoRALinear(d, d, r, a, p)
        self.wk = LoRALinear(d, d, r, a, p)
        self.wv = LoRALinear(d, d, r, a, p)
        self.wo = LoRALinear(d, d, r, a, p)
        self.ln2 = nn.LayerNorm(d)
        self.w1 = LoRALinear(d, cfg.d_ff, r, a, p)
        self.w2 = LoRALinear(cfg.d_ff, d, r, a, p)

    def attention(self, h, causal_mask, attn_sink=None):
        B, L, D = h.shape
        q = self.wq(h).view(B, L, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.wk(h).view(B, L, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.wv(h).view(B, L, self.n_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        scores = scores + causal_mask
        probs = torch.softmax(scores, dim=-1)
        if attn_sink is not None:
            attn_sink.append(probs.detach())
        out = (probs @ v).transpose(1, 2).reshape(B, L, D)
        return self.wo(out)

    def forward(self, h, causal_mask, attn_sink=None):
        h = h + self.attention(self.ln1(h), causal_mask, attn_sink)
        h = h + self.w2(F.gelu(self.w1(self.ln2(h))))
        return h


class MotionTextTransformer(nn.Module):
    """Decoder stack with dual heads over the mixed sequence.

    Base parameter set: token embedding, block weights, final norm, LM head.
    Trainable adapter set: all lora_a/lora_b factors, the timestep MLP and
    the motion input/output projections.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.tok_emb = nn.Embedding(config.vocab_size, d)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.final_ln = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, config.vocab_size, bias=False)
        self.time_mlp = nn.Sequential(
            nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))
        self.motion_in = nn.Linear(config.d_motion, d, bias=False)
        self.motion_out = nn.Linear(d, config.d_motion, bias=False)
        pe = _sinusoidal_positions(config.max_seq_len, d)
        self.register_buffer("pos_enc", pe, persistent=False)

    # -- parameter bookkeeping -------------------------------------------

    @staticmethod
    def is_trainable_name(name: str) -> bool:
        return ("lora_a" in name or "lora_b" in name
                or name.startswith(("time_mlp", "motion_in", "motion_out")))

    def base_parameters(self):
        return [(n, p) for n, p in self.named_parameters()
                if not self.is_trainable_name(n)]

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters()
                if self.is_trainable_name(n)]

    def freeze_base(self):
        for _, p in self.base_parameters():
            p.requires_grad_(False)

    def base_hash(self) -> str:
        digest = hashlib.sha256()
        for name, p in sorted(self.base_parameters()):
            digest.update(name.encode())
            digest.update(str(tuple(p.shape)).encode())
            digest.update(p.detach().cpu().numpy().tobytes())
        return digest.hexdigest()

    def set_adapters_enabled(self, enabled: bool):
        for m in self.modules():
            if isinstance(m, LoRALinear):
                m.adapters_enabled = enabled

    # -- forward surfaces --------------------------------------------------

    def embed_batch(self, batch: Batch, noise_schedule) -> torch.Tensor:
        dtype = self.tok_emb.weight.dtype
        h = self.tok_emb(batch.token_ids)
        tfeat = self.time_mlp(timestep_features(batch.t.to(dtype), self.config.d_model))
        time_mask = batch.kinds == KIND_TIME
        h = torch.where(time_mask.unsqueeze(-1), tfeat.unsqueeze(1), h)
        frames = batch.frames.to(dtype)
        if batch.frames_are_noisy:
            mixed = frames
        else:
            ab = torch.as_tensor(noise_schedule.alpha_bar, dtype=dtype)[batch.t]
            mixed = (ab.sqrt().view(-1, 1, 1) * frames
                     + (1.0 - ab).sqrt().view(-1, 1, 1) * batch.eps.to(dtype))
        motion_h = self.motion_in(mixed)
        motion_mask = batch.kinds == KIND_MOTION
        return torch.where(motion_mask.unsqueeze(-1), motion_h, h)

    def embed_mixed(self, seq: MixedSequence, noise_schedule, eps=None) -> torch.Tensor:
        """Hidden rows for a single sequence, shape (L, d_model)."""
        if len(seq) > self.config.max_seq_len:
            raise SequenceError(
                f"sequence length {len(seq)} exceeds max_seq_len {self.config.max_seq_len}")
        batch = collate_sequences([seq], [eps], self.config.d_motion)
        return self.embed_batch(batch, noise_schedule).squeeze(0)

    def forward_hidden(self, h: torch.Tensor, attn_sink=None) -> torch.Tensor:
        """Run the causal stack over embedded inputs (B, L, d) -> (B, L, d)."""
        B, L, _ = h.shape
        if L > self.config.max_seq_len:
            raise SequenceError(
                f"sequence length {L} exceeds max_seq_len {self.config.max_seq_len}")
        h = h + self.pos_enc[:L].to(h.dtype)
        causal = torch.full((L, L), float("-inf"), dtype=h.dtype).triu(1)
        for block in self.blocks:
            h = block(h, causal, attn_sink)
        return self.final_ln(h)

    def lm_logits(self, out_hidden: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """LM head at the selected positions; positions is a (B, L) bool mask."""
        return self.lm_head(out_hidden[positions])

    def motion_preds(self, out_hidden: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """Clean-motion predictions at the selected motion slots."""
        return self.motion_out(out_hidden[positions])


def _sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, idx / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle)
    return pe


def collate_sequences(seqs, eps_list, d_motion: int) -> Batch:
    """Pad sequences to a common length and stack them into tensors.

    `eps_list` supplies per-sequence noise for the motion slots (None for
    already-noisy or t = 0 sequences).
    """
    B = len(seqs)
    L = max(len(s) for s in seqs)
    token_ids = torch.zeros(B, L, dtype=torch.long)
    kinds = torch.full((B, L), KIND_TEXT, dtype=torch.long)
    t = torch.zeros(B, dtype=torch.long)
    frames = torch.zeros(B, L, d_motion, dtype=torch.float64)
    eps = torch.zeros(B, L, d_motion, dtype=torch.float64)
    lm_mask = torch.zeros(B, L, dtype=torch.bool)
    lm_targets = torch.zeros(B, L, dtype=torch.long)
    motion_mask = torch.zeros(B, L, dtype=torch.bool)
    ddpm_mask = torch.zeros(B, L, dtype=torch.bool)
    x0 = torch.zeros(B, L, d_motion, dtype=torch.float64)
    n_t2m = n_m2t = 0
    noisy_flags = set()
    for i, seq in enumerate(seqs):
        n = len(seq)
        token_ids[i, :n] = torch.as_tensor(np.asarray(seq.token_ids), dtype=torch.long)
        kinds[i, :n] = torch.as_tensor(np.asarray(seq.kinds), dtype=torch.long)
        t[i] = int(seq.t)
        lm_mask[i, :n] = torch.as_tensor(np.asarray(seq.lm_mask, dtype=bool))
        lm_targets[i, :n] = torch.as_tensor(np.asarray(seq.lm_targets), dtype=torch.long)
        motion_mask[i, :n] = torch.as_tensor(np.asarray(seq.motion_mask, dtype=bool))
        slots = torch.nonzero(motion_mask[i], as_tuple=True)[0]
        seq_frames = torch.as_tensor(np.asarray(seq.frames), dtype=torch.float64)
        frames[i, slots] = seq_frames
        if not seq.frames_are_noisy:
            x0[i, slots] = seq_frames
        if seq.ddpm_present:
            ddpm_mask[i, slots] = True
        seq_eps = eps_list[i] if eps_list is not None else None
        if seq_eps is not None:
            eps[i, slots] = torch.as_tensor(np.asarray(seq_eps), dtype=torch.float64)
        elif seq.mode == MODE_T2M and not seq.frames_are_noisy:
            raise SequenceError("text-to-motion training sequences need noise eps")
        if seq.mode == MODE_T2M:
            n_t2m += 1
        else:
            n_m2t += 1
        noisy_flags.add(seq.frames_are_noisy)
    if len(noisy_flags) > 1:
        raise SequenceError("cannot mix noisy and clean frame payloads in one batch")
    return Batch(token_ids=token_ids, kinds=kinds, t=t, frames=frames, eps=eps,
                 lm_mask=lm_mask, lm_targets=lm_targets, motion_mask=motion_mask,
                 ddpm_mask=ddpm_mask, x0=x0, n_t2m=n_t2m, n_m2t=n_m2t,
                 frames_are_noisy=noisy_flags.pop())


def init_state(config: ModelConfig, seed: int) -> MotionTextTransformer:
    """Fresh model: small-uniform base, small-Gaussian adapters with B = 0."""
    model = MotionTextTransformer(config)
    gen = torch.Generator().manual_seed(derive_seed(seed, "init"))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "lora_b" in name:
                p.zero_()
            elif "lora_a" in name:
                p.normal_(0.0, ADAPTER_INIT_STD, generator=gen)
            elif name.startswith(("time_mlp", "motion_in", "motion_out")):
                if p.ndim > 1:
                    p.normal_(0.0, ADAPTER_INIT_STD, generator=gen)
                else:
                    p.zero_()
            elif "ln" in name or "final_ln" in name:
                if name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()
            else:
                p.uniform_(-BASE_INIT_RANGE, BASE_INIT_RANGE, generator=gen)
    return model
