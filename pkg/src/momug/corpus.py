"""Synthetic paired motion-language corpus.

Produces clips from a fixed set of parametric motion families (closed-form
sinusoid/ramp kinematics over a handful of pose channels) together with
templated captions, plus the tokenizer, per-dimension normalization and the
JSONL persistence layer the rest of the pipeline consumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

T2M_PROMPT = "Generate a motion for the following caption:"
M2T_PROMPT = "Describe the following motion:"

MIN_FRAMES = 16
MAX_FRAMES = 64
MIN_MOTION_DIM = 4

# Modifier words map to disjoint parameter bands (the gaps keep every
# modifier recoverable from the frames, which the retrieval metrics rely on).
ADVERBS = {
    "slowly": (0.70, 0.85),
    "evenly": (0.93, 1.07),
    "quickly": (1.15, 1.30),
}

AMPLITUDES = {
    "gentle": (0.70, 0.90),
    "moderate": (0.95, 1.15),
    "strong": (1.20, 1.40),
}

DURATIONS = {
    "for a short time": (16, 31),
    "for a while": (32, 47),
    "for a long time": (48, 64),
}


class CorpusError(ValueError):
    pass


class UnknownWordError(CorpusError):
    pass


class ZeroVarianceError(CorpusError):
    pass


class CorpusFormatError(CorpusError):
    pass


# ---------------------------------------------------------------------------
# Motion families
# ---------------------------------------------------------------------------
#
# Core channels: 0 forward velocity, 1 lateral velocity, 2 angular velocity,
# 3 vertical offset.  Channels >= 4 carry family-keyed harmonic texture so
# larger d_motion stays informative.  Every channel is a closed form in the
# normalized clip phase u in [0, 1], amplitude a and speed multiplier s.
# Families are shape-distinct (not merely rescaled), so a cosine template
# classifier separates them regardless of the amplitude draw.


def _walk_forward(u, a, s):
    w = 4 * np.pi * s * u
    return [a * (0.9 + 0.1 * np.sin(w)), 0.05 * a * np.cos(w),
            np.zeros_like(u), 0.15 * a * np.sin(w)]


def _march_forward(u, a, s):
    w = 8 * np.pi * s * u
    return [a * (0.7 + 0.2 * np.sin(w)), 0.10 * a * np.sin(w),
            np.zeros_like(u), 0.35 * a * np.sin(w)]


def _turn_left(u, a, s):
    return [np.full_like(u, 0.25 * a), np.zeros_like(u),
            np.full_like(u, 0.9 * a), 0.08 * a * np.sin(4 * np.pi * s * u)]


def _turn_right(u, a, s):
    f, lat, ang, v = _turn_left(u, a, s)
    return [f, lat, -ang, v]


def _sway_left(u, a, s):
    ang = a * (0.45 + 0.45 * np.sin(4 * np.pi * s * u))
    return [np.full_like(u, 0.25 * a), np.zeros_like(u), ang,
            np.full_like(u, 0.05 * a)]


def _sway_right(u, a, s):
    f, lat, ang, v = _sway_left(u, a, s)
    return [f, lat, -ang, v]


def _jump_up(u, a, s):
    arc = np.sin(np.pi * u) ** (2.0 / s)
    return [0.15 * a * arc, np.zeros_like(u), np.zeros_like(u), a * arc]


def _bounce(u, a, s):
    hops = np.sin(3 * np.pi * u) ** 2
    return [np.zeros_like(u), 0.05 * a * np.sin(4 * np.pi * s * u),
            np.zeros_like(u), a * hops]


def _wave_arm(u, a, s):
    swing = np.sin(6 * np.pi * s * u)
    return [np.zeros_like(u), a * swing, np.zeros_like(u),
            np.full_like(u, 0.25 * a) + 0.05 * a * swing]


def _clap_overhead(u, a, s):
    pulse = np.sin(8 * np.pi * s * u)
    return [np.zeros_like(u), np.zeros_like(u), np.zeros_like(u),
            np.full_like(u, 0.5 * a) + 0.3 * a * pulse]


def _walk_circle(u, a, s):
    w = 4 * np.pi * s * u
    return [np.full_like(u, 0.55 * a), 0.15 * a * np.sin(w),
            np.full_like(u, 0.55 * a), 0.10 * a * np.sin(w)]


def _weave_path(u, a, s):
    return [np.full_like(u, 0.55 * a), np.zeros_like(u),
            0.7 * a * np.sin(2 * np.pi * s * u),
            0.08 * a * np.sin(4 * np.pi * s * u)]


def _crouch_down(u, a, s):
    ramp = 3 * u**2 - 2 * u**3
    return [np.zeros_like(u), np.zeros_like(u), np.zeros_like(u), -a * ramp]


def _rise_up(u, a, s):
    ramp = 3 * u**2 - 2 * u**3
    return [np.zeros_like(u), np.zeros_like(u), np.zeros_like(u),
            -a * (1.0 - ramp)]


@dataclass(frozen=True)
class MotionFamily:
    name: str
    core: callable
    template: str
    marker: str  # caption word unique to this family


FAMILIES = (
    MotionFamily("walk_forward", _walk_forward,
                 "a person walks forward {adv} with {amp} strides {dur}",
                 "forward"),
    MotionFamily("march_forward", _march_forward,
                 "a person marches ahead {adv} with {amp} strides {dur}",
                 "marches"),
    MotionFamily("turn_left", _turn_left,
                 "a person turns to the left {adv} with {amp} steps {dur}",
                 "left"),
    MotionFamily("turn_right", _turn_right,
                 "a person turns to the right {adv} with {amp} steps {dur}",
                 "right"),
    MotionFamily("sway_left", _sway_left,
                 "a person sways leftward {adv} with {amp} steps {dur}",
                 "leftward"),
    MotionFamily("sway_right", _sway_right,
                 "a person sways rightward {adv} with {amp} steps {dur}",
                 "rightward"),
    MotionFamily("jump_up", _jump_up,
                 "a person jumps straight up {adv} with {amp} power {dur}",
                 "jumps"),
    MotionFamily("bounce", _bounce,
                 "a person bounces in place {adv} with {amp} power {dur}",
                 "bounces"),
    MotionFamily("wave_arm", _wave_arm,
                 "a person waves one arm {adv} with {amp} energy {dur}",
                 "waves"),
    MotionFamily("clap_overhead", _clap_overhead,
                 "a person claps overhead {adv} with {amp} energy {dur}",
                 "claps"),
    MotionFamily("walk_circle", _walk_circle,
                 "a person walks in a circle {adv} with {amp} strides {dur}",
                 "circle"),
    MotionFamily("weave_path", _weave_path,
                 "a person weaves side to side {adv} with {amp} strides {dur}",
                 "weaves"),
    MotionFamily("crouch_down", _crouch_down,
                 "a person crouches down {adv} with {amp} effort {dur}",
                 "crouches"),
    MotionFamily("rise_up", _rise_up,
                 "a person rises from a crouch {adv} with {amp} effort {dur}",
                 "rises"),
)

FAMILY_NAMES = tuple(f.name for f in FAMILIES)


def family_frames(family_index: int, n_frames: int, d_motion: int,
                  amplitude: float, speed: float) -> np.ndarray:
    """Closed-form clip for one family draw, shape (n_frames, d_motion)."""
    if d_motion < MIN_MOTION_DIM:
        raise CorpusError(
            f"d_motion={d_motion} cannot encode the family parameters "
            f"(need >= {MIN_MOTION_DIM})"
        )
    u = np.linspace(0.0, 1.0, n_frames)
    family = FAMILIES[family_index]
    channels = family.core(u, amplitude, speed)
    phase0 = 2 * np.pi * family_index / len(FAMILIES)
    for k in range(4, d_motion):
        freq = 1.0 + 0.5 * (k - 3)
        channels.append(
            0.25 * amplitude * np.sin(2 * np.pi * speed * freq * u + phase0 * (k - 3))
        )
    return np.stack(channels, axis=1)


CLASSIFIER_SPEED_GRID = np.linspace(0.70, 1.30, 13)


def classify_family(frames: np.ndarray) -> str:
    """Nearest-template family label for a clip.

    Compares the clip against a bank of unit-amplitude templates per family,
    one per speed-grid point (speed shifts the oscillation frequencies, so a
    single canonical template would decorrelate), by cosine similarity of
    the flattened frames.
    """
    frames = np.asarray(frames, dtype=np.float64)
    n, d = frames.shape
    flat = frames.ravel()
    norm = np.linalg.norm(flat)
    best, best_sim = 0, -np.inf
    for idx in range(len(FAMILIES)):
        for speed in CLASSIFIER_SPEED_GRID:
            tmpl = family_frames(idx, n, d, 1.0, float(speed)).ravel()
            sim = float(flat @ tmpl) / (norm * np.linalg.norm(tmpl) + 1e-12)
            if sim > best_sim:
                best, best_sim = idx, sim
    return FAMILIES[best].name


def family_of_caption(text: str) -> str:
    words = set(text.split())
    for family in FAMILIES:
        if family.marker in words:
            return family.name
    raise CorpusError(f"caption matches no motion family: {text!r}")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class MotionSequence:
    """Continuous pose-feature clip, frames shaped (n_frames, d_motion)."""

    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise CorpusError(f"frames must be (N>=1, d), got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise CorpusError("motion frames contain non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class Caption:
    text: str
    token_ids: list


@dataclass
class CorpusPair:
    caption: Caption
    motion: MotionSequence
    family: str


@dataclass
class CorpusStats:
    """Per-dimension z-score parameters plus the clip-length histogram."""

    mean: np.ndarray
    std: np.ndarray
    length_histogram: dict

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            bad = int(np.argmax(self.std <= 0))
            raise ZeroVarianceError(f"std must be positive, dimension {bad} is not")


# ---------------------------------------------------------------------------
# Vocabulary and tokenizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocabulary:
    """Closed word-level vocabulary with dense ids; specials come first."""

    word_to_id: dict
    id_to_token: tuple
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2
    som_id: int = 3
    eom_id: int = 4
    nul_id: int = 5

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def special_ids(self) -> tuple:
        return (self.pad_id, self.bos_id, self.eos_id,
                self.som_id, self.eom_id, self.nul_id)

    @property
    def n_specials(self) -> int:
        return len(self.special_ids)


SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<som>", "<eom>", "<nul>")


def build_vocabulary() -> Vocabulary:
    """Vocabulary over every word any template, modifier or prompt can emit."""
    words = set()
    for family in FAMILIES:
        for adv in ADVERBS:
            for amp in AMPLITUDES:
                for dur in DURATIONS:
                    words.update(family.template.format(
                        adv=adv, amp=amp, dur=dur).split())
    words.update(T2M_PROMPT.split())
    words.update(M2T_PROMPT.split())
    ordered = sorted(words)
    offset = len(SPECIAL_TOKENS)
    word_to_id = {w: offset + i for i, w in enumerate(ordered)}
    return Vocabulary(word_to_id, SPECIAL_TOKENS + tuple(ordered))


def tokenize(text: str, vocab: Vocabulary) -> list:
    ids = []
    for word in text.split():
        if word not in vocab.word_to_id:
            raise UnknownWordError(f"word not in vocabulary: {word!r}")
        ids.append(vocab.word_to_id[word])
    return ids


def detokenize(token_ids, vocab: Vocabulary) -> str:
    words = []
    for tid in token_ids:
        tid = int(tid)
        if tid < vocab.n_specials or tid >= vocab.size:
            raise CorpusError(f"token id {tid} is not a word id")
        words.append(vocab.id_to_token[tid])
    return " ".join(words)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def generate_corpus(seed: int, count: int, d_motion: int) -> list:
    """Deterministically draw `count` caption/motion pairs.

    Families are assigned round robin so every family is represented; the
    per-clip template, adverb, speed, amplitude and length are drawn from
    the seeded stream.
    """
    if count < 1:
        raise CorpusError(f"count must be >= 1, got {count}")
    if d_motion < MIN_MOTION_DIM:
        raise CorpusError(
            f"d_motion={d_motion} cannot encode the family parameters "
            f"(need >= {MIN_MOTION_DIM})"
        )
    vocab = build_vocabulary()
    rng = np.random.Generator(np.random.PCG64(seed))
    adverb_names = tuple(ADVERBS)
    amp_names = tuple(AMPLITUDES)
    dur_names = tuple(DURATIONS)
    pairs = []
    for i in range(count):
        family_index = i % len(FAMILIES)
        family = FAMILIES[family_index]
        adverb = adverb_names[rng.integers(len(adverb_names))]
        amp_word = amp_names[rng.integers(len(amp_names))]
        dur_word = dur_names[rng.integers(len(dur_names))]
        speed = float(rng.uniform(*ADVERBS[adverb]))
        amplitude = float(rng.uniform(*AMPLITUDES[amp_word]))
        lo, hi = DURATIONS[dur_word]
        n_frames = int(rng.integers(lo, hi + 1))
        frames = family_frames(family_index, n_frames, d_motion, amplitude, speed)
        text = family.template.format(adv=adverb, amp=amp_word, dur=dur_word)
        pairs.append(CorpusPair(
            caption=Caption(text=text, token_ids=tokenize(text, vocab)),
            motion=MotionSequence(frames=frames),
            family=family.name,
        ))
    return pairs


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def normalize(motions) -> tuple:
    """Z-score motions per dimension over all pooled frames.

    Returns (normalized motions, CorpusStats).  Raises ZeroVarianceError
    naming the offending dimension if any channel is constant.
    """
    if len(motions) < 2:
        raise CorpusError("normalization needs at least 2 motions")
    pooled = np.concatenate([m.frames for m in motions], axis=0)
    if pooled.shape[0] < 2:
        raise CorpusError("normalization needs at least 2 pooled frames")
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    if np.any(std < 1e-12):
        bad = int(np.argmax(std < 1e-12))
        raise ZeroVarianceError(f"zero variance in motion dimension {bad}")
    hist = {}
    for m in motions:
        hist[m.n_frames] = hist.get(m.n_frames, 0) + 1
    stats = CorpusStats(mean=mean, std=std, length_histogram=hist)
    normalized = [MotionSequence((m.frames - mean) / std) for m in motions]
    return normalized, stats


def normalize_frames(frames: np.ndarray, stats: CorpusStats) -> np.ndarray:
    return (np.asarray(frames, dtype=np.float64) - stats.mean) / stats.std


def denormalize_frames(frames: np.ndarray, stats: CorpusStats) -> np.ndarray:
    return np.asarray(frames, dtype=np.float64) * stats.std + stats.mean


def normalize_corpus(pairs) -> tuple:
    """Normalize the motions of a pair list in place order, keep captions."""
    normed, stats = normalize([p.motion for p in pairs])
    out = [CorpusPair(p.caption, m, p.family) for p, m in zip(pairs, normed)]
    return out, stats


# ---------------------------------------------------------------------------
# Persistence (JSONL; first record is the stats sidecar)
# ---------------------------------------------------------------------------


def save_corpus(path, pairs, stats: CorpusStats):
    with open(path, "w", encoding="utf-8") as fh:
        sidecar = {
            "type": "stats",
            "mean": [float(x) for x in stats.mean],
            "std": [float(x) for x in stats.std],
            "length_histogram": {str(k): int(v) for k, v in
                                 sorted(stats.length_histogram.items())},
        }
        fh.write(json.dumps(sidecar, sort_keys=True) + "\n")
        for pair in pairs:
            record = {
                "caption": pair.caption.text,
                "frames": [float(x) for x in pair.motion.frames.ravel()],
                "n_frames": int(pair.motion.n_frames),
                "d_motion": int(pair.motion.feature_dim),
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_corpus(path) -> tuple:
    """Load (pairs, stats) written by save_corpus."""
    vocab = build_vocabulary()
    pairs = []
    stats = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}: malformed JSON on line {lineno}: {exc}")
            if lineno == 1:
                if record.get("type") != "stats":
                    raise CorpusFormatError(
                        f"{path}: line 1 must be the stats sidecar record")
                stats = CorpusStats(
                    mean=np.array(record["mean"], dtype=np.float64),
                    std=np.array(record["std"], dtype=np.float64),
                    length_histogram={int(k): int(v) for k, v in
                                      record["length_histogram"].items()},
                )
                continue
            try:
                n, d = int(record["n_frames"]), int(record["d_motion"])
                frames = np.array(record["frames"], dtype=np.float64).reshape(n, d)
                text = record["caption"]
            except (KeyError, ValueError) as exc:
                raise CorpusFormatError(f"{path}: bad pair record on line {lineno}: {exc}")
            pairs.append(CorpusPair(
                caption=Caption(text=text, token_ids=tokenize(text, vocab)),
                motion=MotionSequence(frames=frames),
                family=family_of_caption(text),
            ))
    if stats is None:
        raise CorpusFormatError(f"{path}: empty corpus file")
    return pairs, stats


def split_pairs(pairs, test_frac: float = 0.1) -> tuple:
    """Deterministic contiguous train/test split."""
    n_test = max(1, int(round(len(pairs) * test_frac)))
    return pairs[:-n_test], pairs[-n_test:]
