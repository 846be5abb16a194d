"""Evaluation suite: a contrastive joint text-motion embedder plus the
distribution, retrieval and caption metrics computed in its feature space."""

from __future__ import annotations

import dataclasses
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import CorpusStats, Vocabulary, normalize_frames, tokenize
from .rng import derive_seed
from .sampling import SampleConfig, sample_motion, sample_text


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Joint embedder
# ---------------------------------------------------------------------------


class JointEmbedder(nn.Module):
    """Motion GRU encoder and bag-of-words text encoder sharing one
    unit-sphere embedding space."""

    def __init__(self, vocab_size: int, d_motion: int, d_hidden: int = 64,
                 d_emb: int = 32):
        super().__init__()
        self.d_motion = d_motion
        self.d_emb = d_emb
        self.motion_rnn = nn.GRU(d_motion, d_hidden, batch_first=True)
        self.motion_proj = nn.Linear(d_hidden, d_emb)
        self.text_emb = nn.Embedding(vocab_size, d_hidden)
        self.text_proj = nn.Linear(d_hidden, d_emb)
        self.temperature = 0.07

    def motion_forward(self, frames_list) -> torch.Tensor:
        lengths = torch.tensor([len(f) for f in frames_list])
        padded = nn.utils.rnn.pad_sequence(
            [torch.as_tensor(np.asarray(f), dtype=torch.float32) for f in frames_list],
            batch_first=True)
        packed = nn.utils.rnn.pack_padded_sequence(
            padded, lengths, batch_first=True, enforce_sorted=False)
        _, h_n = self.motion_rnn(packed)
        return F.normalize(self.motion_proj(h_n[-1]), dim=-1)

    def text_forward(self, token_id_lists) -> torch.Tensor:
        pooled = []
        for ids in token_id_lists:
            emb = self.text_emb(torch.as_tensor(list(ids), dtype=torch.long))
            pooled.append(emb.mean(dim=0))
        return F.normalize(self.text_proj(torch.stack(pooled)), dim=-1)

    @torch.no_grad()
    def embed_motions(self, frames_list) -> np.ndarray:
        self.eval()
        return self.motion_forward(frames_list).cpu().numpy().astype(np.float64)

    @torch.no_grad()
    def embed_texts(self, token_id_lists) -> np.ndarray:
        self.eval()
        return self.text_forward(token_id_lists).cpu().numpy().astype(np.float64)


def _retrieval_top1(embedder: JointEmbedder, pairs, group_size: int) -> float:
    motions = embedder.embed_motions([p.motion.frames for p in pairs])
    texts = embedder.embed_texts([p.caption.token_ids for p in pairs])
    hits = total = 0
    for start in range(0, len(pairs) - group_size + 1, group_size):
        m = motions[start:start + group_size]
        t = texts[start:start + group_size]
        d = np.linalg.norm(m[:, None, :] - t[None, :, :], axis=-1)
        hits += int((d.argmin(axis=1) == np.arange(len(m))).sum())
        total += len(m)
    if total == 0:  # fewer held-out pairs than one group
        m, t = motions, texts
        d = np.linalg.norm(m[:, None, :] - t[None, :, :], axis=-1)
        hits, total = int((d.argmin(axis=1) == np.arange(len(m))).sum()), len(m)
    return hits / total


def train_embedder(pairs, seed: int, d_emb: int = 32, batch_size: int = 32,
                   lr: float = 1e-3, max_epochs: int = 200,
                   target_top1: float = 0.9, holdout_frac: float = 0.1,
                   ) -> JointEmbedder:
    """Contrastive training with in-batch negatives until held-out batch-32
    retrieval top-1 exceeds the target."""
    if len(pairs) < 4:
        raise MetricError("embedder training needs at least 4 pairs")
    torch.manual_seed(derive_seed(seed, "embedder"))
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "embedder", "draws")))
    vocab_size = max(max(p.caption.token_ids) for p in pairs) + 1
    d_motion = pairs[0].motion.feature_dim
    embedder = JointEmbedder(vocab_size=vocab_size, d_motion=d_motion, d_emb=d_emb)
    n_holdout = max(2, int(round(len(pairs) * holdout_frac)))
    train_pairs, holdout = pairs[:-n_holdout], pairs[-n_holdout:]
    optimizer = torch.optim.Adam(embedder.parameters(), lr=lr)
    for _epoch in range(max_epochs):
        embedder.train()
        perm = rng.permutation(len(train_pairs))
        for start in range(0, len(train_pairs), batch_size):
            idx = perm[start:start + batch_size]
            if len(idx) < 2:
                continue
            batch = [train_pairs[i] for i in idx]
            zm = embedder.motion_forward([p.motion.frames for p in batch])
            zt = embedder.text_forward([p.caption.token_ids for p in batch])
            logits = zm @ zt.T / embedder.temperature
            labels = torch.arange(len(batch))
            loss = 0.5 * (F.cross_entropy(logits, labels)
                          + F.cross_entropy(logits.T, labels))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        top1 = _retrieval_top1(embedder, holdout, min(batch_size, len(holdout)))
        if top1 > target_top1:
            embedder.eval()
            return embedder
    raise MetricError(
        f"embedder failed to reach held-out top-1 > {target_top1} "
        f"within {max_epochs} epochs (last: {top1:.3f})")


# ---------------------------------------------------------------------------
# Distribution and retrieval metrics
# ---------------------------------------------------------------------------


def fid(feats_a: np.ndarray, feats_b: np.ndarray, ridge: float = 1e-6) -> float:
    """Frechet distance between Gaussians fit to the two feature sets.

    The trace of the cross-covariance square root is computed by
    eigendecomposing the symmetrized product sqrt(Sa) Sb sqrt(Sa).
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    d = a.shape[1]
    if a.shape[0] <= d or b.shape[0] <= d:
        raise MetricError(
            f"need more samples than feature dims ({d}) for stable covariances")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False) + ridge * np.eye(d)
    cov_b = np.cov(b, rowvar=False) + ridge * np.eye(d)
    vals_a, vecs_a = np.linalg.eigh(cov_a)
    if vals_a.min() < -1e-8:
        raise MetricError(f"covariance not PSD (min eigenvalue {vals_a.min():.3e})")
    sqrt_a = (vecs_a * np.sqrt(np.clip(vals_a, 0, None))) @ vecs_a.T
    inner = sqrt_a @ cov_b @ sqrt_a
    inner = (inner + inner.T) / 2.0
    vals = np.linalg.eigvalsh(inner)
    if vals.min() < -1e-8:
        raise MetricError(
            f"product matrix not PSD after symmetrization (min eigenvalue {vals.min():.3e})")
    trace_sqrt = np.sqrt(np.clip(vals, 0, None)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)


def r_precision(text_feats: np.ndarray, motion_feats: np.ndarray,
                group_size: int = 32, seed: int = 0) -> tuple:
    """Top-1/2/3 retrieval of the true caption within shuffled groups.

    Motions are shuffled into groups of `group_size`; for each motion the
    group's captions are ranked by Euclidean distance.  The partial final
    group is dropped.
    """
    t = np.asarray(text_feats, dtype=np.float64)
    m = np.asarray(motion_feats, dtype=np.float64)
    if t.shape != m.shape:
        raise MetricError("text and motion feature sets must align")
    n_groups = len(t) // group_size
    if n_groups == 0:
        raise MetricError(f"need at least {group_size} pairs, got {len(t)}")
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(len(t))
    hits = np.zeros(3, dtype=np.int64)
    total = 0
    for g in range(n_groups):
        idx = perm[g * group_size:(g + 1) * group_size]
        dist = np.linalg.norm(m[idx][:, None, :] - t[idx][None, :, :], axis=-1)
        true = np.diagonal(dist)
        rank = 1 + (dist < true[:, None]).sum(axis=1)
        for k in range(3):
            hits[k] += int((rank <= k + 1).sum())
        total += group_size
    return tuple(float(h / total) for h in hits)


def mm_dist(text_feats: np.ndarray, motion_feats: np.ndarray) -> float:
    """Mean Euclidean distance between matched text/motion embeddings."""
    t = np.asarray(text_feats, dtype=np.float64)
    m = np.asarray(motion_feats, dtype=np.float64)
    if t.shape != m.shape:
        raise MetricError("text and motion feature sets must align")
    return float(np.linalg.norm(t - m, axis=1).mean())


def diversity(feats: np.ndarray, n_pairs: int = 100, seed: int = 0) -> float:
    """Mean distance over disjoint random feature pairs."""
    f = np.asarray(feats, dtype=np.float64)
    if len(f) < 2 * n_pairs:
        raise MetricError(f"diversity with {n_pairs} pairs needs >= {2 * n_pairs} samples")
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(len(f))
    first, second = perm[:n_pairs], perm[n_pairs:2 * n_pairs]
    return float(np.linalg.norm(f[first] - f[second], axis=1).mean())


def multimodality(feature_groups) -> float:
    """Mean pairwise distance within each prompt's repeated generations,
    averaged over prompts."""
    means = []
    for group in feature_groups:
        g = np.asarray(group, dtype=np.float64)
        if len(g) < 2:
            raise MetricError("multimodality needs >= 2 generations per prompt")
        dists = [np.linalg.norm(g[i] - g[j])
                 for i in range(len(g)) for j in range(i + 1, len(g))]
        means.append(np.mean(dists))
    if not means:
        raise MetricError("multimodality needs at least one prompt group")
    return float(np.mean(means))


# ---------------------------------------------------------------------------
# Caption metrics
# ---------------------------------------------------------------------------


def _ngram_counts(words, n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def bleu(candidate: str, references, n: int = 4, eps: float = 1e-9) -> float:
    """BLEU-n: geometric mean of clipped modified n-gram precisions with the
    brevity penalty; zero counts fall back to an epsilon."""
    cand = candidate.split()
    refs = [r.split() for r in references]
    if not refs:
        raise MetricError("bleu needs at least one reference")
    log_sum = 0.0
    for k in range(1, n + 1):
        counts = _ngram_counts(cand, k)
        max_ref = Counter()
        for ref in refs:
            for gram, c in _ngram_counts(ref, k).items():
                max_ref[gram] = max(max_ref[gram], c)
        clipped = sum(min(c, max_ref[g]) for g, c in counts.items())
        total = max(len(cand) - k + 1, 0)
        if total == 0:
            precision = eps
        elif clipped == 0:
            precision = eps / total
        else:
            precision = clipped / total
        log_sum += math.log(precision) / n
    c_len = len(cand)
    r_len = min((abs(len(r) - c_len), len(r)) for r in refs)[1]
    if c_len == 0:
        return 0.0
    brevity = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return float(brevity * math.exp(log_sum))


def _lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[len(b)]


def rouge_l(candidate: str, reference: str, beta_sq: float = 1.2) -> float:
    """Longest-common-subsequence F-measure."""
    cand, ref = candidate.split(), reference.split()
    if not cand or not ref:
        return 0.0
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return float((1 + beta_sq) * recall * precision / (recall + beta_sq * precision))


def cider_scores(candidates, reference_sets, n: int = 4, sigma: float = 6.0) -> list:
    """Per-candidate consensus scores: TF-IDF n-gram cosine (n = 1..4
    averaged) against each reference, with a Gaussian length penalty,
    scaled by 10.

    Document frequencies come from the reference sets themselves; n-grams
    unseen there get the df-1 fallback.
    """
    if len(candidates) != len(reference_sets):
        raise MetricError("one reference set per candidate required")
    if not candidates:
        raise MetricError("cider needs at least one candidate")
    doc_freq = [defaultdict(int) for _ in range(n)]
    for refs in reference_sets:
        seen = [set() for _ in range(n)]
        for ref in refs:
            words = ref.split()
            for k in range(1, n + 1):
                seen[k - 1].update(_ngram_counts(words, k))
        for k in range(n):
            for gram in seen[k]:
                doc_freq[k][gram] += 1
    log_docs = math.log(len(reference_sets))

    def tfidf_vec(words):
        vecs, norms = [], []
        for k in range(1, n + 1):
            vec = {}
            for gram, count in _ngram_counts(words, k).items():
                idf = log_docs - math.log(max(1.0, doc_freq[k - 1][gram]))
                vec[gram] = count * idf
            vecs.append(vec)
            norms.append(math.sqrt(sum(v * v for v in vec.values())))
        return vecs, norms

    scores = []
    for cand, refs in zip(candidates, reference_sets):
        cand_words = cand.split()
        cand_vecs, cand_norms = tfidf_vec(cand_words)
        per_ref = np.zeros(n)
        for ref in refs:
            ref_words = ref.split()
            ref_vecs, ref_norms = tfidf_vec(ref_words)
            penalty = math.exp(-((len(cand_words) - len(ref_words)) ** 2)
                               / (2.0 * sigma ** 2))
            for k in range(n):
                dot = sum(v * ref_vecs[k].get(g, 0.0)
                          for g, v in cand_vecs[k].items())
                if cand_norms[k] > 0 and ref_norms[k] > 0:
                    per_ref[k] += penalty * dot / (cand_norms[k] * ref_norms[k])
        scores.append(float(10.0 * per_ref.mean() / len(refs)))
    return scores


def cider(candidates, reference_sets, n: int = 4, sigma: float = 6.0) -> float:
    """Corpus-level consensus score: mean of the per-candidate scores."""
    return float(np.mean(cider_scores(candidates, reference_sets, n, sigma)))


# ---------------------------------------------------------------------------
# End-to-end evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalConfig:
    seed: int = 0
    cfg_scale: float = 2.5
    guidance: str = "cfg"
    decode: str = "greedy"
    temperature: float = 1.0
    top_k: int = 5
    max_text_len: int = 16
    rp_group_size: int = 32
    diversity_pairs: int = 100
    mm_captions: int = 16
    mm_repeats: int = 10

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class MetricReport:
    fid: float
    r_precision_top1: float
    r_precision_top2: float
    r_precision_top3: float
    mm_dist: float
    diversity: float
    diversity_real: float
    diversity_gap: float
    multimodality: float
    bleu1: float
    bleu4: float
    rouge_l: float
    cider: float
    sample_sizes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def evaluate(model, noise_schedule, stats: CorpusStats, vocab: Vocabulary,
             embedder: JointEmbedder, test_pairs, cfg: EvalConfig,
             ) -> MetricReport:
    """Generate one motion per test caption and one caption per test motion,
    then score the full metric suite in the embedder space."""
    if not test_pairs:
        raise MetricError("evaluate needs a non-empty test split")
    model.eval()
    captions = [p.caption.text for p in test_pairs]
    real_frames = [p.motion.frames for p in test_pairs]

    gen_norm = []
    for i, pair in enumerate(test_pairs):
        scfg = SampleConfig(cfg_scale=cfg.cfg_scale, guidance=cfg.guidance,
                            motion_length=pair.motion.n_frames,
                            seed=derive_seed(cfg.seed, "gen", i))
        motion = sample_motion(pair.caption.text, model, noise_schedule,
                               stats, vocab, scfg)
        gen_norm.append(normalize_frames(motion.frames, stats))

    text_feats = embedder.embed_texts([p.caption.token_ids for p in test_pairs])
    real_feats = embedder.embed_motions(real_frames)
    gen_feats = embedder.embed_motions(gen_norm)

    top1, top2, top3 = r_precision(text_feats, gen_feats,
                                   group_size=cfg.rp_group_size,
                                   seed=derive_seed(cfg.seed, "rp"))
    div_pairs = min(cfg.diversity_pairs, len(test_pairs) // 2)
    div_gen = diversity(gen_feats, div_pairs, seed=derive_seed(cfg.seed, "div"))
    div_real = diversity(real_feats, div_pairs, seed=derive_seed(cfg.seed, "div"))

    mm_rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, "mm")))
    n_mm = min(cfg.mm_captions, len(test_pairs))
    mm_idx = mm_rng.choice(len(test_pairs), size=n_mm, replace=False)
    groups = []
    for i in mm_idx:
        pair = test_pairs[int(i)]
        repeats = []
        for r in range(cfg.mm_repeats):
            scfg = SampleConfig(cfg_scale=cfg.cfg_scale, guidance=cfg.guidance,
                                motion_length=pair.motion.n_frames,
                                seed=derive_seed(cfg.seed, "mm", int(i), r))
            motion = sample_motion(pair.caption.text, model, noise_schedule,
                                   stats, vocab, scfg)
            repeats.append(normalize_frames(motion.frames, stats))
        groups.append(embedder.embed_motions(repeats))

    generated_captions = []
    for i, pair in enumerate(test_pairs):
        scfg = SampleConfig(decode=cfg.decode, temperature=cfg.temperature,
                            top_k=cfg.top_k, max_text_len=cfg.max_text_len,
                            seed=derive_seed(cfg.seed, "cap", i))
        caption, _ = sample_text(pair.motion.frames, model, noise_schedule,
                                 vocab, scfg)
        generated_captions.append(caption.text)

    bleu1_mean = float(np.mean([bleu(c, [r], n=1)
                                for c, r in zip(generated_captions, captions)]))
    bleu4_mean = float(np.mean([bleu(c, [r], n=4)
                                for c, r in zip(generated_captions, captions)]))
    rouge_mean = float(np.mean([rouge_l(c, r)
                                for c, r in zip(generated_captions, captions)]))
    cider_score = cider(generated_captions, [[r] for r in captions])

    return MetricReport(
        fid=fid(gen_feats, real_feats),
        r_precision_top1=top1, r_precision_top2=top2, r_precision_top3=top3,
        mm_dist=mm_dist(text_feats, gen_feats),
        diversity=div_gen, diversity_real=div_real,
        diversity_gap=abs(div_gen - div_real),
        multimodality=multimodality(groups),
        bleu1=bleu1_mean, bleu4=bleu4_mean, rouge_l=rouge_mean,
        cider=cider_score,
        sample_sizes={
            "n_test": len(test_pairs),
            "rp_groups": len(test_pairs) // cfg.rp_group_size,
            "rp_group_size": cfg.rp_group_size,
            "diversity_pairs": div_pairs,
            "mm_captions": n_mm,
            "mm_repeats": cfg.mm_repeats,
        })
