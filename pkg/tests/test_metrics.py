import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from momug import corpus
from momug.metrics import (JointEmbedder, MetricError, bleu, cider,
                           cider_scores, diversity, fid, mm_dist,
                           multimodality, r_precision, rouge_l)


# -- fid ----------------------------------------------------------------------


def test_fid_identity():
    feats = np.random.default_rng(0).standard_normal((500, 8))
    assert fid(feats, feats) < 1e-8


def test_fid_symmetry():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((300, 6)), rng.standard_normal((400, 6)) + 0.5
    assert abs(fid(a, b) - fid(b, a)) < 1e-6


def test_fid_analytic_mean_offset_and_scaling():
    rng = np.random.default_rng(2)
    delta = np.array([1.0, -0.5, 2.0, 0.0, 0.0, 0.5, 0.0, 1.0])
    a = rng.standard_normal((10_000, 8))
    b = rng.standard_normal((10_000, 8)) + delta
    val = fid(a, b)
    target = float(delta @ delta)
    assert abs(val - target) / target < 0.05
    scaled = fid(3.0 * a, 3.0 * b)
    assert abs(scaled - 9.0 * val) / (9.0 * val) < 0.01


def test_fid_needs_enough_samples():
    small = np.zeros((4, 8))
    with pytest.raises(MetricError):
        fid(small, small)


# -- retrieval ----------------------------------------------------------------


def test_r_precision_identical_points():
    feats = np.random.default_rng(3).standard_normal((64, 4))
    top1, top2, top3 = r_precision(feats, feats.copy(), seed=0)
    assert (top1, top2, top3) == (1.0, 1.0, 1.0)


def test_r_precision_random_matches_chance():
    rng = np.random.default_rng(4)
    n = 32 * 1000
    tops = r_precision(rng.standard_normal((n, 4)), rng.standard_normal((n, 4)),
                       seed=1)
    p = 1 / 32
    sigma = math.sqrt(p * (1 - p) / n)
    assert abs(tops[0] - p) < 3 * sigma


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 1000))
def test_r_precision_monotone(seed):
    rng = np.random.default_rng(seed)
    t, m = rng.standard_normal((64, 3)), rng.standard_normal((64, 3))
    top1, top2, top3 = r_precision(t, m, seed=seed)
    assert top1 <= top2 <= top3 <= 1.0


def test_r_precision_drops_partial_group():
    rng = np.random.default_rng(5)
    t = rng.standard_normal((33, 3))
    tops = r_precision(t, t.copy(), seed=0)
    assert tops == (1.0, 1.0, 1.0)  # one full group scored, remainder dropped
    with pytest.raises(MetricError):
        r_precision(t[:10], t[:10], seed=0)


def test_mm_dist_cases():
    t = np.array([[0.0, 0.0], [1.0, 1.0]])
    m = np.array([[3.0, 4.0], [1.0, 1.0]])
    assert mm_dist(t, m) == 2.5
    assert mm_dist(t, t.copy()) == 0.0
    rng = np.random.default_rng(6)
    assert mm_dist(rng.standard_normal((50, 4)), rng.standard_normal((50, 4))) >= 0


def test_diversity_disjoint_pairs():
    rng = np.random.default_rng(7)
    feats = rng.standard_normal((40, 3))
    val = diversity(feats, n_pairs=20, seed=3)
    perm = np.random.Generator(np.random.PCG64(3)).permutation(40)
    expected = np.mean([np.linalg.norm(feats[i] - feats[j])
                        for i, j in zip(perm[:20], perm[20:40])])
    assert abs(val - expected) < 1e-12
    with pytest.raises(MetricError):
        diversity(feats, n_pairs=21)


def test_multimodality_cases():
    assert multimodality([np.zeros((5, 3))]) == 0.0
    groups = [np.array([[0.0, 0.0], [2.0, 0.0]]),
              np.array([[1.0, 1.0], [1.0, -1.0]])]
    assert multimodality(groups) == 2.0
    rng = np.random.default_rng(8)
    g = rng.standard_normal((6, 4))
    brute = np.mean([np.linalg.norm(g[i] - g[j])
                     for i in range(6) for j in range(i + 1, 6)])
    assert abs(multimodality([g]) - brute) < 1e-12
    with pytest.raises(MetricError):
        multimodality([g[:1]])


# -- caption metrics ----------------------------------------------------------


def test_bleu_identity_and_disjoint():
    cap = "a person walks forward slowly"
    assert abs(bleu(cap, [cap], 4) - 1.0) < 1e-10
    assert bleu("x y z w q", ["a b c d e"], 4) < 1e-6
    assert bleu("", ["a b"], 4) == 0.0


def test_bleu_clipping_hand_case():
    # candidate of seven "the" against one reference containing two:
    # clipped unigram precision 2/7, no brevity penalty (7 > 6)
    val = bleu("the the the the the the the", ["the cat is on the mat"], 1)
    assert abs(val - 2 / 7) < 1e-10


def test_bleu_brevity_penalty():
    # identical words but shorter: p_k = 1, BP = exp(1 - 5/3)
    val = bleu("a b c", ["a b c d e"], 1)
    assert abs(val - math.exp(1 - 5 / 3)) < 1e-10


def test_bleu_bounds_property():
    rng = np.random.default_rng(9)
    words = list("abcdefg")
    for _ in range(50):
        cand = " ".join(rng.choice(words, size=rng.integers(1, 10)))
        ref = " ".join(rng.choice(words, size=rng.integers(1, 10)))
        for n in (1, 4):
            assert 0.0 <= bleu(cand, [ref], n) <= 1.0


def test_rouge_l_cases():
    assert rouge_l("a b c", "a b c") == 1.0
    assert rouge_l("a b c", "x y z") == 0.0
    # lcs = 3, P = 3/4, R = 3/6
    p_val, r_val, b2 = 0.75, 0.5, 1.2
    expected = (1 + b2) * r_val * p_val / (r_val + b2 * p_val)
    assert abs(rouge_l("the cat sat here", "the cat sat on the mat")
               - expected) < 1e-10


def test_cider_micro_corpus_oracle():
    cands = ["a dog runs fast", "a cat sleeps", "birds fly high"]
    refs = [["a dog runs fast"], ["a cat sits"], ["planes fly high"]]
    scores = cider_scores(cands, refs)
    # frozen values from the independent brute-force tf-idf oracle
    expected = [10.0, 2.579704631845876, 2.916666666666667]
    assert max(abs(a - b) for a, b in zip(scores, expected)) < 1e-6
    assert abs(cider(cands, refs) - float(np.mean(expected))) < 1e-6
    # the self-identical candidate is maximal among the candidates
    assert scores[0] == max(scores)


def test_cider_empty_candidate():
    assert cider([""], [["a dog runs"]]) == 0.0


def test_cider_range():
    cands = ["a b c", "c b a", "a a a"]
    refs = [["a b c"], ["a b d"], ["b b b"]]
    for s in cider_scores(cands, refs):
        assert 0.0 <= s <= 10.0


# -- embedder -----------------------------------------------------------------


def test_embedder_shapes_and_determinism(vocab, small_pairs):
    pairs, _ = small_pairs
    torch.manual_seed(0)
    emb = JointEmbedder(vocab_size=vocab.size, d_motion=8)
    m = emb.embed_motions([p.motion.frames for p in pairs[:5]])
    t = emb.embed_texts([p.caption.token_ids for p in pairs[:5]])
    assert m.shape == (5, 32) and t.shape == (5, 32)
    assert np.allclose(np.linalg.norm(m, axis=1), 1.0)
    assert np.allclose(np.linalg.norm(t, axis=1), 1.0)
    m2 = emb.embed_motions([p.motion.frames for p in pairs[:5]])
    assert np.array_equal(m, m2)


def test_embedder_contrastive_step_reduces_loss(vocab, small_pairs):
    pairs, _ = small_pairs
    torch.manual_seed(1)
    emb = JointEmbedder(vocab_size=vocab.size, d_motion=8)
    opt = torch.optim.Adam(emb.parameters(), lr=1e-3)
    batch = pairs[:16]

    def loss_val():
        zm = emb.motion_forward([p.motion.frames for p in batch])
        zt = emb.text_forward([p.caption.token_ids for p in batch])
        logits = zm @ zt.T / emb.temperature
        labels = torch.arange(len(batch))
        return 0.5 * (torch.nn.functional.cross_entropy(logits, labels)
                      + torch.nn.functional.cross_entropy(logits.T, labels))

    first = loss_val().item()
    for _ in range(30):
        loss = loss_val()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert loss_val().item() < first
