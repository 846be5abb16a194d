import numpy as np
import pytest
import torch

from momug import corpus
from momug.model import (KIND_MOTION, KIND_TEXT, KIND_TIME, MODE_M2T,
                         MODE_T2M, MixedSequence, ModelConfig, ModelError,
                         SequenceError, collate_sequences, init_state,
                         timestep_features)
from momug.training import build_example

from conftest import make_tiny_config


def make_t2m_seq(vocab, pairs, t=9, drop=False):
    return build_example(pairs[0].caption, pairs[0].motion, MODE_T2M, t, drop, vocab)


def make_m2t_seq(vocab, pairs):
    return build_example(pairs[0].caption, pairs[0].motion, MODE_M2T, 0, False, vocab)


def test_config_validation(vocab):
    with pytest.raises(ModelError):
        ModelConfig(vocab_size=vocab.size, d_model=30, n_heads=4)
    with pytest.raises(ModelError):
        ModelConfig(vocab_size=vocab.size, lora_rank=0)


def test_init_deterministic(vocab):
    a = init_state(make_tiny_config(vocab), seed=7)
    b = init_state(make_tiny_config(vocab), seed=7)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)
    c = init_state(make_tiny_config(vocab), seed=8)
    assert not all(torch.equal(pa, pc) for (_, pa), (_, pc)
                   in zip(a.named_parameters(), c.named_parameters()))


def test_lora_b_starts_zero_and_adapter_identity(tiny_model_f64, vocab, sched,
                                                 small_pairs):
    pairs, _ = small_pairs
    net = tiny_model_f64
    net.eval()
    for name, p in net.named_parameters():
        if "lora_b" in name:
            assert not p.any()
    seq = make_t2m_seq(vocab, pairs)
    eps = np.random.default_rng(0).standard_normal(pairs[0].motion.frames.shape)
    h = net.embed_mixed(seq, sched, eps).unsqueeze(0)
    out_full = net.forward_hidden(h)
    net.set_adapters_enabled(False)
    out_base = net.forward_hidden(h)
    net.set_adapters_enabled(True)
    assert torch.equal(out_full, out_base)


def test_causality_future_permutation(tiny_model_f64):
    net = tiny_model_f64
    net.eval()
    rng = np.random.default_rng(1)
    h = torch.as_tensor(rng.standard_normal((1, 20, 32)))
    h2 = h.clone()
    h2[0, [12, 17]] = h2[0, [17, 12]]
    o1 = net.forward_hidden(h)
    o2 = net.forward_hidden(h2)
    assert torch.equal(o1[0, :12], o2[0, :12])
    assert not torch.equal(o1[0, 12:], o2[0, 12:])


def test_attention_rows_sum_to_one(tiny_model_f64):
    net = tiny_model_f64
    net.eval()
    h = torch.as_tensor(np.random.default_rng(2).standard_normal((2, 15, 32)))
    sink = []
    net.forward_hidden(h, attn_sink=sink)
    assert len(sink) == 2
    for probs in sink:
        assert (probs.sum(dim=-1) - 1.0).abs().max().item() < 1e-9


def test_embed_locality_outside_masked_token(tiny_model_f64, vocab, sched,
                                             small_pairs):
    pairs, _ = small_pairs
    net = tiny_model_f64
    net.eval()
    seq = make_t2m_seq(vocab, pairs)
    eps = np.random.default_rng(3).standard_normal(pairs[0].motion.frames.shape)
    h1 = net.embed_mixed(seq, sched, eps)
    changed = MixedSequence(**{**seq.__dict__})
    changed.token_ids = seq.token_ids.copy()
    changed.token_ids[1] = vocab.word_to_id["person"]  # swap one prompt token
    h2 = net.embed_mixed(changed, sched, eps)
    diff_rows = (h1 != h2).any(dim=1)
    assert diff_rows.tolist() == [i == 1 for i in range(len(seq))]


def test_m2t_motion_embedding_is_exact_projection(tiny_model_f64, vocab, sched,
                                                  small_pairs):
    pairs, _ = small_pairs
    net = tiny_model_f64
    net.eval()
    seq = make_m2t_seq(vocab, pairs)
    h = net.embed_mixed(seq, sched, None)
    frames = torch.as_tensor(pairs[0].motion.frames, dtype=torch.float64)
    expected = net.motion_in(frames)
    assert torch.equal(h[torch.as_tensor(seq.motion_mask)], expected)


def test_time_embeddings_distinct(tiny_model_f64):
    net = tiny_model_f64
    feats = timestep_features(torch.arange(0, 51, dtype=torch.float64), 32)
    emb = net.time_mlp(feats)
    dists = (emb[1:] - emb[:-1]).norm(dim=1)
    assert (dists > 0).all()


def test_sequence_length_cap(tiny_model_f64, sched):
    net = tiny_model_f64
    with pytest.raises(SequenceError):
        net.forward_hidden(torch.zeros(1, 97, 32, dtype=torch.float64))


def test_mixed_sequence_validation(vocab, small_pairs):
    pairs, _ = small_pairs
    seq = make_t2m_seq(vocab, pairs)
    seq.validate(vocab)
    bad = MixedSequence(**{**seq.__dict__})
    bad.kinds = seq.kinds.copy()
    bad.kinds[np.flatnonzero(seq.kinds == KIND_TIME)[0]] = KIND_TEXT
    with pytest.raises(SequenceError):
        bad.validate(vocab)
    bad2 = MixedSequence(**{**seq.__dict__})
    bad2.t = 0
    with pytest.raises(SequenceError):
        bad2.validate(vocab)
    bad3 = MixedSequence(**{**seq.__dict__})
    bad3.lm_mask = seq.motion_mask.copy()
    with pytest.raises(SequenceError):
        bad3.validate(vocab)


def test_collate_requires_eps_for_noised_t2m(vocab, small_pairs):
    pairs, _ = small_pairs
    seq = make_t2m_seq(vocab, pairs)
    with pytest.raises(SequenceError):
        collate_sequences([seq], [None], 8)


def test_base_hash_tracks_base_only(tiny_model):
    net = tiny_model
    h0 = net.base_hash()
    with torch.no_grad():
        dict(net.named_parameters())["motion_in.weight"].add_(1.0)
    assert net.base_hash() == h0
    with torch.no_grad():
        dict(net.named_parameters())["lm_head.weight"].add_(1.0)
    assert net.base_hash() != h0


def test_zero_weighted_loss_gives_zero_grads(tiny_model_f64, vocab, sched,
                                             small_pairs):
    pairs, _ = small_pairs
    net = tiny_model_f64
    net.eval()
    seq = make_t2m_seq(vocab, pairs)
    eps = np.random.default_rng(4).standard_normal(pairs[0].motion.frames.shape)
    batch = collate_sequences([seq], [eps], 8)
    from momug.training import batch_losses
    _, _, total = batch_losses(net, batch, sched, 0.01)
    grads = torch.autograd.grad(0.0 * total, [p for _, p in net.trainable_parameters()],
                                allow_unused=True)
    for g in grads:
        assert g is None or not g.any()


def test_lm_loss_gradient_never_reaches_motion_out(tiny_model_f64, vocab, sched,
                                                   small_pairs):
    pairs, _ = small_pairs
    net = tiny_model_f64
    net.eval()
    seq = make_m2t_seq(vocab, pairs)
    batch = collate_sequences([seq], [None], 8)
    from momug.training import batch_losses
    lm, _, _ = batch_losses(net, batch, sched, 1.0)
    grad = torch.autograd.grad(lm, [net.motion_out.weight], allow_unused=True)[0]
    assert grad is None or not grad.any()
