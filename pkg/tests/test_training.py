import math

import numpy as np
import pytest
import torch

from momug import corpus
from momug.model import (MODE_M2T, MODE_T2M, SequenceError, collate_sequences)
from momug.training import (ConfigError, TrainConfig, TrainingDivergedError,
                            batch_losses, build_example, ddpm_loss,
                            draw_training_batch, lm_loss, lr_at,
                            make_optimizer, pretrain_base, sample_mode,
                            total_loss, train_loop, train_step)

from conftest import make_tiny_config
from momug.model import init_state


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lambda_lm=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(cfg_drop_prob=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(ratio_t2m=0)


# -- build_example ----------------------------------------------------------


def test_build_example_m2t_has_no_ddpm(vocab, small_pairs):
    pairs, _ = small_pairs
    seq = build_example(pairs[0].caption, pairs[0].motion, MODE_M2T, 0, False, vocab)
    assert not seq.ddpm_present
    assert seq.t == 0
    # targets are the caption tokens plus <eos>
    targets = seq.lm_targets[seq.lm_mask].tolist()
    assert targets == pairs[0].caption.token_ids + [vocab.eos_id]


def test_build_example_t2m_layout(vocab, small_pairs):
    pairs, _ = small_pairs
    seq = build_example(pairs[0].caption, pairs[0].motion, MODE_T2M, 9, False, vocab)
    assert seq.ddpm_present and seq.t == 9
    assert (seq.token_ids == vocab.som_id).sum() == 1
    assert (seq.token_ids == vocab.eom_id).sum() == 1
    # teacher forcing covers prompt + caption and ends by predicting <som>
    targets = seq.lm_targets[seq.lm_mask].tolist()
    prompt_ids = corpus.tokenize(corpus.T2M_PROMPT, vocab)
    assert targets == prompt_ids + pairs[0].caption.token_ids + [vocab.som_id]


def test_build_example_condition_dropout_replaces_caption(vocab, small_pairs):
    pairs, _ = small_pairs
    seq = build_example(pairs[0].caption, pairs[0].motion, MODE_T2M, 9, True, vocab)
    som_pos = int(np.flatnonzero(seq.token_ids == vocab.som_id)[0])
    prompt_len = 1 + len(corpus.tokenize(corpus.T2M_PROMPT, vocab))
    condition_region = seq.token_ids[prompt_len:som_pos].tolist()
    assert condition_region == [vocab.nul_id]
    # caption content words are gone (prompt words may legitimately recur)
    prompt_words = set(corpus.T2M_PROMPT.split())
    content_ids = {vocab.word_to_id[w] for w in pairs[0].caption.text.split()
                   if w not in prompt_words}
    assert not content_ids & set(seq.token_ids.tolist())


def test_build_example_mode_preconditions(vocab, small_pairs):
    pairs, _ = small_pairs
    cap, mot = pairs[0].caption, pairs[0].motion
    with pytest.raises(SequenceError):
        build_example(cap, mot, MODE_T2M, 0, False, vocab)
    with pytest.raises(SequenceError):
        build_example(cap, mot, MODE_M2T, 3, False, vocab)
    with pytest.raises(SequenceError):
        build_example(cap, mot, MODE_M2T, 0, True, vocab)
    with pytest.raises(SequenceError):
        build_example(cap, mot, "both", 1, False, vocab)


def test_build_example_length_overflow(vocab, small_pairs):
    pairs, _ = small_pairs
    with pytest.raises(SequenceError, match="overflow"):
        build_example(pairs[0].caption, pairs[0].motion, MODE_T2M, 1, False,
                      vocab, max_seq_len=10)


def test_lm_on_t2m_switch(vocab, small_pairs):
    pairs, _ = small_pairs
    seq = build_example(pairs[0].caption, pairs[0].motion, MODE_T2M, 5, False,
                        vocab, lm_on_t2m=False)
    assert not seq.lm_mask.any()


# -- losses ------------------------------------------------------------------


def test_lm_loss_uniform_logits_is_log_v():
    V, n = 62, 7
    logits = torch.zeros(1, n, V, dtype=torch.float64)
    targets = torch.randint(0, V, (1, n))
    mask = torch.ones(1, n, dtype=torch.bool)
    assert abs(lm_loss(logits, targets, mask).item() - math.log(V)) < 1e-12


def test_lm_loss_margin_drives_to_zero():
    V = 10
    targets = torch.zeros(1, 3, dtype=torch.long)
    mask = torch.ones(1, 3, dtype=torch.bool)
    prev = None
    for margin in (1.0, 5.0, 20.0, 80.0):
        logits = torch.zeros(1, 3, V, dtype=torch.float64)
        logits[..., 0] = margin
        val = lm_loss(logits, targets, mask).item()
        if prev is not None:
            assert val < prev
        prev = val
    assert prev < 1e-30


def test_lm_loss_hand_case():
    rng = np.random.default_rng(8)
    logits_np = rng.standard_normal((1, 4, 6))
    targets_np = np.array([[1, 0, 5, 2]])
    # independent hand computation of mean negative log softmax
    expected = 0.0
    for i in range(4):
        row = logits_np[0, i]
        log_z = math.log(np.exp(row - row.max()).sum()) + row.max()
        expected += -(row[targets_np[0, i]] - log_z)
    expected /= 4
    got = lm_loss(torch.as_tensor(logits_np), torch.as_tensor(targets_np),
                  torch.ones(1, 4, dtype=torch.bool)).item()
    assert abs(got - expected) < 1e-10


def test_lm_loss_empty_mask():
    logits = torch.zeros(1, 4, 6, dtype=torch.float64)
    assert lm_loss(logits, torch.zeros(1, 4, dtype=torch.long),
                   torch.zeros(1, 4, dtype=torch.bool)).item() == 0.0


def test_ddpm_loss_cases():
    x0 = torch.randn(2, 5, 8, dtype=torch.float64)
    mask = torch.zeros(2, 5, dtype=torch.bool)
    mask[0, 1:4] = True
    mask[1, 2:5] = True
    assert ddpm_loss(x0, x0.clone(), mask).item() == 0.0
    assert abs(ddpm_loss(x0, x0 + 1.0, mask).item() - 1.0) < 1e-12
    # perturbing an unmasked (padded) slot leaves the loss unchanged
    x_hat = x0 + 1.0
    base = ddpm_loss(x0, x_hat, mask).item()
    x_hat2 = x_hat.clone()
    x_hat2[0, 0] += 100.0
    assert ddpm_loss(x0, x_hat2, mask).item() == base
    assert ddpm_loss(x0, x_hat, torch.zeros_like(mask)).item() == 0.0


def test_total_loss_lambda_scaling():
    lm = torch.tensor(3.7, dtype=torch.float64)
    dd = torch.tensor(0.9, dtype=torch.float64)
    assert total_loss(lm, dd, 0.01).item() == (0.01 * lm + dd).item()
    # the weighted-lm component doubles exactly when lambda doubles
    assert (0.02 * lm).item() == 2 * (0.01 * lm).item()


# -- schedule / optimizer ----------------------------------------------------


def test_lr_schedule_endpoints():
    cfg = TrainConfig(epochs=1)
    total = 100
    assert lr_at(cfg, 0, total) == 0.0
    warmup = int(round(cfg.warmup_frac * total))
    assert lr_at(cfg, warmup, total) == cfg.lr
    assert lr_at(cfg, total - 1, total) < 0.02 * cfg.lr
    mid = warmup + (total - warmup) // 2
    assert 0.3 * cfg.lr < lr_at(cfg, mid, total) < 0.7 * cfg.lr


def test_sample_mode_ratio():
    rng = np.random.default_rng(0)
    draws = [sample_mode(rng, (6, 4)) for _ in range(10_000)]
    frac = sum(d == MODE_T2M for d in draws) / len(draws)
    sigma = math.sqrt(0.6 * 0.4 / 10_000)
    assert abs(frac - 0.6) < 3 * sigma


def test_condition_dropout_rate(vocab, small_pairs):
    pairs, _ = small_pairs
    # all-t2m draws; count built sequences whose condition became <nul>
    cfg = TrainConfig(epochs=1, ratio_t2m=10**9, ratio_m2t=1)
    rng = np.random.default_rng(1)
    n, drops = 10_000, 0
    for start in range(0, n, 500):
        batch = draw_training_batch(pairs, rng.integers(0, len(pairs), 500),
                                    rng, cfg, vocab, 50, 96)
        assert batch.n_m2t == 0
        drops += int((batch.token_ids == vocab.nul_id).any(dim=1).sum())
    sigma = math.sqrt(0.1 * 0.9 / n)
    assert abs(drops / n - 0.10) < 3 * sigma


def test_train_step_updates_only_trainables(vocab, sched, small_pairs):
    pairs, _ = small_pairs
    net = init_state(make_tiny_config(vocab), seed=6)
    net.freeze_base()
    base_hash = net.base_hash()
    cfg = TrainConfig(epochs=1, batch_size=4, seed=0)
    opt = make_optimizer([p for _, p in net.trainable_parameters()], cfg)
    rng = np.random.default_rng(2)
    batch = draw_training_batch(pairs, np.arange(4), rng, cfg, vocab, 50, 96)
    before = {n: p.clone() for n, p in net.trainable_parameters()}
    report = train_step(net, opt, batch, cfg, sched, step=5, total_steps=10)
    assert net.base_hash() == base_hash
    changed = any(not torch.equal(before[n], p) for n, p in net.trainable_parameters())
    assert changed
    assert math.isfinite(report.total)
    assert math.isclose(report.lm_weighted, cfg.lambda_lm * report.lm_loss,
                        rel_tol=1e-6)


def test_train_step_aborts_on_nonfinite(vocab, sched, small_pairs):
    pairs, _ = small_pairs
    net = init_state(make_tiny_config(vocab), seed=6)
    net.freeze_base()
    with torch.no_grad():
        net.motion_out.weight.fill_(float("nan"))
    cfg = TrainConfig(epochs=1, batch_size=2, seed=0)
    opt = make_optimizer([p for _, p in net.trainable_parameters()], cfg)
    rng = np.random.default_rng(3)
    batch = draw_training_batch(pairs, np.arange(2), rng, cfg, vocab, 50, 96)
    with pytest.raises(TrainingDivergedError):
        train_step(net, opt, batch, cfg, sched, 0, 1)


def test_loss_gating_m2t_batch_zero_motion_grads(vocab, sched, small_pairs):
    pairs, _ = small_pairs
    net = init_state(make_tiny_config(vocab), seed=6)
    net.eval()
    seqs = [build_example(p.caption, p.motion, MODE_M2T, 0, False, vocab)
            for p in pairs[:4]]
    batch = collate_sequences(seqs, [None] * 4, 8)
    lm, dd, tot = batch_losses(net, batch, sched, 0.01)
    assert dd.item() == 0.0
    net.zero_grad()
    tot.backward()
    assert net.motion_out.weight.grad is None or not net.motion_out.weight.grad.any()


def test_lambda_doubling_doubles_reported_component(vocab, sched, small_pairs):
    pairs, _ = small_pairs
    net = init_state(make_tiny_config(vocab), seed=6)
    net.eval()
    rng = np.random.default_rng(4)
    cfg = TrainConfig(epochs=1, batch_size=4, seed=9)
    batch = draw_training_batch(pairs, np.arange(4), rng, cfg, vocab, 50, 96)
    lm1, dd1, _ = batch_losses(net, batch, sched, 0.01)
    lm2, dd2, _ = batch_losses(net, batch, sched, 0.02)
    assert lm1.item() == lm2.item() and dd1.item() == dd2.item()
    assert (0.02 * lm2).item() == 2 * (0.01 * lm1).item()


def test_train_loop_deterministic(vocab, sched, small_pairs):
    pairs, _ = small_pairs
    cfg = TrainConfig(epochs=2, batch_size=8, seed=12)
    trajectories = []
    for _ in range(2):
        net = init_state(make_tiny_config(vocab), seed=6)
        net.freeze_base()
        reports = train_loop(net, pairs, sched, vocab, cfg)
        trajectories.append([(r.lm_loss, r.ddpm_loss, r.total) for r in reports])
    assert trajectories[0] == trajectories[1]


def test_pretraining_reduces_loss_and_keeps_adapters(vocab, sched, small_pairs):
    pairs, _ = small_pairs
    net = init_state(make_tiny_config(vocab), seed=6)
    before_adapters = {n: p.clone() for n, p in net.trainable_parameters()}
    cfg = TrainConfig(epochs=20, batch_size=16, lr=2e-3, seed=1)
    reports = pretrain_base(net, pairs, sched, vocab, cfg)
    assert reports[-1].lm_loss < reports[0].lm_loss
    for n, p in net.trainable_parameters():
        assert torch.equal(before_adapters[n], p)
