import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from momug import corpus
from momug.corpus import (ADVERBS, AMPLITUDES, DURATIONS, FAMILIES,
                          Caption, CorpusError, CorpusFormatError,
                          MotionSequence, UnknownWordError, ZeroVarianceError,
                          build_vocabulary, classify_family, detokenize,
                          family_of_caption, generate_corpus, load_corpus,
                          normalize, normalize_corpus, save_corpus, tokenize)


def test_generate_shapes_and_bounds():
    pairs = generate_corpus(7, 4, 8)
    assert len(pairs) == 4
    for p in pairs:
        assert p.motion.frames.shape == (p.motion.n_frames, 8)
        assert 16 <= p.motion.n_frames <= 64
        assert np.isfinite(p.motion.frames).all()


def test_generate_determinism_byte_identical(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for path in (a, b):
        pairs, stats = normalize_corpus(generate_corpus(7, 40, 8))
        save_corpus(path, pairs, stats)
    assert a.read_bytes() == b.read_bytes()


def test_generate_rejects_small_dim_and_count():
    with pytest.raises(CorpusError):
        generate_corpus(1, 4, 3)
    with pytest.raises(CorpusError):
        generate_corpus(1, 0, 8)


def test_family_recoverable_by_nearest_template():
    pairs = generate_corpus(7, 700, 8)
    correct = sum(classify_family(p.motion.frames) == p.family for p in pairs)
    assert correct / len(pairs) > 0.99


def test_family_of_caption_matches_generator():
    for p in generate_corpus(5, 56, 8):
        assert family_of_caption(p.caption.text) == p.family


def test_vocabulary_invariants(vocab):
    ids = sorted(vocab.word_to_id.values())
    assert ids == list(range(vocab.n_specials, vocab.size))
    assert len(set(vocab.special_ids)) == vocab.n_specials
    assert not set(vocab.special_ids) & set(vocab.word_to_id.values())


def test_tokenize_round_trip_on_corpus(vocab):
    for p in generate_corpus(2, 100, 8):
        ids = tokenize(p.caption.text, vocab)
        assert detokenize(ids, vocab) == p.caption.text
        assert all(vocab.n_specials <= i < vocab.size for i in ids)


def test_tokenize_empty_and_lengths(vocab):
    assert tokenize("", vocab) == []
    text = "a person walks forward slowly"
    ids = tokenize(text, vocab)
    assert len(ids) == 5
    assert all(i < vocab.size for i in ids)


def test_tokenize_unknown_word(vocab):
    with pytest.raises(UnknownWordError):
        tokenize("a person moonwalks", vocab)


def test_detokenize_rejects_special_ids(vocab):
    with pytest.raises(CorpusError):
        detokenize([vocab.som_id], vocab)


def test_normalize_pooled_moments():
    pairs = generate_corpus(9, 60, 8)
    normed, stats = normalize([p.motion for p in pairs])
    pooled = np.concatenate([m.frames for m in normed])
    assert np.abs(pooled.mean(axis=0)).max() < 1e-6
    assert np.abs(pooled.std(axis=0) - 1).max() < 1e-6


def test_normalize_zero_variance_names_dimension():
    frames = np.ones((20, 4))
    frames[:, 2] = 0.0
    frames[:, 0] = np.linspace(0, 1, 20)
    frames[:, 1] = np.linspace(1, 0, 20)
    frames[:, 3] = np.linspace(0, 2, 20)
    motions = [MotionSequence(frames), MotionSequence(frames * 2)]
    with pytest.raises(ZeroVarianceError, match="dimension 2"):
        normalize(motions)


def test_normalize_round_trip():
    pairs = generate_corpus(4, 30, 8)
    normed, stats = normalize([p.motion for p in pairs])
    for orig, n in zip(pairs, normed):
        back = corpus.denormalize_frames(n.frames, stats)
        assert np.abs(back - orig.motion.frames).max() < 1e-9


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_normalize_round_trip_property(seed):
    rng = np.random.default_rng(seed)
    motions = [MotionSequence(rng.standard_normal((rng.integers(2, 20), 5)) * 3 + 1)
               for _ in range(3)]
    normed, stats = normalize(motions)
    for orig, n in zip(motions, normed):
        assert np.abs(corpus.denormalize_frames(n.frames, stats)
                      - orig.frames).max() < 1e-9


def test_save_load_round_trip(tmp_path, vocab):
    pairs, stats = normalize_corpus(generate_corpus(13, 28, 8))
    path = tmp_path / "c.jsonl"
    save_corpus(path, pairs, stats)
    loaded, loaded_stats = load_corpus(path)
    assert len(loaded) == len(pairs)
    for a, b in zip(pairs, loaded):
        assert a.caption.text == b.caption.text
        assert a.caption.token_ids == b.caption.token_ids
        assert a.family == b.family
        assert np.abs(a.motion.frames - b.motion.frames).max() < 1e-12
    assert np.array_equal(loaded_stats.mean, stats.mean)
    assert np.array_equal(loaded_stats.std, stats.std)
    assert loaded_stats.length_histogram == stats.length_histogram


def test_load_malformed_line_reports_lineno(tmp_path):
    pairs, stats = normalize_corpus(generate_corpus(1, 15, 8))
    path = tmp_path / "c.jsonl"
    save_corpus(path, pairs, stats)
    lines = path.read_text().splitlines()
    lines[3] = "{not json"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorpusFormatError, match="line 4"):
        load_corpus(path)


def test_load_requires_stats_sidecar(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps({"caption": "x", "frames": [], "n_frames": 0,
                                "d_motion": 8}) + "\n")
    with pytest.raises(CorpusFormatError, match="stats"):
        load_corpus(path)


def test_modifier_bands_are_disjoint():
    for bands in (ADVERBS, AMPLITUDES):
        ordered = sorted(bands.values())
        for (_, hi), (lo, _) in zip(ordered, ordered[1:]):
            assert hi < lo
    spans = sorted(DURATIONS.values())
    for (_, hi), (lo, _) in zip(spans, spans[1:]):
        assert hi < lo


def test_enough_families():
    assert len(FAMILIES) >= 6
    markers = [f.marker for f in FAMILIES]
    assert len(set(markers)) == len(markers)
