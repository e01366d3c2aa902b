"""Tests for the synthetic corpus generator and its persistence."""

import math

import mpmath
import numpy as np
import pytest

from rewirelab import corpus as C


def flat_spec(content, speaker=0, noise=0.0, seed=0):
    prosody = tuple(C.NEUTRAL_PROSODY for _ in content)
    return C.UtteranceSpec(content, speaker, prosody, noise, seed)


def random_spec(rng, content=None, speaker=None, seed=0):
    content = content or tuple(rng.integers(0, 32, size=rng.integers(3, 11)))
    speaker = speaker if speaker is not None else int(rng.integers(0, 8))
    prosody = tuple((float(rng.uniform(0.5, 1.5)), float(rng.uniform(-0.05, 0.05))) for _ in content)
    return C.UtteranceSpec(content, speaker, prosody, float(rng.uniform(0.05, 0.2)), seed)


class TestRender:
    def test_same_spec_renders_bit_identical(self):
        spec = random_spec(np.random.default_rng(0), seed=7)
        a = C.render(spec).samples
        b = C.render(spec).samples
        np.testing.assert_array_equal(a, b)

    def test_length_is_tokens_times_samples_per_token(self):
        spec = flat_spec((1, 2, 3, 4))
        assert C.render(spec).length == 4 * 800

    def test_degenerate_nuisance_equals_neutral(self):
        spec = flat_spec((5, 9, 17), speaker=0, noise=0.0)
        np.testing.assert_array_equal(C.render(spec).samples, C.render_neutral(spec).samples)

    def test_neutral_depends_only_on_content(self):
        rng = np.random.default_rng(1)
        a = random_spec(rng, content=(3, 1, 4, 1, 5), speaker=2, seed=10)
        b = random_spec(rng, content=(3, 1, 4, 1, 5), speaker=6, seed=11)
        np.testing.assert_array_equal(C.render_neutral(a).samples, C.render_neutral(b).samples)

    def test_neutral_idempotent_under_respecification(self):
        spec = random_spec(np.random.default_rng(2), seed=3)
        once = C.render_neutral(spec)
        respecified = flat_spec(spec.content, speaker=0, noise=0.0, seed=99)
        np.testing.assert_array_equal(C.render_neutral(respecified).samples, once.samples)

    def test_samples_bounded(self):
        rng = np.random.default_rng(3)
        for seed in range(5):
            w = C.render(random_spec(rng, seed=seed))
            assert np.all(np.isfinite(w.samples))
            assert np.all(np.abs(w.samples) <= 1.0)

    def test_nuisance_actually_changes_waveforms(self):
        rng = np.random.default_rng(4)
        a = random_spec(rng, content=(3, 1, 4), speaker=1, seed=0)
        b = random_spec(rng, content=(3, 1, 4), speaker=5, seed=1)
        assert not np.array_equal(C.render(a).samples, C.render(b).samples)

    def test_empty_content_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            C.UtteranceSpec((), 0, (), 0.0, 0)


class TestSampling:
    def test_split_sizes_ten(self):
        corpus = C.sample_corpus(10, seed=0)
        assert (len(corpus.train_idx), len(corpus.dev_idx), len(corpus.test_idx)) == (8, 1, 1)

    def test_splits_partition_corpus(self):
        corpus = C.sample_corpus(37, seed=1)
        joined = corpus.train_idx + corpus.dev_idx + corpus.test_idx
        assert sorted(joined) == list(range(37))
        assert len(set(joined)) == 37

    def test_same_seed_same_corpus(self):
        a = C.sample_corpus(20, seed=5)
        b = C.sample_corpus(20, seed=5)
        for (sa, wa), (sb, wb) in zip(a.utterances, b.utterances):
            assert sa == sb
            np.testing.assert_array_equal(wa.samples, wb.samples)

    def test_invalid_count_rejected(self):
        with pytest.raises(ValueError):
            C.sample_corpus(0)

    def test_phrase_pool_balances_labels(self):
        gen = C.GeneratorConfig()
        pool = C._build_phrase_pool(gen, C.child_rng(0, "phrases"))
        firsts = [p[0] for p in pool]
        intents = [C.phrase_intent(p, gen.n_intents) for p in pool]
        assert all(firsts.count(t) == gen.n_phrases // gen.vocab_size for t in range(gen.vocab_size))
        assert all(intents.count(k) == gen.n_phrases // gen.n_intents for k in range(gen.n_intents))


def chi2_pvalue(counts, n_classes):
    counts = np.asarray(counts, dtype=float)
    expected = counts.sum() / n_classes
    stat = ((counts - expected) ** 2 / expected).sum()
    dof = n_classes - 1
    return float(mpmath.gammainc(dof / 2.0, stat / 2.0, mpmath.inf, regularized=True))


@pytest.fixture(scope="module")
def corpus2000():
    return C.sample_corpus(2000, seed=42)


class TestLabelDistributions:
    def test_content_classes_roughly_uniform(self, corpus2000):
        gen = corpus2000.generator
        counts = np.bincount(
            [C.content_class(corpus2000.spec(i)) for i in range(2000)], minlength=gen.vocab_size
        )
        assert chi2_pvalue(counts, gen.vocab_size) > 0.001

    def test_intents_roughly_uniform(self, corpus2000):
        gen = corpus2000.generator
        counts = np.bincount(
            [C.intent_label(corpus2000.spec(i), gen.n_intents) for i in range(2000)],
            minlength=gen.n_intents,
        )
        assert chi2_pvalue(counts, gen.n_intents) > 0.001

    def test_speakers_roughly_uniform(self, corpus2000):
        gen = corpus2000.generator
        counts = np.bincount([corpus2000.spec(i).speaker_id for i in range(2000)], minlength=gen.n_speakers)
        assert chi2_pvalue(counts, gen.n_speakers) > 0.001


class TestSubsample:
    def test_full_fraction_is_identity(self, corpus2000):
        sub = C.subsample_training(corpus2000, 1.0, seed=0)
        assert sub.train_idx == corpus2000.train_idx

    def test_fraction_outside_grid_rejected(self, corpus2000):
        with pytest.raises(ValueError, match="fraction"):
            C.subsample_training(corpus2000, 0.5, seed=0)

    def test_one_percent_size_and_coverage(self, corpus2000):
        sub = C.subsample_training(corpus2000, 0.01, seed=0)
        assert len(sub.train_idx) == round(0.01 * len(corpus2000.train_idx))
        classes = {C.content_class(sub.spec(i)) for i in sub.train_idx}
        # 16 slots cannot cover 32 classes; every slot must be a distinct class
        assert len(classes) == len(sub.train_idx)

    def test_five_percent_covers_all_classes(self, corpus2000):
        sub = C.subsample_training(corpus2000, 0.05, seed=0)
        classes = {C.content_class(sub.spec(i)) for i in sub.train_idx}
        assert classes == set(range(corpus2000.generator.vocab_size))

    def test_dev_and_test_untouched(self, corpus2000):
        sub = C.subsample_training(corpus2000, 0.05, seed=0)
        assert sub.dev_idx == corpus2000.dev_idx and sub.test_idx == corpus2000.test_idx

    def test_same_seed_same_subset(self, corpus2000):
        a = C.subsample_training(corpus2000, 0.05, seed=3)
        b = C.subsample_training(corpus2000, 0.05, seed=3)
        assert a.train_idx == b.train_idx

    def test_subset_is_from_training_split(self, corpus2000):
        sub = C.subsample_training(corpus2000, 0.1, seed=1)
        assert set(sub.train_idx) <= set(corpus2000.train_idx)


class TestFrameLabels:
    def test_single_token_spec_labels_every_frame(self):
        spec = flat_spec((9, 9, 9))
        labels = C.frame_labels(spec, frame_count=37, downsample=64)
        assert np.all(labels == 9)

    def test_center_sample_decides_token(self):
        spec = flat_spec((1, 2))
        labels = C.frame_labels(spec, frame_count=25, downsample=64)
        # frame 12 covers samples [768, 832); its center 800 is in token 2
        assert labels[11] == 1 and labels[12] == 2

    def test_labels_clamped_to_last_token(self):
        spec = flat_spec((4,))
        labels = C.frame_labels(spec, frame_count=13, downsample=64)
        assert np.all(labels == 4)


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path):
        corpus = C.sample_corpus(12, seed=9)
        C.save_corpus(corpus, tmp_path)
        loaded = C.load_corpus(tmp_path)
        assert loaded.generator == corpus.generator
        assert loaded.train_idx == corpus.train_idx
        assert loaded.dev_idx == corpus.dev_idx
        assert loaded.test_idx == corpus.test_idx
        for (sa, wa), (sb, wb) in zip(corpus.utterances, loaded.utterances):
            assert sa == sb
            np.testing.assert_array_equal(wa.samples, wb.samples)

    def test_sample_files_are_le_float32(self, tmp_path):
        corpus = C.sample_corpus(3, seed=2)
        C.save_corpus(corpus, tmp_path)
        raw = np.fromfile(tmp_path / "samples" / "utt_000000.f32", dtype="<f4")
        assert raw.shape[0] == corpus.waveform(0).length
