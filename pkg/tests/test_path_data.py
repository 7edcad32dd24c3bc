"""Sources, conditional paths, checkerboard coupling, packing, corruption."""

import numpy as np
import pytest

from dfmkit.errors import ConfigError, ValidationError
from dfmkit.kinetics import Scheduler
from dfmkit.path_data import (
    CharVocabulary,
    CheckerboardSpec,
    SourceSpec,
    Vocab,
    checkerboard_sample,
    checkerboard_support,
    corrupt,
    export_checkerboard_csv,
    load_corpus_blocks,
    pack_corpus,
    sample_conditional_xt,
    sample_source,
)

LINEAR = Scheduler("linear")


class TestSources:
    def test_mask_source_fills_mask(self):
        rng = np.random.default_rng(0)
        out = sample_source(SourceSpec("mask"), Vocab(5, mask_id=4), 3, rng)
        np.testing.assert_array_equal(out, [4, 4, 4])

    def test_mask_without_mask_id_rejected(self):
        with pytest.raises(ConfigError):
            sample_source(SourceSpec("mask"), Vocab(5), 3, np.random.default_rng(0))

    def test_uniform_frequencies(self):
        # Monte-Carlo frequency oracle: each id near 1/4 over 1e5 draws
        rng = np.random.default_rng(1)
        out = sample_source(SourceSpec("uniform"), Vocab(4), 100_000, rng)
        freqs = np.bincount(out, minlength=4) / out.size
        np.testing.assert_allclose(freqs, 0.25, atol=0.01)

    def test_uniform_excludes_mask(self):
        rng = np.random.default_rng(2)
        out = sample_source(SourceSpec("uniform"), Vocab(4, mask_id=1), 10_000, rng)
        assert not np.any(out == 1)

    def test_degenerate_vocab(self):
        rng = np.random.default_rng(3)
        out = sample_source(SourceSpec("uniform"), Vocab(1), 8, rng)
        np.testing.assert_array_equal(out, np.zeros(8))


class TestConditionalPath:
    def test_endpoints(self):
        rng = np.random.default_rng(0)
        x0 = np.arange(10)
        x1 = np.arange(10) + 100
        np.testing.assert_array_equal(sample_conditional_xt(x0, x1, 0.0, LINEAR, rng), x0)
        np.testing.assert_array_equal(sample_conditional_xt(x0, x1, 1.0, LINEAR, rng), x1)

    def test_midpoint_frequency(self):
        rng = np.random.default_rng(4)
        n = 100_000
        x0 = np.zeros(n, dtype=int)
        x1 = np.ones(n, dtype=int)
        xt = sample_conditional_xt(x0, x1, 0.5, LINEAR, rng)
        assert abs(xt.mean() - 0.5) <= 0.01

    def test_only_endpoint_tokens_appear(self):
        rng = np.random.default_rng(5)
        x0 = np.full(1000, 3)
        x1 = np.full(1000, 7)
        for t in (0.2, 0.5, 0.9):
            xt = sample_conditional_xt(x0, x1, t, LINEAR, rng)
            assert set(np.unique(xt)) <= {3, 7}

    def test_per_row_t_vector(self):
        rng = np.random.default_rng(6)
        x0 = np.zeros((2, 5000), dtype=int)
        x1 = np.ones((2, 5000), dtype=int)
        xt = sample_conditional_xt(x0, x1, np.array([0.0, 1.0]), LINEAR, rng)
        assert xt[0].sum() == 0 and xt[1].sum() == 5000

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            sample_conditional_xt(np.zeros(3), np.zeros(4), 0.5, LINEAR, np.random.default_rng(0))


class TestCheckerboard:
    SPEC = CheckerboardSpec()

    def test_valid_values_even_block(self):
        # x1 = 0 sits in block 0 (even): partners are blocks 0 and 2
        vals = self.SPEC.valid_values(0)
        expected = np.concatenate([np.arange(0, 32), np.arange(64, 96)])
        np.testing.assert_array_equal(np.sort(vals), expected)

    def test_valid_values_odd_block(self):
        vals = self.SPEC.valid_values(40)
        expected = np.concatenate([np.arange(32, 64), np.arange(96, 128)])
        np.testing.assert_array_equal(np.sort(vals), expected)

    def test_samples_always_parity_matched(self):
        rng = np.random.default_rng(7)
        s = checkerboard_sample(self.SPEC, rng, n=20_000)
        assert np.all(self.SPEC.valid_mask(s[:, 0], s[:, 1]))

    def test_first_coordinate_marginal_uniform(self):
        rng = np.random.default_rng(8)
        s = checkerboard_sample(self.SPEC, rng, n=1_000_000)
        freq = np.bincount(s[:, 0], minlength=128) / s.shape[0]
        np.testing.assert_allclose(freq, 1.0 / 128.0, atol=0.005 / 128 * 128)
        assert np.abs(freq - 1.0 / 128).max() <= 0.005 * 1.0  # within 0.5% absolute

    def test_second_coordinate_uniform_within_class(self):
        # condition on the whole even first block: every x1 there shares the
        # same partner class, giving ~1.5k counts per partner value
        rng = np.random.default_rng(9)
        s = checkerboard_sample(self.SPEC, rng, n=400_000)
        sel = s[:, 0] < 32
        freq = np.bincount(s[sel, 1], minlength=128)
        valid = np.zeros(128, dtype=bool)
        valid[self.SPEC.valid_values(0)] = True
        assert freq[~valid].sum() == 0
        np.testing.assert_allclose(freq[valid] / sel.sum(), 1 / 64, rtol=0.1)

    def test_support_enumeration(self):
        seqs, probs = checkerboard_support(self.SPEC)
        assert seqs.shape == (128 * 64, 2)
        assert probs.sum() == pytest.approx(1.0)
        assert np.all(self.SPEC.valid_mask(seqs[:, 0], seqs[:, 1]))

    def test_csv_export(self):
        text = export_checkerboard_csv(np.array([[1, 2], [3, 4]]))
        assert text == "x1,x2\n1,2\n3,4\n"


class TestPacking:
    def test_hand_simulated_stream(self):
        # docs [a b], [c d e], eos E, L=4: stream a b E c d e E -> one block
        blocks = pack_corpus([[10, 11], [12, 13, 14]], eos=99, L=4)
        assert len(blocks) == 1
        np.testing.assert_array_equal(blocks[0], [10, 11, 99, 12])

    def test_exact_fit_ends_in_eos(self):
        blocks = pack_corpus([[1, 2, 3]], eos=9, L=4)
        assert len(blocks) == 1
        assert blocks[0][-1] == 9

    def test_partial_block_dropped(self):
        assert pack_corpus([[1, 2]], eos=9, L=5) == []

    def test_empty_corpus(self):
        assert pack_corpus([], eos=9, L=4) == []

    def test_concatenation_is_stream_prefix(self):
        rng = np.random.default_rng(10)
        docs = [list(rng.integers(0, 50, size=rng.integers(1, 20))) for _ in range(30)]
        L = 16
        blocks = pack_corpus(docs, eos=50, L=L)
        stream = []
        for d in docs:
            stream.extend(d)
            stream.append(50)
        flat = np.concatenate(blocks) if blocks else np.array([])
        np.testing.assert_array_equal(flat, np.asarray(stream[: len(flat)]))


class TestCorrupt:
    def test_zero_fraction_identity(self):
        rng = np.random.default_rng(0)
        x = np.arange(10)
        out, mask = corrupt(x, 0.0, Vocab(20), rng)
        np.testing.assert_array_equal(out, x)
        assert not mask.any()

    def test_half_fraction_changes_exactly_half(self):
        rng = np.random.default_rng(1)
        x = np.array([1, 2, 3, 4])
        out, mask = corrupt(x, 0.5, Vocab(9), rng)
        assert mask.sum() == 2
        assert np.all(out[mask] != x[mask])
        np.testing.assert_array_equal(out[~mask], x[~mask])

    def test_binary_vocab_forces_complement(self):
        rng = np.random.default_rng(2)
        x = np.array([0, 1, 0, 1, 1, 0, 0, 1])
        out, mask = corrupt(x, 1.0, Vocab(2), rng)
        assert mask.all()
        np.testing.assert_array_equal(out, 1 - x)

    def test_never_replaces_with_mask(self):
        rng = np.random.default_rng(3)
        x = np.zeros(2000, dtype=int)
        out, _ = corrupt(x, 1.0, Vocab(5, mask_id=2), rng)
        assert not np.any(out == 2)
        assert not np.any(out == 0)

    def test_replacement_impossible_in_unit_vocab(self):
        with pytest.raises(ValidationError):
            corrupt(np.zeros(4, dtype=int), 0.5, Vocab(1), np.random.default_rng(0))

    def test_count_rule_exact(self):
        rng = np.random.default_rng(4)
        for L, frac, want in [(10, 0.25, 3), (10, 0.24, 2), (8, 1.0, 8), (3, 0.5, 2)]:
            _, mask = corrupt(np.zeros(L, dtype=int), frac, Vocab(7), rng)
            assert mask.sum() == want


class TestCharCorpus:
    TEXT = "the cat sat\na dog ran far\nthe end\n"

    def test_roundtrip_and_blocks(self):
        codec, blocks = load_corpus_blocks(self.TEXT, L=8)
        assert all(len(b) == 8 for b in blocks)
        flat = np.concatenate(blocks)
        assert codec.eos_id in flat

    def test_vocab_is_stable_sorted(self):
        codec = CharVocabulary.from_text(self.TEXT)
        assert codec.chars == sorted(set(self.TEXT.replace("\n", "")))
        assert codec.decode(codec.encode("cat")) == "cat"

    def test_unknown_character_rejected(self):
        codec = CharVocabulary.from_text(self.TEXT)
        with pytest.raises(ValidationError):
            codec.encode("zebra!")

    def test_mask_variant_reserves_id(self):
        codec = CharVocabulary.from_text(self.TEXT, with_mask=True)
        assert codec.vocab.mask_id == codec.vocab.size - 1
