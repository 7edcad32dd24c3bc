"""Exact Bayes oracle, tabular fits, and the neural denoiser gradient check."""

import numpy as np
import pytest

from dfmkit.denoiser import (
    CheckerboardBayesPosterior,
    ConstantLogitsPosterior,
    EnumeratedCache,
    ExactBayesPosterior,
    ExactBayesSpec,
    MaskedTabularPosterior,
    TabularPosterior,
    exact_posterior,
    tabular_fit,
)
from dfmkit.errors import EvidenceError, ValidationError
from dfmkit.kinetics import Scheduler
from dfmkit.nnet import (
    NeuralPosterior,
    NeuralSpec,
    backward,
    forward,
    init_params,
    load_checkpoint,
    param_shapes,
    save_checkpoint,
)
from dfmkit.objective import dfm_loss_grad, kl_distill_grad
from dfmkit.path_data import (
    CheckerboardSpec,
    SourceSpec,
    Vocab,
    checkerboard_sample,
    checkerboard_support,
    sample_conditional_xt,
    sample_source,
)
from dfmkit.training import tv_distance

LINEAR = Scheduler("linear")


def naive_posterior(support, probs, source_kind, vocab, z, kappa):
    """Independent brute-force oracle: plain double loop over the support and
    positions, direct probability-domain products, no vectorization."""
    L = len(z)
    rows = [[0.0] * vocab.size for _ in range(L)]
    for x1, p1 in zip(support, probs):
        w = float(p1)
        for j in range(L):
            if source_kind == "mask":
                if z[j] == vocab.mask_id:
                    lik = 1.0 - kappa
                else:
                    lik = kappa if x1[j] == z[j] else 0.0
            else:
                lik = (1.0 - kappa) / vocab.n_non_mask + (kappa if x1[j] == z[j] else 0.0)
            w *= lik
        for i in range(L):
            rows[i][int(x1[i])] += w
    out = np.asarray(rows)
    totals = out.sum(axis=1, keepdims=True)
    if np.any(totals == 0.0):
        raise ZeroDivisionError("zero evidence")
    return out / totals


def small_spec(source_kind="mask"):
    vocab = Vocab(4, mask_id=3) if source_kind == "mask" else Vocab(3)
    support = np.array([[0, 0], [1, 2], [2, 1], [0, 2]])
    probs = np.array([0.25, 0.25, 0.3, 0.2])
    return ExactBayesSpec(support=support, probs=probs, source=SourceSpec(source_kind),
                          scheduler=LINEAR, vocab=vocab)


class TestExactPosterior:
    def test_all_mask_recovers_marginals(self):
        spec = small_spec("mask")
        rows = exact_posterior(spec, np.array([3, 3]), 0.4)
        np.testing.assert_allclose(rows[0, :3], [0.45, 0.25, 0.3], atol=1e-12)
        np.testing.assert_allclose(rows[1, :3], [0.25, 0.3, 0.45], atol=1e-12)
        assert rows[:, 3].max() == 0.0

    def test_late_time_concentrates_on_observation(self):
        spec = small_spec("uniform")
        z = np.array([1, 2])  # in support
        rows = exact_posterior(spec, z, 1.0 - 1e-9)
        assert rows[0, 1] >= 1.0 - 1e-6
        assert rows[1, 2] >= 1.0 - 1e-6

    def test_rows_are_distributions(self):
        spec = small_spec("uniform")
        rng = np.random.default_rng(0)
        for _ in range(50):
            z = rng.integers(0, 3, size=2)
            rows = exact_posterior(spec, z, float(rng.uniform(0, 0.99)))
            assert np.all(rows >= 0.0)
            np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-9)

    def test_matches_naive_double_loop(self):
        rng = np.random.default_rng(1)
        for source_kind in ("mask", "uniform"):
            spec = small_spec(source_kind)
            for _ in range(25):
                t = float(rng.uniform(0.05, 0.95))
                z = rng.integers(0, spec.vocab.size if source_kind == "mask" else 3, size=2)
                try:
                    want = naive_posterior(spec.support, spec.probs, source_kind,
                                           spec.vocab, z, t)
                except ZeroDivisionError:
                    with pytest.raises(EvidenceError):
                        exact_posterior(spec, z, t)
                    continue
                got = exact_posterior(spec, z, t)
                np.testing.assert_allclose(got, want, atol=1e-9)

    def test_product_form_factorizes(self):
        # independent positions: the joint enumeration must equal the
        # single-position closed form
        q = np.array([0.5, 0.3, 0.2])
        support = np.array([[a, b] for a in range(3) for b in range(3)])
        probs = np.array([q[a] * q[b] for a in range(3) for b in range(3)])
        vocab = Vocab(4, mask_id=3)
        spec = ExactBayesSpec(support=support, probs=probs, source=SourceSpec("mask"),
                              scheduler=LINEAR, vocab=vocab)
        t = 0.6
        rows = exact_posterior(spec, np.array([1, 3]), t)
        # observed position pins its token; masked position keeps the marginal
        np.testing.assert_allclose(rows[0, :3], [0.0, 1.0, 0.0], atol=1e-9)
        np.testing.assert_allclose(rows[1, :3], q, atol=1e-9)

    def test_zero_evidence_raises(self):
        spec = small_spec("mask")
        with pytest.raises(EvidenceError):
            exact_posterior(spec, np.array([1, 1]), 0.5)  # (1,1) not in support

    def test_support_validation(self):
        with pytest.raises(ValidationError):
            ExactBayesSpec(support=np.array([[0, 0]]), probs=np.array([0.5]),
                           source=SourceSpec("uniform"), scheduler=LINEAR, vocab=Vocab(3))


class TestCheckerboardPosterior:
    BOARD = CheckerboardSpec()

    def test_masked_partner_row_uniform_over_valid_class(self):
        # z = (5, mask) at kappa 0.9: partner row uniform at 1/64 over the
        # even-parity blocks; brute-force enumeration agrees
        model = CheckerboardBayesPosterior(self.BOARD, SourceSpec("mask"), LINEAR)
        z = np.array([5, model.vocab.mask_id])
        rows = model.rows(z, 0.9)[0]
        valid = self.BOARD.valid_values(5)
        np.testing.assert_allclose(rows[1, valid], 1.0 / 64.0, atol=1e-12)
        invalid = np.setdiff1d(np.arange(128), valid)
        assert rows[1, invalid].max() <= 1e-3
        assert rows[0, 5] == pytest.approx(1.0)

    def test_closed_form_matches_enumeration(self):
        seqs, probs = checkerboard_support(self.BOARD)
        rng = np.random.default_rng(2)
        for source_kind in ("mask", "uniform"):
            vocab = self.BOARD.vocab(masked=source_kind == "mask")
            spec = ExactBayesSpec(support=seqs, probs=probs, source=SourceSpec(source_kind),
                                  scheduler=LINEAR, vocab=vocab)
            model = CheckerboardBayesPosterior(self.BOARD, SourceSpec(source_kind), LINEAR)
            x1 = checkerboard_sample(self.BOARD, rng, n=10)
            x0 = sample_source(SourceSpec(source_kind), vocab, 2, rng, n=10)
            for k in range(10):
                t = float(rng.uniform(0.05, 0.95))
                z = sample_conditional_xt(x0[k], x1[k], t, LINEAR, rng)
                want = exact_posterior(spec, z, t)
                got = model.rows(z, t)[0]
                np.testing.assert_allclose(got, want, atol=1e-10)

    def test_never_mass_on_mask(self):
        model = CheckerboardBayesPosterior(self.BOARD, SourceSpec("mask"), LINEAR)
        z = np.array([model.vocab.mask_id, model.vocab.mask_id])
        rows = model.rows(z, 0.3)[0]
        assert rows[:, model.vocab.mask_id].max() == 0.0


class TestTabular:
    def test_single_pair_smoothed_ratio(self):
        # one (state, target) pair repeated 1e4 times, |V| = 4: the smoothed
        # posterior mass is (1e4 + 1) / (1e4 + 4)
        vocab = Vocab(4)
        model = TabularPosterior(vocab, L=1, t_bins=4)
        for _ in range(10_000):
            model.observe(np.array([2]), np.array([1]), 0.1)
        rows = model.probs(np.array([[2]]), 0.1, None)[0]
        assert rows[0, 1] == pytest.approx((1e4 + 1) / (1e4 + 4), rel=1e-12)
        assert rows[0, 1] >= 0.99

    def test_no_data_uniform(self):
        model = TabularPosterior(Vocab(4), L=2, t_bins=4)
        rows = model.probs(np.array([[0, 3]]), 0.7, None)[0]
        np.testing.assert_allclose(rows, 0.25, atol=1e-12)

    def test_observe_batch_matches_loop(self):
        rng = np.random.default_rng(3)
        x_t = rng.integers(0, 3, size=(500, 2))
        x_1 = rng.integers(0, 3, size=(500, 2))
        t = rng.uniform(0, 1, size=500)
        a = TabularPosterior(Vocab(3), L=2, t_bins=5)
        b = TabularPosterior(Vocab(3), L=2, t_bins=5)
        for i in range(500):
            a.observe(x_t[i], x_1[i], t[i])
        b.observe_batch(x_t, x_1, t)
        assert set(a.counts) == set(b.counts)
        for k in a.counts:
            np.testing.assert_array_equal(a.counts[k], b.counts[k])

    def test_state_space_bound(self):
        with pytest.raises(ValidationError):
            TabularPosterior(Vocab(128), L=2)

    def test_checkerboard_fit_close_to_exact(self):
        # 1e6 mask-source path samples; average TV to the exact rows over 100
        # path-distributed probes stays under 0.05
        board = CheckerboardSpec()
        vocab = board.vocab(masked=True)
        rng = np.random.default_rng(4)
        n = 1_000_000
        x1 = checkerboard_sample(board, rng, n=n)
        t = rng.uniform(0, 1, size=n)
        x0 = np.full((n, 2), vocab.mask_id)
        x_t = sample_conditional_xt(x0, x1, t, LINEAR, rng)
        model = MaskedTabularPosterior(vocab, L=2)
        model.observe_batch(x_t, x1)

        exact = CheckerboardBayesPosterior(board, SourceSpec("mask"), LINEAR)
        tvs = []
        for k in range(100):
            tp = float(rng.uniform(0.02, 0.98))
            z = sample_conditional_xt(x0[k], checkerboard_sample(board, rng), tp, LINEAR, rng)
            got = model.probs(z[None], tp, None)[0]
            want = exact.rows(z, tp)[0]
            tvs.append(np.mean([tv_distance(got[i], want[i]) for i in range(2)]))
        assert float(np.mean(tvs)) <= 0.05

    def test_tabular_fit_dispatch(self):
        samples = [(np.array([0]), np.array([1]), 0.2)]
        model = tabular_fit(samples, Vocab(3), L=1)
        assert isinstance(model, TabularPosterior)
        with pytest.raises(ValidationError):
            tabular_fit(samples, Vocab(3), L=1, keying="bogus")


TINY = NeuralSpec(seq_len=3, vocab_size=5, mask_id=None, embed_dim=4, hidden_dim=8,
                  depth=2, cond_features=4, cond_dim=6, mlp_ratio=2)


class TestNeural:
    def test_zero_init_logits_exactly_zero(self):
        model = NeuralPosterior(TINY, rng=np.random.default_rng(0))
        z = np.array([[1, 2, 3], [0, 0, 4]])
        out = model.evaluate(z, 0.3, 0.25)
        assert out.shape == (2, 3, 5)
        assert np.all(out == 0.0)

    def test_deterministic(self):
        params = init_params(TINY, np.random.default_rng(1))
        for name in ("out_w", "out_b"):
            params[name] = np.random.default_rng(2).standard_normal(params[name].shape)
        z = np.array([[1, 2, 3]])
        a = forward(TINY, params, z, 0.4, 0.5)
        b = forward(TINY, params, z, 0.4, 0.5)
        np.testing.assert_array_equal(a, b)

    def test_step_awareness_changes_output(self):
        rng = np.random.default_rng(3)
        params = {k: rng.standard_normal(v) * 0.3 for k, v in param_shapes(TINY).items()}
        z = np.array([[1, 2, 3]])
        a = forward(TINY, params, z, 0.4, 1.0)
        b = forward(TINY, params, z, 0.4, 2.0**-10)
        assert np.abs(a - b).max() > 1e-6

    def test_wrong_length_rejected(self):
        model = NeuralPosterior(TINY, rng=np.random.default_rng(0))
        with pytest.raises(Exception):
            model.evaluate(np.array([[1, 2]]), 0.1, 0.5)

    def test_gradient_check_central_differences(self):
        # analytic gradients vs (L(p+e) - L(p-e)) / 2e at e = 1e-5 in float64,
        # through both the path-loss and the distillation-loss heads
        rng = np.random.default_rng(5)
        params = {k: rng.standard_normal(v) * 0.5 for k, v in param_shapes(TINY).items()}
        B = 3
        states = rng.integers(0, TINY.vocab_size, size=(B, TINY.seq_len))
        x1 = rng.integers(0, TINY.vocab_size, size=(B, TINY.seq_len))
        t = rng.uniform(0.05, 0.8, size=B)
        h = 2.0 ** rng.integers(-10, 0, size=B).astype(np.float64)
        teacher = rng.standard_normal((B, TINY.seq_len, TINY.vocab_size))
        scale = rng.uniform(0.5, 2.0, size=B)

        def scalar_loss(p):
            logits = forward(TINY, p, states, t, h)
            dfm_vec, _ = dfm_loss_grad(logits, states, x1, scale)
            kl_vec, _ = kl_distill_grad(teacher, logits)
            return float(dfm_vec.mean() + 0.7 * kl_vec.mean())

        logits, cache = forward(TINY, params, states, t, h, want_cache=True)
        _, dz_dfm = dfm_loss_grad(logits, states, x1, scale)
        _, dz_kl = kl_distill_grad(teacher, logits)
        grads = backward(TINY, params, cache, (dz_dfm + 0.7 * dz_kl) / B)

        eps = 1e-5
        worst = 0.0
        for name in sorted(params):
            flat = params[name].reshape(-1)
            gflat = grads[name].reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + eps
                up = scalar_loss(params)
                flat[idx] = orig - eps
                down = scalar_loss(params)
                flat[idx] = orig
                fd = (up - down) / (2.0 * eps)
                rel = abs(gflat[idx] - fd) / max(abs(gflat[idx]), abs(fd), 1e-6)
                worst = max(worst, rel)
        assert worst <= 1e-3

    def test_checkpoint_roundtrip(self, tmp_path):
        model = NeuralPosterior(TINY, rng=np.random.default_rng(6))
        path = tmp_path / "model.bin"
        save_checkpoint(path, TINY, model.params, extra={"note": "unit"})
        spec2, params2, extra = load_checkpoint(path)
        assert spec2 == TINY
        assert extra == {"note": "unit"}
        for k, v in model.params.items():
            np.testing.assert_array_equal(v, params2[k])

    def test_checkpoint_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x10\x00\x00\x00notjsonnotjsonno" + b"\x00" * 64)
        with pytest.raises(ValidationError):
            load_checkpoint(path)


class TestScaffolding:
    def test_constant_model_and_counter(self):
        block = np.arange(6, dtype=float).reshape(2, 3)
        model = ConstantLogitsPosterior(Vocab(3), block)
        out = model.evaluate(np.array([[0, 1], [2, 2]]), 0.1, 0.5)
        assert out.shape == (2, 2, 3)
        assert model.eval_count == 1
        model.probs(np.array([0, 1]), 0.1, 0.5)
        assert model.eval_count == 2

    def test_enumerated_cache_matches_inner(self):
        spec = small_spec("uniform")
        inner = ExactBayesPosterior(spec)
        cached = EnumeratedCache(ExactBayesPosterior(spec), L=2)
        states = np.array([[0, 1], [2, 2], [1, 0]])
        np.testing.assert_allclose(
            cached.evaluate(states, 0.5, None), inner.evaluate(states, 0.5, None)
        )
        cached.evaluate(states, 0.5, None)  # cache hit: inner not re-queried
        assert cached.inner.eval_count == 1
