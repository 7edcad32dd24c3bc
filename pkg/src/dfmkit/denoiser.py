"""Posterior models p(target token | noisy state, t, h).

Three families live here: an exact Bayes oracle that enumerates an explicit
target support, tabular models fitted from path samples, and thin wrappers
used by the oracle fixtures. The step-aware neural model is in nnet.py.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import EvidenceError, NumericalGuardError, ValidationError
from .kinetics import Scheduler, kappa_eval
from .path_data import CheckerboardSpec, SourceSpec, Vocab
from .util import LOG_FLOOR, rows_to_logits, softmax

MAX_SUPPORT = 65_536
MAX_TABULAR_STATES = 4_096


class PosteriorModel:
    """Base posterior evaluator.

    `evaluate` is the counted entry point; it accepts a single (L,) state or
    an (N, L) batch and returns logits of shape (N, L, V). `probs` converts to
    row distributions, forcing mask mass to exactly zero when the vocabulary
    reserves a mask id (the mask is never a target token).
    """

    def __init__(self, vocab):
        self.vocab = vocab
        self.eval_count = 0

    def logits(self, states, t, h):
        raise NotImplementedError

    def evaluate(self, states, t, h):
        self.eval_count += 1
        states = np.atleast_2d(np.asarray(states, dtype=np.int64))
        return self.logits(states, t, h)

    def probs(self, states, t, h, temperature=1.0):
        return self.probs_from(self.evaluate(states, t, h), temperature=temperature)

    def probs_from(self, logits, temperature=1.0):
        """Row distributions from already-computed logits (not counted)."""
        p = softmax(np.asarray(logits) / float(temperature))
        if self.vocab.mask_id is not None:
            p[..., self.vocab.mask_id] = 0.0
            total = p.sum(axis=-1, keepdims=True)
            if np.any(total <= 0.0):
                raise NumericalGuardError("all probability mass sat on the mask token")
            p = p / total
        return p


@dataclass
class ExactBayesSpec:
    """Explicit target support for brute-force posterior computation.

    support: (S, L) token ids, probs: (S,) summing to 1 within 1e-9.
    """

    support: np.ndarray
    probs: np.ndarray
    source: SourceSpec
    scheduler: Scheduler
    vocab: Vocab

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.support.ndim != 2 or self.support.shape[0] != self.probs.shape[0]:
            raise ValidationError("support and probs shapes disagree")
        if self.support.shape[0] > MAX_SUPPORT:
            raise ValidationError(f"support larger than {MAX_SUPPORT}")
        if abs(self.probs.sum() - 1.0) > 1e-9 or np.any(self.probs < 0.0):
            raise ValidationError("support probabilities must sum to 1 within 1e-9")
        if np.any(self.support < 0) or np.any(self.support >= self.vocab.size):
            raise ValidationError("support token outside vocabulary")
        if self.vocab.mask_id is not None and np.any(self.support == self.vocab.mask_id):
            raise ValidationError("mask token appears in target support")
        if self.source.kind == "mask" and self.vocab.mask_id is None:
            raise ValidationError("mask source needs a vocab with mask_id")

    @property
    def length(self):
        return self.support.shape[1]


def _log_likelihood(spec, states, t):
    """log P(observed row | target row) summed over positions: (N, S)."""
    kappa, _ = kappa_eval(spec.scheduler, float(t))
    X = spec.support  # (S, L)
    z = states  # (N, L)
    N, S = z.shape[0], X.shape[0]
    ll = np.zeros((N, S))
    chunk = max(1, int(4_000_000 // max(S * z.shape[1], 1)))
    if spec.source.kind == "mask":
        log_stay = np.log(max(1.0 - kappa, np.exp(LOG_FLOOR)))
        log_move = np.log(max(kappa, np.exp(LOG_FLOOR)))
        for lo in range(0, N, chunk):
            zc = z[lo : lo + chunk]
            is_mask = zc[:, None, :] == spec.vocab.mask_id
            match = zc[:, None, :] == X[None, :, :]
            term = np.where(is_mask, log_stay, np.where(match, log_move, -np.inf))
            ll[lo : lo + chunk] = term.sum(axis=2)
    else:
        base = (1.0 - kappa) / spec.vocab.n_non_mask
        for lo in range(0, N, chunk):
            zc = z[lo : lo + chunk]
            match = zc[:, None, :] == X[None, :, :]
            term = np.log(base + kappa * match)
            ll[lo : lo + chunk] = term.sum(axis=2)
    return ll


def exact_posterior(spec, z, t, on_zero_evidence="error"):
    """Bayes posterior rows P(target token at i = a | observed z) as an
    (L, V) probability array; never assigns mass to the mask id.

    Accumulation runs in the log domain so long sequences do not underflow.
    """
    rows = exact_posterior_batch(spec, np.atleast_2d(z), t, on_zero_evidence)
    return rows[0]


def exact_posterior_batch(spec, states, t, on_zero_evidence="error"):
    states = np.asarray(states, dtype=np.int64)
    ll = _log_likelihood(spec, states, t)
    total = ll + np.log(np.maximum(spec.probs, 1e-300))[None, :]
    best = total.max(axis=1, keepdims=True)
    dead = ~np.isfinite(best[:, 0])
    if np.any(dead) and on_zero_evidence == "error":
        raise EvidenceError("observation has zero likelihood under the support")
    w = np.exp(total - np.where(np.isfinite(best), best, 0.0))
    w_sum = w.sum(axis=1, keepdims=True)
    w = np.where(dead[:, None], 0.0, w / np.where(w_sum > 0, w_sum, 1.0))

    N, L = states.shape
    V = spec.vocab.size
    rows = np.zeros((N, L, V))
    for i in range(L):
        onehot = np.zeros((spec.support.shape[0], V))
        onehot[np.arange(spec.support.shape[0]), spec.support[:, i]] = 1.0
        rows[:, i, :] = w @ onehot
    if np.any(dead):
        # hold in place: one-hot on the current token gives zero jump rates
        idx = np.where(dead)[0]
        rows[idx] = 0.0
        for i in range(L):
            rows[idx, i, states[idx, i]] = 1.0
    return rows


class ExactBayesPosterior(PosteriorModel):
    """PosteriorModel view of the brute-force Bayes oracle (h is ignored)."""

    def __init__(self, spec, on_zero_evidence="error"):
        super().__init__(spec.vocab)
        self.spec = spec
        self.on_zero_evidence = on_zero_evidence

    def logits(self, states, t, h):
        t_arr = np.asarray(t, dtype=np.float64)
        if t_arr.ndim == 0:
            rows = exact_posterior_batch(self.spec, states, float(t_arr), self.on_zero_evidence)
            return rows_to_logits(rows)
        out = np.empty((states.shape[0], states.shape[1], self.vocab.size))
        for tv in np.unique(t_arr):
            sel = t_arr == tv
            out[sel] = rows_to_logits(
                exact_posterior_batch(self.spec, states[sel], float(tv), self.on_zero_evidence)
            )
        return out


class CheckerboardBayesPosterior(PosteriorModel):
    """Closed-form Bayes rows for the checkerboard target.

    The alternating-block support factorizes the enumeration: the row for one
    coordinate is its own likelihood times the summed likelihood of the other
    coordinate over each parity class. Verified against exact_posterior.
    """

    def __init__(self, spec=None, source=None, scheduler=None, masked=False):
        self.board = spec or CheckerboardSpec()
        self.source = source or SourceSpec("uniform")
        self.scheduler = scheduler or Scheduler()
        self.masked = masked or self.source.kind == "mask"
        super().__init__(self.board.vocab(masked=self.masked))
        g = self.board.grid
        self.parity = (np.arange(g) // self.board.block) % 2

    def _lik(self, z, kappa):
        """Likelihood table lik[n, v] of observing z[n] given target value v."""
        g = self.board.grid
        values = np.arange(g)
        if self.source.kind == "mask":
            is_mask = z == self.vocab.mask_id
            lik = kappa * (z[:, None] == values[None, :])
            lik[is_mask] = 1.0 - kappa
        else:
            base = (1.0 - kappa) / self.vocab.n_non_mask
            lik = base + kappa * (z[:, None] == values[None, :])
        return lik

    def rows(self, states, t):
        states = np.atleast_2d(np.asarray(states, dtype=np.int64))
        kappa, _ = kappa_eval(self.scheduler, float(t))
        g = self.board.grid
        lik1 = self._lik(states[:, 0], kappa)  # (N, g)
        lik2 = self._lik(states[:, 1], kappa)
        half = g // 2
        # class sums of the partner coordinate's likelihood, per parity
        c2 = np.stack([lik2[:, self.parity == 0].sum(1), lik2[:, self.parity == 1].sum(1)], axis=1)
        c1 = np.stack([lik1[:, self.parity == 0].sum(1), lik1[:, self.parity == 1].sum(1)], axis=1)
        row1 = lik1 * c2[:, self.parity] / half
        row2 = lik2 * c1[:, self.parity] / half
        rows = np.zeros((states.shape[0], 2, self.vocab.size))
        rows[:, 0, :g] = row1
        rows[:, 1, :g] = row2
        total = rows.sum(axis=2, keepdims=True)
        if np.any(total <= 0.0):
            raise EvidenceError("observation has zero likelihood under the checkerboard")
        return rows / total

    def logits(self, states, t, h):
        t_arr = np.asarray(t, dtype=np.float64)
        if t_arr.ndim == 0:
            return rows_to_logits(self.rows(states, float(t_arr)))
        out = np.empty((states.shape[0], 2, self.vocab.size))
        for tv in np.unique(t_arr):
            sel = t_arr == tv
            out[sel] = rows_to_logits(self.rows(states[sel], float(tv)))
        return out


class TabularPosterior(PosteriorModel):
    """Empirical conditional of target tokens keyed by (full state, t bin),
    with add-one smoothing and a uniform fallback for empty bins.

    Only for tiny spaces: |V| ** L must stay <= 4096.
    """

    def __init__(self, vocab, L, t_bins=20):
        super().__init__(vocab)
        if vocab.size**L > MAX_TABULAR_STATES:
            raise ValidationError(f"state space exceeds {MAX_TABULAR_STATES}")
        self.L = L
        self.t_bins = t_bins
        self.counts = {}

    def _key(self, state, t):
        b = min(int(t * self.t_bins), self.t_bins - 1)
        return (tuple(int(s) for s in state), b)

    def observe(self, x_t, x_1, t):
        key = self._key(x_t, t)
        c = self.counts.get(key)
        if c is None:
            c = np.zeros((self.L, self.vocab.size))
            self.counts[key] = c
        c[np.arange(self.L), np.asarray(x_1, dtype=np.int64)] += 1.0

    def observe_batch(self, x_t, x_1, t):
        """Vectorized fitting: group rows by (state, t bin) and scatter-add."""
        x_t = np.asarray(x_t, dtype=np.int64)
        x_1 = np.asarray(x_1, dtype=np.int64)
        bins = np.minimum((np.asarray(t) * self.t_bins).astype(np.int64), self.t_bins - 1)
        keyed = np.concatenate([x_t, bins[:, None]], axis=1)
        uniq, inverse = np.unique(keyed, axis=0, return_inverse=True)
        acc = np.zeros((uniq.shape[0], self.L, self.vocab.size))
        pos = np.broadcast_to(np.arange(self.L), x_1.shape)
        np.add.at(acc, (inverse[:, None], pos, x_1), 1.0)
        for u, block in zip(uniq, acc):
            key = (tuple(int(s) for s in u[:-1]), int(u[-1]))
            if key in self.counts:
                self.counts[key] += block
            else:
                self.counts[key] = block

    def _row_block(self, state, t):
        c = self.counts.get(self._key(state, t))
        if c is None:
            c = np.zeros((self.L, self.vocab.size))
        smoothed = c + 1.0
        if self.vocab.mask_id is not None:
            smoothed[:, self.vocab.mask_id] = 0.0
        return smoothed / smoothed.sum(axis=1, keepdims=True)

    def logits(self, states, t, h):
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (states.shape[0],))
        rows = np.stack(
            [self._row_block(states[n], float(t_arr[n])) for n in range(states.shape[0])]
        )
        return rows_to_logits(rows)


class MaskedTabularPosterior(PosteriorModel):
    """Tabular model for mask-source paths keyed on the observed pattern.

    With a mask source the likelihood factorizes so an observed (non-mask)
    position pins its target token exactly; only masked positions need
    empirical rows, and those depend on t only through the observed pattern,
    so counts are pooled over t.
    """

    def __init__(self, vocab, L):
        super().__init__(vocab)
        if vocab.mask_id is None:
            raise ValidationError("masked-pattern keying needs a mask id")
        self.L = L
        self.counts = {}

    def observe(self, x_t, x_1, t=None):
        x_t = np.asarray(x_t, dtype=np.int64)
        key = tuple(int(s) for s in x_t)
        c = self.counts.get(key)
        if c is None:
            c = np.zeros((self.L, self.vocab.size))
            self.counts[key] = c
        c[np.arange(self.L), np.asarray(x_1, dtype=np.int64)] += 1.0

    def observe_batch(self, x_t, x_1, t=None):
        x_t = np.asarray(x_t, dtype=np.int64)
        x_1 = np.asarray(x_1, dtype=np.int64)
        uniq, inverse = np.unique(x_t, axis=0, return_inverse=True)
        acc = np.zeros((uniq.shape[0], self.L, self.vocab.size))
        pos = np.broadcast_to(np.arange(self.L), x_1.shape)
        np.add.at(acc, (inverse[:, None], pos, x_1), 1.0)
        for u, block in zip(uniq, acc):
            key = tuple(int(s) for s in u)
            if key in self.counts:
                self.counts[key] += block
            else:
                self.counts[key] = block

    def _row_block(self, state):
        rows = np.zeros((self.L, self.vocab.size))
        observed = state != self.vocab.mask_id
        rows[observed, state[observed]] = 1.0
        c = self.counts.get(tuple(int(s) for s in state))
        hidden = ~observed
        if np.any(hidden):
            base = (c if c is not None else np.zeros((self.L, self.vocab.size))) + 1.0
            base[:, self.vocab.mask_id] = 0.0
            rows[hidden] = base[hidden] / base[hidden].sum(axis=1, keepdims=True)
        return rows

    def logits(self, states, t, h):
        rows = np.stack([self._row_block(states[n]) for n in range(states.shape[0])])
        return rows_to_logits(rows)


def tabular_fit(samples, vocab, L, t_bins=20, keying="state_t"):
    """Fit a tabular posterior from (x_t, x_1, t) triples.

    keying "state_t" buckets on (full state, t bin); "masked_pattern" pools
    over t and answers observed positions analytically (mask sources only).
    """
    if keying == "state_t":
        model = TabularPosterior(vocab, L, t_bins=t_bins)
    elif keying == "masked_pattern":
        model = MaskedTabularPosterior(vocab, L)
    else:
        raise ValidationError(f"unknown keying {keying!r}")
    for x_t, x_1, t in samples:
        model.observe(x_t, x_1, t)
    return model


class CallablePosterior(PosteriorModel):
    """Wrap fn(states, t, h) -> probability rows as a PosteriorModel."""

    def __init__(self, vocab, fn):
        super().__init__(vocab)
        self.fn = fn

    def logits(self, states, t, h):
        return rows_to_logits(self.fn(states, t, h))


class ConstantLogitsPosterior(PosteriorModel):
    """Returns a fixed (L, V) logits block for every state; test scaffolding
    for affine-combination contracts."""

    def __init__(self, vocab, block):
        super().__init__(vocab)
        self.block = np.asarray(block, dtype=np.float64)

    def logits(self, states, t, h):
        return np.broadcast_to(self.block, (states.shape[0],) + self.block.shape).copy()


class EnumeratedCache(PosteriorModel):
    """Per-(t, h) table cache over an enumerable tiny state space.

    Joint states index as base-|V| digits; lookups become one gather, which
    is what makes 2e5-trajectory Monte Carlo batches affordable.
    """

    def __init__(self, inner, L):
        super().__init__(inner.vocab)
        if inner.vocab.size**L > MAX_TABULAR_STATES:
            raise ValidationError("state space too large to enumerate")
        self.inner = inner
        self.L = L
        digits = np.arange(inner.vocab.size**L)
        cols = []
        for i in range(L - 1, -1, -1):
            cols.append(digits // inner.vocab.size**i % inner.vocab.size)
        self.all_states = np.stack(cols, axis=1).astype(np.int64)
        self._cache = {}

    def state_index(self, states):
        idx = np.zeros(states.shape[0], dtype=np.int64)
        for i in range(self.L):
            idx = idx * self.vocab.size + states[:, i]
        return idx

    def table(self, t, h):
        key = (float(t), float(h) if h is not None else None)
        tab = self._cache.get(key)
        if tab is None:
            tab = self.inner.evaluate(self.all_states, t, h)
            self._cache[key] = tab
        return tab

    def logits(self, states, t, h):
        return self.table(t, h)[self.state_index(states)]
