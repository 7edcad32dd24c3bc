"""Shipped oracle fixtures: small, fully specified chains used by the
oracle-check battery and the solver-ordering comparisons."""

import numpy as np

from .denoiser import (
    CallablePosterior,
    CheckerboardBayesPosterior,
    ExactBayesPosterior,
    ExactBayesSpec,
)
from .kinetics import Scheduler
from .path_data import CheckerboardSpec, SourceSpec, Vocab


def two_state_instance(scheduler=None):
    """Smooth two-state tabular chain (L=1, |V|=2).

    The posterior over the target token varies smoothly in time and depends
    on the current state, so interval-averaged estimates genuinely have to
    integrate; used for both the forward-equation agreement check and the
    solver-order comparison.
    """
    vocab = Vocab(2)

    def rows(states, t, h):
        states = np.atleast_2d(np.asarray(states))
        n = states.shape[0]
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))[:, None]
        wave = np.sin(np.pi * t_arr) ** 2
        q1 = np.where(states == 0, 0.2 + 0.6 * wave, 0.8 - 0.6 * wave)
        out = np.empty(states.shape + (2,))
        out[..., 0] = 1.0 - q1
        out[..., 1] = q1
        return out

    return CallablePosterior(vocab, rows), (scheduler or Scheduler())


def sixteen_state_instance(scheduler=None):
    """Correlated pair target on four tokens (L=2, 16 joint states) with a
    uniform source and the exact Bayes denoiser; positions interact through
    the posterior, so the joint chain is genuinely 16-state."""
    scheduler = scheduler or Scheduler()
    vocab = Vocab(4)
    support = np.array([[0, 0], [1, 2], [2, 1], [3, 1]])
    probs = np.array([0.25, 0.25, 0.3, 0.2])
    spec = ExactBayesSpec(support=support, probs=probs, source=SourceSpec("uniform"),
                          scheduler=scheduler, vocab=vocab)
    return ExactBayesPosterior(spec), scheduler


def product_mask_instance(scheduler=None):
    """Independent-position target over three tokens plus a mask (L=2).

    Because the target factorizes, a single parallel jump update can land on
    it exactly, which is what the one-step-versus-many-steps consistency
    check requires.
    """
    scheduler = scheduler or Scheduler()
    vocab = Vocab(4, mask_id=3)
    q = np.array([0.5, 0.3, 0.2])
    support = np.array([[a, b] for a in range(3) for b in range(3)])
    probs = np.array([q[a] * q[b] for a in range(3) for b in range(3)])
    spec = ExactBayesSpec(support=support, probs=probs, source=SourceSpec("mask"),
                          scheduler=scheduler, vocab=vocab)
    return ExactBayesPosterior(spec), scheduler


def checkerboard_instance(source_kind="uniform", scheduler=None, board=None):
    """Checkerboard target with the closed-form Bayes denoiser."""
    scheduler = scheduler or Scheduler()
    board = board or CheckerboardSpec()
    source = SourceSpec(source_kind)
    model = CheckerboardBayesPosterior(spec=board, source=source, scheduler=scheduler)
    return model, source, board, scheduler


def product_target_instance(marginal, scheduler=None, source_kind="mask"):
    """Independent-position target sharing one per-position marginal.

    The exact posterior then factorizes per position, vectorizing cleanly
    over arbitrarily many positions; the survival-law checks run this with
    1e4 positions.
    """
    from .errors import EvidenceError
    from .kinetics import kappa_eval

    scheduler = scheduler or Scheduler()
    marginal = np.asarray(marginal, dtype=np.float64)
    marginal = marginal / marginal.sum()
    n_tokens = marginal.shape[0]
    if source_kind == "mask":
        vocab = Vocab(n_tokens + 1, mask_id=n_tokens)
    else:
        vocab = Vocab(n_tokens)
    source = SourceSpec(source_kind)
    values = np.arange(n_tokens)

    def rows(states, t, h):
        states = np.atleast_2d(np.asarray(states))
        kappa, _ = kappa_eval(scheduler, float(t))
        match = states[:, :, None] == values[None, None, :]
        if source_kind == "mask":
            is_mask = states[:, :, None] == vocab.mask_id
            lik = np.where(is_mask, 1.0 - kappa, kappa * match)
        else:
            lik = (1.0 - kappa) / vocab.n_non_mask + kappa * match
        post = marginal[None, None, :] * lik
        total = post.sum(axis=2, keepdims=True)
        if np.any(total <= 0.0):
            raise EvidenceError("zero-likelihood observation for the product target")
        out = np.zeros(states.shape + (vocab.size,))
        out[:, :, :n_tokens] = post / total
        return out

    return CallablePosterior(vocab, rows), source, scheduler
