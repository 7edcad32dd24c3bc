"""Jump-process sampling of the factorized CTMC.

Each step evaluates the posterior once, forms per-position exit rates
lambda = scale * (1 - p(current)), draws jumps with probability
1 - exp(-h * lambda), and resamples jumping positions from the posterior row
with the current token removed and the remainder renormalized.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericalGuardError, ValidationError
from .kinetics import resolve_scale
from .path_data import sample_source
from .util import spawn_rng


@dataclass(frozen=True)
class StepGrid:
    """Uniform budget grid: times s/S for s = 0..S, step 1/S."""

    budget: int

    def __post_init__(self):
        if self.budget < 1:
            raise ValidationError(f"budget must be >= 1, got {self.budget}")

    @property
    def h(self):
        return 1.0 / self.budget

    def times(self):
        return np.arange(self.budget) / self.budget


@dataclass
class TrajectoryRecord:
    """Per-step states (S+1, L), last-change step per position (0 = never),
    and the number of posterior evaluations performed."""

    states: np.ndarray
    last_change: np.ndarray
    nfe: int

    @property
    def final(self):
        return self.states[-1]


def mean_jumps(record):
    """Average over positions of how many steps changed that token."""
    changes = record.states[1:] != record.states[:-1]
    return float(changes.sum(axis=0).mean())


def jump_update(states, probs, scale, h, rng, frozen=None):
    """One vectorized jump update on (N, L) states given posterior rows
    (N, L, V). `scale` and `h` may be scalars or per-row (N,) vectors.
    Frozen positions are copied unchanged."""
    states = np.asarray(states)
    N, L = states.shape
    rows_n, rows_l = np.ogrid[:N, :L]
    p_current = probs[rows_n, rows_l, states]
    scale = np.asarray(scale, dtype=np.float64)
    if scale.ndim == 1:
        scale = scale[:, None]
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1:
        h = h[:, None]
    lam = scale * (1.0 - p_current)
    jump = rng.random((N, L)) < -np.expm1(-h * lam)
    if frozen is not None:
        jump &= ~np.asarray(frozen, dtype=bool)
    if not np.any(jump):
        return states.copy()

    off = probs.copy()
    off[rows_n, rows_l, states] = 0.0
    totals = off.sum(axis=2)
    bad = jump & (totals <= 1e-300)
    if np.any(bad):
        raise NumericalGuardError("jump drawn but off-diagonal mass is zero")
    cdf = np.cumsum(off, axis=2)
    # scale by the cdf tail, not `totals`: pairwise np.sum can differ from the
    # sequential cumsum in the last ulp, and u must never exceed cdf[..., -1]
    u = rng.random((N, L)) * cdf[:, :, -1]
    new_tokens = (cdf < u[:, :, None]).sum(axis=2)
    out = states.copy()
    out[jump] = new_tokens[jump]
    return out


def jump_step(state, t, h, model, scheduler, scale_mode, rng, frozen=None, temperature=1.0):
    """Single-sequence jump step: one posterior evaluation, then the jump law
    applied independently per non-frozen position."""
    state = np.asarray(state, dtype=np.int64)
    probs = model.probs(state, t, h, temperature=temperature)
    scale = resolve_scale(scheduler, scale_mode, t, h)
    frozen2 = None if frozen is None else np.atleast_2d(frozen)
    return jump_update(state[None, :], probs, scale, h, rng, frozen=frozen2)[0]


def run_sampler(source, model, grid, scheduler, scale_mode, rng, L=None,
                init_state=None, frozen=None, temperature=1.0):
    """Run the full budget from the source (or an explicit initial state) and
    record the trajectory. Exactly one posterior evaluation per step."""
    if init_state is None:
        init_state = sample_source(source, model.vocab, L, rng)
    state = np.asarray(init_state, dtype=np.int64).copy()
    L = state.shape[0]
    states = np.empty((grid.budget + 1, L), dtype=np.int64)
    states[0] = state
    last_change = np.zeros(L, dtype=np.int64)
    start_evals = model.eval_count
    h = grid.h
    for s, t in enumerate(grid.times()):
        new = jump_step(state, t, h, model, scheduler, scale_mode, rng,
                        frozen=frozen, temperature=temperature)
        changed = new != state
        last_change[changed] = s + 1
        state = new
        states[s + 1] = state
    record = TrajectoryRecord(states=states, last_change=last_change,
                              nfe=model.eval_count - start_evals)
    return state, record


def recover(corrupted, changed_mask, model, grid, scheduler, scale_mode, rng,
            freeze_context=True, temperature=1.0):
    """Corruption recovery: the corrupted sequence enters as the t=0 state;
    unchanged context positions are frozen throughout when freeze_context."""
    corrupted = np.asarray(corrupted, dtype=np.int64)
    changed_mask = np.asarray(changed_mask, dtype=bool)
    if corrupted.shape != changed_mask.shape:
        raise ValidationError("corrupted sequence and changed mask shapes disagree")
    frozen = ~changed_mask if freeze_context else None
    final, _ = run_sampler(None, model, grid, scheduler, scale_mode, rng,
                           init_state=corrupted, frozen=frozen, temperature=temperature)
    return final


@dataclass
class BatchTrajectoryStats:
    """Aggregates from a batch run: final states, per-position change counts,
    last-change steps, number of posterior evaluations, and optional
    per-step state snapshots."""

    final: np.ndarray
    change_counts: np.ndarray
    last_change: np.ndarray
    nfe: int
    snapshots: list


def run_batch(init_states, model, grid, scheduler, scale_mode, seed,
              frozen=None, temperature=1.0, record_steps=()):
    """Vectorized sampler over N independent sequences sharing one grid.

    Each step still costs one (batched) posterior evaluation; `record_steps`
    lists step indices (0..S) whose full state should be snapshotted.
    """
    states = np.asarray(init_states, dtype=np.int64).copy()
    if states.ndim != 2:
        raise ValidationError("init_states must be (N, L)")
    rng = spawn_rng(seed, 0xBA7C4)
    record_set = set(int(s) for s in record_steps)
    snapshots = [(0, states.copy())] if 0 in record_set else []
    change_counts = np.zeros(states.shape, dtype=np.int64)
    last_change = np.zeros(states.shape, dtype=np.int64)
    start_evals = model.eval_count
    h = grid.h
    for s, t in enumerate(grid.times()):
        probs = model.probs(states, t, h, temperature=temperature)
        scale = resolve_scale(scheduler, scale_mode, t, h)
        new = jump_update(states, probs, scale, h, rng, frozen=frozen)
        moved = new != states
        change_counts += moved
        last_change[moved] = s + 1
        states = new
        if (s + 1) in record_set:
            snapshots.append((s + 1, states.copy()))
    return BatchTrajectoryStats(final=states, change_counts=change_counts,
                                last_change=last_change,
                                nfe=model.eval_count - start_evals,
                                snapshots=snapshots)
