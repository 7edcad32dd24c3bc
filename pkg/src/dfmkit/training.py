"""Training loops, reference integration, and evaluation metrics.

The Kolmogorov forward integrator is the deterministic oracle the stochastic
jump sampler is checked against; the loops are plain SGD so a fixed seed
reproduces every byte of the loss curve.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalGuardError, ValidationError
from .kinetics import Scheduler, g_instant, g_cumulative_vec, resolve_scale
from .objective import (
    STEP_GRID,
    BlendConfig,
    StepPolicy,
    dfm_loss_grad,
    kl_distill_grad,
    policy_weights,
)
from .path_data import SourceSpec, sample_conditional_xt, sample_source
from .sampler import jump_update
from .teacher import TeacherConfig, teacher_estimate
from .util import spawn_rng

MAX_REFERENCE_STATES = 64


def kolmogorov_reference(generator_fn, t0, t1, fine_steps):
    """Integrate the forward equation dP/dt = P u_t with uniform Euler steps.

    generator_fn(t) returns the full rate matrix; rows must sum to zero. The
    result is renormalized and row-stochastic within 1e-6. Entries dipping
    below -1e-9 mean the step size is too coarse for the rates involved.
    """
    dt = (t1 - t0) / fine_steps
    P = None
    for k in range(fine_steps):
        u = np.asarray(generator_fn(t0 + k * dt), dtype=np.float64)
        if P is None:
            if u.shape[0] > MAX_REFERENCE_STATES:
                raise ValidationError(
                    f"state space exceeds {MAX_REFERENCE_STATES}; enumeration intractable"
                )
            P = np.eye(u.shape[0])
        row_err = np.abs(u.sum(axis=1)).max()
        if row_err > 1e-8 * max(1.0, np.abs(u).max()):
            raise ValidationError(f"generator rows do not sum to zero (err {row_err})")
        P = P @ (np.eye(u.shape[0]) + dt * u)
        if P.min() < -1e-9:
            raise NumericalGuardError(
                "negative transition mass; raise fine_steps for these rates"
            )
        np.clip(P, 0.0, None, out=P)
    P /= P.sum(axis=1, keepdims=True)
    return P


def tv_distance(p, q):
    """Total variation distance 0.5 * sum |p - q| between two distributions."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValidationError(f"length mismatch {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def entropy_metric(posterior_rows):
    """Mean over positions of the row entropy in nats (0 ln 0 := 0)."""
    rows = np.asarray(posterior_rows, dtype=np.float64)
    terms = np.where(rows > 0.0, rows * np.log(np.maximum(rows, 1e-300)), 0.0)
    return float(-terms.sum(axis=-1).mean())


def token_accuracy(predicted, truth, changed_mask):
    """Fraction of changed positions predicted exactly."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    changed = np.asarray(changed_mask, dtype=bool)
    if predicted.shape != truth.shape or predicted.shape != changed.shape:
        raise ValidationError("accuracy inputs must share one shape")
    n = changed.sum()
    if n == 0:
        raise ValidationError("empty changed set: accuracy is undefined")
    return float((predicted[changed] == truth[changed]).mean())


class ExplicitReference:
    """Explicit distribution over fixed-length sequences, mixture-smoothed
    with the uniform distribution so every sequence scores finitely."""

    def __init__(self, seqs, probs, vocab_size, smoothing=1e-3):
        seqs = np.asarray(seqs, dtype=np.int64)
        probs = np.asarray(probs, dtype=np.float64)
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ValidationError("reference probabilities must sum to 1")
        self.L = seqs.shape[1]
        self.table = {tuple(int(v) for v in s): float(p) for s, p in zip(seqs, probs)}
        self.smoothing = smoothing
        self.log_floor_mass = smoothing / float(vocab_size) ** self.L
        self._seqs = seqs
        self._probs = probs

    def logprob(self, seq):
        p = self.table.get(tuple(int(v) for v in seq), 0.0)
        return float(np.log((1.0 - self.smoothing) * p + self.log_floor_mass))

    def sample(self, rng, n):
        idx = rng.choice(len(self._probs), size=n, p=self._probs)
        return self._seqs[idx]

    def entropy_per_token(self):
        """Entropy of the unsmoothed distribution, nats per token."""
        p = self._probs[self._probs > 0]
        return float(-(p * np.log(p)).sum() / self.L)


class TrigramReference:
    """Add-one smoothed trigram over token ids; lower orders cover the first
    two positions. Desk-scale stand-in for a fixed reference LM."""

    def __init__(self, vocab_size):
        self.V = vocab_size
        self.uni = np.zeros(vocab_size)
        self.bi = {}
        self.tri = {}

    def fit(self, blocks):
        for seq in blocks:
            seq = np.asarray(seq, dtype=np.int64)
            for i, tok in enumerate(seq):
                tok = int(tok)
                self.uni[tok] += 1.0
                if i >= 1:
                    key = int(seq[i - 1])
                    self.bi.setdefault(key, np.zeros(self.V))[tok] += 1.0
                if i >= 2:
                    key = (int(seq[i - 2]), int(seq[i - 1]))
                    self.tri.setdefault(key, np.zeros(self.V))[tok] += 1.0
        return self

    def _cond(self, table, key, tok):
        counts = table.get(key)
        total = counts.sum() if counts is not None else 0.0
        c = counts[tok] if counts is not None else 0.0
        return (c + 1.0) / (total + self.V)

    def logprob_tokens(self, seq):
        seq = np.asarray(seq, dtype=np.int64)
        lp = 0.0
        for i, tok in enumerate(seq):
            tok = int(tok)
            if i == 0:
                lp += np.log((self.uni[tok] + 1.0) / (self.uni.sum() + self.V))
            elif i == 1:
                lp += np.log(self._cond(self.bi, int(seq[0]), tok))
            else:
                lp += np.log(self._cond(self.tri, (int(seq[i - 2]), int(seq[i - 1])), tok))
        return float(lp)

    def logprob(self, seq):
        return self.logprob_tokens(seq)


def nll_eval(samples, reference):
    """Mean negative log-probability per token under the reference, nats."""
    samples = [np.asarray(s) for s in samples]
    if not samples:
        raise ValidationError("nll_eval needs at least one sample")
    L = samples[0].shape[0]
    total = -sum(reference.logprob(s) for s in samples)
    return float(total / (len(samples) * L))


# ---------------------------------------------------------------------------
# explicit transition laws on enumerable spaces


def transition_laws(probs, states, scale, h):
    """Per-position one-step transition laws (N, L, V) implied by the jump
    rule: mass 1 - J stays, the rest spreads over the off-diagonal posterior."""
    probs = np.asarray(probs, dtype=np.float64)
    states = np.asarray(states, dtype=np.int64)
    N, L = states.shape
    n_idx, l_idx = np.ogrid[:N, :L]
    p_cur = probs[n_idx, l_idx, states]
    scale = np.asarray(scale, dtype=np.float64)
    if scale.ndim == 1:
        scale = scale[:, None]
    lam = scale * (1.0 - p_cur)
    J = -np.expm1(-np.asarray(h) * lam)
    remainder = 1.0 - p_cur
    ratio = np.where(remainder > 1e-300, J / np.where(remainder > 0, remainder, 1.0), 0.0)
    laws = probs * ratio[:, :, None]
    laws[n_idx, l_idx, states] = 1.0 - J
    return laws


def enumerate_states(vocab_size, L):
    idx = np.arange(vocab_size**L)
    cols = [idx // vocab_size**i % vocab_size for i in range(L - 1, -1, -1)]
    return np.stack(cols, axis=1).astype(np.int64)


def joint_index(states, vocab_size):
    idx = np.zeros(states.shape[0], dtype=np.int64)
    for i in range(states.shape[1]):
        idx = idx * vocab_size + states[:, i]
    return idx


def factorized_generator(model, L, scheduler, t_clip=None, h_condition=None):
    """Joint-space rate matrix builder for an enumerable factorized chain.

    Returns generator_fn(t) -> (V**L, V**L); rates are scale(t) times the
    posterior direction at every position. t is clipped below 1 so schedules
    with a terminal singularity stay evaluable.
    """
    V = model.vocab.size
    states = enumerate_states(V, L)
    K = states.shape[0]
    idx = np.arange(K)
    strides = np.array([V ** (L - 1 - i) for i in range(L)])

    def generator_fn(t):
        tt = min(float(t), t_clip) if t_clip is not None else float(t)
        scale = g_instant(scheduler, tt)
        rows = model.probs(states, tt, h_condition)
        M = np.zeros((K, K))
        flat = M.ravel()
        for i in range(L):
            targets = idx[:, None] * K + idx[:, None] + (np.arange(V)[None, :] - states[:, i : i + 1]) * strides[i]
            np.add.at(flat, targets.ravel(), (scale * rows[:, i, :]).ravel())
            M[idx, idx] -= scale
        return M

    return generator_fn


def simulate_joint_marginals(model, init_states, budget, scheduler, scale_mode, seed):
    """Empirical joint-state distribution at t = 1 from a batch of jump-chain
    trajectories; one batched posterior evaluation per step."""
    from .denoiser import EnumeratedCache
    from .sampler import StepGrid, run_batch

    L = init_states.shape[1]
    cached = EnumeratedCache(model, L)
    stats = run_batch(init_states, cached, StepGrid(budget), scheduler, scale_mode, seed)
    V = model.vocab.size
    counts = np.bincount(joint_index(stats.final, V), minlength=V**L)
    return counts / counts.sum(), stats


def one_step_joint(model, z, t, h, scheduler, temperature=1.0):
    """Exact joint distribution of a single cumulative-scale jump update from
    state z: the per-position laws are independent given z."""
    z = np.asarray(z, dtype=np.int64)
    probs = model.probs(z[None], t, h, temperature=temperature)
    scale = resolve_scale(scheduler, "cumulative", t, h)
    laws = transition_laws(probs, z[None], scale, h)[0]
    joint = laws[0]
    for i in range(1, laws.shape[0]):
        joint = np.multiply.outer(joint, laws[i])
    return joint.ravel()


def composed_two_step_joint(model, z, t, h, scheduler, mid_laws=None, temperature=1.0):
    """Joint distribution of two chained h/2 updates from z, composed
    explicitly over the enumerable intermediate space."""
    z = np.asarray(z, dtype=np.int64)
    L = z.shape[0]
    V = model.vocab.size
    if mid_laws is None:
        mid_laws = midpoint_transition_laws(model, L, t, h, scheduler, temperature)
    probs = model.probs(z[None], t, h / 2.0, temperature=temperature)
    scale = resolve_scale(scheduler, "cumulative", t, h / 2.0)
    first = transition_laws(probs, z[None], scale, h / 2.0)[0]
    w = first[0]
    for i in range(1, L):
        w = np.multiply.outer(w, first[i])
    w = w.ravel()  # weight over intermediate joint states
    if L == 1:
        return w @ mid_laws[:, 0, :]
    if L == 2:
        return ((mid_laws[:, 0, :] * w[:, None]).T @ mid_laws[:, 1, :]).ravel()
    # general contraction, fine for tiny spaces
    out = np.zeros(V**L)
    states = enumerate_states(V, L)
    for s in range(states.shape[0]):
        block = mid_laws[s, 0]
        for i in range(1, L):
            block = np.multiply.outer(block, mid_laws[s, i])
        out += w[s] * block.ravel()
    return out


def midpoint_transition_laws(model, L, t, h, scheduler, temperature=1.0):
    """Transition laws for the second half step from every joint state,
    computed once and shared across probes."""
    V = model.vocab.size
    states = enumerate_states(V, L)
    probs = model.probs(states, t + h / 2.0, h / 2.0, temperature=temperature)
    scale = resolve_scale(scheduler, "cumulative", t + h / 2.0, h / 2.0)
    return transition_laws(probs, states, scale, h / 2.0)


def self_consistency_kl(model, probes, t, h, scheduler, temperature=1.0):
    """Mean KL(one step at h || two composed steps at h/2) over probe states."""
    probes = np.atleast_2d(np.asarray(probes, dtype=np.int64))
    L = probes.shape[1]
    mid = midpoint_transition_laws(model, L, t, h, scheduler, temperature)
    kls = []
    for z in probes:
        d1 = one_step_joint(model, z, t, h, scheduler, temperature)
        d2 = composed_two_step_joint(model, z, t, h, scheduler, mid_laws=mid,
                                     temperature=temperature)
        d2 = np.maximum(d2, 1e-12)
        d2 = d2 / d2.sum()
        mask = d1 > 0
        kls.append(float((d1[mask] * (np.log(d1[mask]) - np.log(d2[mask]))).sum()))
    return float(np.mean(kls))


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    batch_size: int = 128
    total_steps: int = 20_000
    learning_rate: float = 0.05
    seed: int = 0
    policy: StepPolicy = field(default_factory=StepPolicy)
    blend: BlendConfig = field(default_factory=BlendConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    ema_beta: float = 0.999
    scheduler: Scheduler = field(default_factory=Scheduler)
    source: SourceSpec = field(default_factory=SourceSpec)
    t_max: float = 0.99  # pretraining time-sampling cap

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune"):
            raise ValidationError(f"unknown phase {self.phase!r}")


@dataclass
class CurvePoint:
    step: int
    loss: float
    branch: str
    h: float


def _draw_h_vector(policy, step, rng, n):
    w = policy_weights(policy, step)
    p = w / w.sum()
    return STEP_GRID[rng.choice(len(STEP_GRID), size=n, p=p)]


def pretrain_loop(cfg, data, model):
    """Plain path-loss training with the instantaneous scale.

    The conditioning step size is drawn uniformly from the grid so the model
    stays well-defined at every h it may later be queried with; the loss does
    not depend on it. Returns (params, loss curve).
    """
    if cfg.phase != "pretrain":
        raise ValidationError("pretrain_loop needs phase == 'pretrain'")
    rng = spawn_rng(cfg.seed, 1)
    L = model.spec.seq_len
    curve = []
    for step in range(cfg.total_steps):
        x1 = data(rng, cfg.batch_size)
        x0 = sample_source(cfg.source, model.vocab, L, rng, n=cfg.batch_size)
        t = rng.random(cfg.batch_size) * cfg.t_max
        h = STEP_GRID[rng.integers(0, len(STEP_GRID), size=cfg.batch_size)]
        x_t = sample_conditional_xt(x0, x1, t, cfg.scheduler, rng)
        logits, cache = model.forward_with_cache(x_t, t, h)
        scale = g_instant(cfg.scheduler, t)
        loss_vec, dz = dfm_loss_grad(logits, x_t, x1, scale, mask_id=model.vocab.mask_id)
        loss = float(loss_vec.mean())
        if not np.isfinite(loss):
            raise NumericalGuardError(f"loss diverged at step {step}: {loss}")
        grads = model.backward(cache, dz / cfg.batch_size)
        _apply_sgd(model.params, grads, cfg.learning_rate)
        curve.append(CurvePoint(step, loss, "dfm", float(h.mean())))
    return model.params, curve


def finetune_loop(cfg, data, model, ema):
    """Budget-blended fine-tuning: tiny steps follow the path loss under the
    cumulative scale, large steps distill to the shortcut teacher; the EMA
    shadow refreshes after every optimizer step."""
    if cfg.phase != "finetune":
        raise ValidationError("finetune_loop needs phase == 'finetune'")
    rng = spawn_rng(cfg.seed, 2)
    L = model.spec.seq_len
    teacher_model = model.with_params(ema.shadow if cfg.teacher.use_ema else model.params)
    curve = []
    for step in range(cfg.total_steps):
        x1 = data(rng, cfg.batch_size)
        x0 = sample_source(cfg.source, model.vocab, L, rng, n=cfg.batch_size)
        h = _draw_h_vector(cfg.policy, step, rng, cfg.batch_size)
        t = rng.random(cfg.batch_size) * (1.0 - h)
        x_t = sample_conditional_xt(x0, x1, t, cfg.scheduler, rng)

        logits, cache = model.forward_with_cache(x_t, t, h)
        tea = teacher_estimate(cfg.teacher, x_t, t, h, teacher_model, cfg.scheduler, step=step)

        gbar = g_cumulative_vec(cfg.scheduler, t, h)
        dfm_vec, dz_dfm = dfm_loss_grad(logits, x_t, x1, gbar, mask_id=model.vocab.mask_id)
        dist_vec, dz_dist = kl_distill_grad(tea, logits, T=cfg.blend.temperature,
                                            mask_id=model.vocab.mask_id)
        m = h < cfg.blend.tau
        loss_vec = np.where(m, dfm_vec, dist_vec)
        dz = np.where(m[:, None, None], dz_dfm, dz_dist)
        loss = float(loss_vec.mean())
        if not np.isfinite(loss):
            raise NumericalGuardError(f"loss diverged at step {step}: {loss}")
        grads = model.backward(cache, dz / cfg.batch_size)
        _apply_sgd(model.params, grads, cfg.learning_rate)
        ema.update(model.params)
        branch = "dfm" if m.all() else ("dist" if not m.any() else "mixed")
        curve.append(CurvePoint(step, loss, branch, float(h.mean())))
    return model.params, curve


def _apply_sgd(params, grads, lr):
    for name, grad in grads.items():
        params[name] -= lr * grad


def checkerboard_batcher(spec):
    from .path_data import checkerboard_sample

    return lambda rng, n: checkerboard_sample(spec, rng, n)


def corpus_batcher(blocks):
    arr = np.stack(blocks)

    def draw(rng, n):
        return arr[rng.integers(0, arr.shape[0], size=n)]

    return draw
