"""Training objectives: the path loss, the distillation loss, budget-aware
blending, and the training-time step-size sampling policies."""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .util import log_softmax, softmax

LOG_CLAMP = -30.0  # floor for the target log-probability term

# step-size grid: strictly increasing powers of two, largest value 1
STEP_GRID = 2.0 ** np.arange(-10, 1)
POLICY_KINDS = ("TB10", "TB20", "PU", "G", "AG")


@dataclass(frozen=True)
class StepPolicy:
    kind: str = "TB20"
    anneal_interval: int = 10_000  # AG only: doubling period
    cap: float = 2.0**10

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValidationError(f"unknown step policy {self.kind!r}")


@dataclass(frozen=True)
class BlendConfig:
    tau: float = 2.0**-9
    temperature: float = 1.0

    def __post_init__(self):
        if not (STEP_GRID[0] <= self.tau <= STEP_GRID[-1]):
            raise ValidationError(f"tau {self.tau} outside the step grid range")


def dfm_loss(posterior_rows, x_t, x_1, scale):
    """Mean over positions of the per-token path loss

        -scale * [p(x_t | row) - delta + (1 - delta) * log p(x_1 | row)]

    with delta = [x_t == x_1] and the log clamped below at -30. Nonnegative on
    normalized rows (log b <= b - 1), zero when the rows agree one-hot.

    Inputs may carry a leading batch axis; scale may then be per sample.
    """
    rows = np.asarray(posterior_rows, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.int64)
    x_1 = np.asarray(x_1, dtype=np.int64)
    squeeze = rows.ndim == 2
    if squeeze:
        rows, x_t, x_1 = rows[None], x_t[None], x_1[None]
    B, L, _ = rows.shape
    n_idx, l_idx = np.ogrid[:B, :L]
    p_cur = rows[n_idx, l_idx, x_t]
    p_tar = rows[n_idx, l_idx, x_1]
    delta = (x_t == x_1).astype(np.float64)
    log_tar = np.maximum(np.log(np.maximum(p_tar, 1e-300)), LOG_CLAMP)
    scale = np.asarray(scale, dtype=np.float64)
    if scale.ndim == 1:
        scale = scale[:, None]
    per_token = -scale * (p_cur - delta + (1.0 - delta) * log_tar)
    per_sample = per_token.mean(axis=1)
    return float(per_sample[0]) if squeeze else per_sample


def dfm_loss_grad(posterior_logits, x_t, x_1, scale, mask_id=None):
    """(loss per sample, dloss/dlogits) for softmax-parameterized rows.

    The gradient matches dfm_loss applied to softmax(logits) with the mask
    column excluded from the softmax when mask_id is given. The clamp at -30
    zeroes the log-term gradient wherever it is active.
    """
    z = np.asarray(posterior_logits, dtype=np.float64)
    if mask_id is not None:
        z = z.copy()
        z[..., mask_id] = -1e30
    p = softmax(z)
    B, L, _ = p.shape
    n_idx, l_idx = np.ogrid[:B, :L]
    x_t = np.asarray(x_t, dtype=np.int64)
    x_1 = np.asarray(x_1, dtype=np.int64)
    p_cur = p[n_idx, l_idx, x_t]
    p_tar = p[n_idx, l_idx, x_1]
    delta = (x_t == x_1).astype(np.float64)
    log_tar_raw = np.log(np.maximum(p_tar, 1e-300))
    log_tar = np.maximum(log_tar_raw, LOG_CLAMP)
    scale = np.asarray(scale, dtype=np.float64)
    scale_col = scale[:, None] if scale.ndim == 1 else np.broadcast_to(scale, (B, 1))

    per_token = -scale_col * (p_cur - delta + (1.0 - delta) * log_tar)
    loss = per_token.mean(axis=1)

    # d p_cur / dz_b = p_cur * (onehot(x_t) - p); d log p_tar / dz_b = onehot(x_1) - p
    active = (log_tar_raw > LOG_CLAMP).astype(np.float64)
    coeff_cur = p_cur  # multiplies (onehot(x_t) - p)
    coeff_tar = (1.0 - delta) * active  # multiplies (onehot(x_1) - p)
    dz = -(coeff_cur + coeff_tar)[:, :, None] * p
    np.add.at(dz, (n_idx, l_idx, x_t), coeff_cur)
    np.add.at(dz, (n_idx, l_idx, x_1), coeff_tar)
    dz *= -scale_col[:, :, None] / L
    if mask_id is not None:
        dz[..., mask_id] = 0.0
    return loss, dz


def kl_distill(teacher_logits, student_logits, T=1.0):
    """Mean over positions of KL(softmax(teacher/T) || softmax(student/T)).

    The teacher side is a constant (stop-gradient); use kl_distill_grad for
    the student gradient.
    """
    q = softmax(np.asarray(teacher_logits, dtype=np.float64) / T)
    log_q = log_softmax(np.asarray(teacher_logits, dtype=np.float64) / T)
    log_p = log_softmax(np.asarray(student_logits, dtype=np.float64) / T)
    kl = (q * (log_q - log_p)).sum(axis=-1)
    return float(np.mean(kl, axis=-1)) if kl.ndim == 1 else kl.mean(axis=-1)


def kl_distill_grad(teacher_logits, student_logits, T=1.0, mask_id=None):
    """(loss per sample, dloss/dstudent_logits); gradients never flow to the
    teacher. With a mask id both softmaxes exclude that column."""
    zt = np.asarray(teacher_logits, dtype=np.float64) / T
    zs = np.asarray(student_logits, dtype=np.float64) / T
    if mask_id is not None:
        zt = zt.copy()
        zs = zs.copy()
        zt[..., mask_id] = -1e30
        zs[..., mask_id] = -1e30
    q = softmax(zt)
    p = softmax(zs)
    log_q = log_softmax(zt)
    log_p = log_softmax(zs)
    kl = (np.where(q > 0, q * (log_q - log_p), 0.0)).sum(axis=-1)
    loss = kl.mean(axis=-1)
    L = zs.shape[-2]
    dz = (p - q) / (T * L)
    if mask_id is not None:
        dz[..., mask_id] = 0.0
    return loss, dz


def blended_loss(h, dfm, dist, cfg):
    """Per-sample branch switch: the path loss for h < tau, else the
    distillation loss; strictly piecewise, no mixing weights."""
    return dfm if h < cfg.tau else dist


def policy_weights(policy, training_step=0):
    """Unnormalized weights over STEP_GRID (ascending; largest step last)."""
    n = len(STEP_GRID)
    if policy.kind in ("TB10", "TB20"):
        w = np.ones(n)
        w[-1] = 10.0 if policy.kind == "TB10" else 20.0
    elif policy.kind == "PU":
        w = np.ones(n)
    elif policy.kind == "G":
        w = 2.0 ** np.arange(n)
    else:  # AG: geometric start, sub-cap weights double every interval
        doublings = training_step // policy.anneal_interval
        w = np.minimum(2.0 ** (np.arange(n) + doublings), policy.cap)
    return w


def sample_h(policy, training_step, rng):
    """Draw a step size from the grid under the policy's current weights."""
    w = policy_weights(policy, training_step)
    p = w / w.sum()
    return float(STEP_GRID[rng.choice(len(STEP_GRID), p=p)])
