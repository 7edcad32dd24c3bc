"""Path schedules and CTMC rate construction.

A scheduler kappa maps [0,1] onto [0,1] monotonically and controls how fast
probability flows from the source to the target. Two scale factors multiply
the denoiser direction into rates:

  instantaneous  g(t)      = kappa_dot(t) / (1 - kappa(t))
  cumulative     gbar(t,h) = (1/h) * ln[(1 - kappa(t)) / (1 - kappa(t_end))]

where t_end = min(t + h, 1 - clamp_epsilon). The cumulative form averages the
instantaneous scale over the whole step, which is what makes single large
steps move the right amount of probability instead of stalling near t = 0.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ValidationError

SCHEDULER_KINDS = ("linear", "quadratic")
SCALE_MODES = ("instantaneous", "cumulative")


@dataclass(frozen=True)
class Scheduler:
    """Monotone path schedule kappa with a clamp keeping log ratios finite.

    clamp_epsilon is the gap enforced so kappa is never evaluated at exactly 1
    inside a log ratio; it must lie in (0, 0.01].
    """

    kind: str = "linear"
    clamp_epsilon: float = 1e-4

    def __post_init__(self):
        if self.kind not in SCHEDULER_KINDS:
            raise ValidationError(f"unknown scheduler kind {self.kind!r}")
        if not (0.0 < self.clamp_epsilon <= 0.01):
            raise ValidationError(
                f"clamp_epsilon must be in (0, 0.01], got {self.clamp_epsilon}"
            )


@dataclass(frozen=True)
class TimeInterval:
    """A step [t, t+h] with t in [0,1), h in (0,1], t + h <= 1."""

    t: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.t < 1.0):
            raise ValidationError(f"t must lie in [0, 1), got {self.t}")
        if not (0.0 < self.h <= 1.0):
            raise ValidationError(f"h must lie in (0, 1], got {self.h}")
        # small slack absorbs float noise from grid arithmetic like s/S + 1/S
        if self.t + self.h > 1.0 + 1e-9:
            raise ValidationError(f"t + h must be <= 1, got {self.t + self.h}")


def kappa_eval(scheduler, t):
    """Return (kappa(t), kappa_dot(t)). Accepts scalars or arrays in [0,1]."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError(f"t outside [0, 1]: {t}")
    if scheduler.kind == "linear":
        kappa, kdot = t, np.ones_like(t)
    else:  # quadratic
        kappa, kdot = t * t, 2.0 * t
    if kappa.ndim == 0:
        return float(kappa), float(kdot)
    return kappa, kdot


def g_instant(scheduler, t):
    """Instantaneous scale kappa_dot / (1 - kappa); requires t < 1 - clamp."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr >= 1.0 - scheduler.clamp_epsilon) or np.any(t_arr < 0.0):
        raise DomainError(
            f"g_instant needs 0 <= t < 1 - {scheduler.clamp_epsilon}, got {t}"
        )
    kappa, kdot = kappa_eval(scheduler, t_arr)
    out = kdot / (1.0 - kappa)
    return float(out) if np.ndim(out) == 0 else out


def g_cumulative(scheduler, interval):
    """Interval-averaged scale over [t, t+h], endpoint clamped away from 1.

    Computed as [ln(1-kappa(t)) - ln(1-kappa(t_end))] / h so nothing cancels
    catastrophically when kappa(t_end) is close to 1.
    """
    t, h = interval.t, interval.h
    if t >= 1.0 - scheduler.clamp_epsilon:
        raise DomainError(
            f"interval starts inside the clamp zone: t={t}, clamp={scheduler.clamp_epsilon}"
        )
    t_end = min(t + h, 1.0 - scheduler.clamp_epsilon)
    k0, _ = kappa_eval(scheduler, t)
    k1, _ = kappa_eval(scheduler, t_end)
    return (np.log1p(-k0) - np.log1p(-k1)) / h


def g_cumulative_vec(scheduler, t, h):
    """Vectorized cumulative scale for per-sample (t, h) arrays."""
    t = np.asarray(t, dtype=np.float64)
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), t.shape)
    if np.any(t < 0.0) or np.any(t >= 1.0 - scheduler.clamp_epsilon):
        raise DomainError("t must lie in [0, 1 - clamp_epsilon)")
    if np.any(h <= 0.0) or np.any(t + h > 1.0 + 1e-9):
        raise DomainError("need h > 0 and t + h <= 1")
    t_end = np.minimum(t + h, 1.0 - scheduler.clamp_epsilon)
    k0, _ = kappa_eval(scheduler, t)
    k1, _ = kappa_eval(scheduler, t_end)
    return (np.log1p(-k0) - np.log1p(-k1)) / h


def resolve_scale(scheduler, mode, t, h):
    """Scale used by a jump update at (t, h) under the given mode."""
    if mode == "instantaneous":
        return g_instant(scheduler, t)
    if mode == "cumulative":
        return g_cumulative(scheduler, TimeInterval(float(t), float(h)))
    raise ValidationError(f"unknown scale mode {mode!r}")


def rate_row_from_posterior(posterior, current_token, scale):
    """One factorized CTMC rate row: scale * (posterior - onehot(current)).

    Off-diagonals are >= 0, the diagonal is minus the exit rate, and the row
    sums to zero. The posterior is renormalized defensively so the zero-sum
    property holds to float precision even when the input sums to 1 only
    within the documented 1e-6.
    """
    p = np.asarray(posterior, dtype=np.float64)
    if p.ndim != 1:
        raise ValidationError("posterior must be a 1-D probability vector")
    total = p.sum()
    if abs(total - 1.0) > 1e-6 or np.any(p < 0.0):
        raise ValidationError(f"posterior not normalized (sum={total})")
    if scale < 0.0:
        raise ValidationError(f"scale must be >= 0, got {scale}")
    if not (0 <= current_token < p.shape[0]):
        raise ValidationError(f"current token {current_token} outside vocabulary")
    p = p / total
    row = scale * p
    row[current_token] = scale * (p[current_token] - 1.0)
    return row


def exit_rate(posterior, current_token, scale):
    """lambda = scale * (1 - posterior[current]); equals -rate_row[current]."""
    p = np.asarray(posterior, dtype=np.float64)
    return scale * (1.0 - p[current_token] / p.sum())
