"""Shortcut teachers: interval-averaged logits over [t, t+h] and the EMA
parameter registry that keeps distillation targets slowly varying.

Both estimators evaluate the model at sub-times of the interval, advancing
the state between evaluations with the same jump law the sampler uses, and
return a fixed-weight average of the logits: (1,1)/2 for the two-point
estimate, (1,2,2,1)/6 for the four-point one. The internal sub-step is always
h/2 and it is also what the model is conditioned on.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .kinetics import TimeInterval, g_cumulative, g_cumulative_vec
from .sampler import jump_update
from .util import spawn_rng

TEACHER_KINDS = ("rk2", "rk4")


@dataclass(frozen=True)
class TeacherConfig:
    kind: str = "rk4"
    use_ema: bool = True
    teacher_seed: int = 0

    def __post_init__(self):
        if self.kind not in TEACHER_KINDS:
            raise ValidationError(f"unknown teacher kind {self.kind!r}")


class EmaRegistry:
    """Exponential moving average of student parameters.

    shadow <- beta * shadow + (1 - beta) * student, elementwise; the shadow is
    never touched by gradient steps.
    """

    def __init__(self, params, beta=0.999):
        if not (0.0 <= beta < 1.0):
            raise ValidationError(f"beta must lie in [0, 1), got {beta}")
        self.beta = beta
        self.shadow = {k: v.copy() for k, v in params.items()}

    def update(self, params):
        if set(params) != set(self.shadow):
            raise ValidationError("parameter names do not match the registry")
        for k, v in params.items():
            if v.shape != self.shadow[k].shape:
                raise ValidationError(f"shape mismatch for {k}")
            self.shadow[k] *= self.beta
            self.shadow[k] += (1.0 - self.beta) * v


def ema_update(registry, student_params):
    registry.update(student_params)
    return registry


def _half_step_jump(states, probs, t, h_half, scheduler, rng):
    """Advance internal teacher states by h/2 using the cumulative scale at
    (t, h/2), matching the update rule the student will face at sampling."""
    t_arr = np.asarray(t, dtype=np.float64)
    if t_arr.ndim == 0:
        scale = g_cumulative(scheduler, TimeInterval(float(t_arr), float(h_half)))
    else:
        scale = g_cumulative_vec(scheduler, t_arr, h_half)
    return jump_update(states, probs, scale, h_half, rng, frozen=None)


def _as_batch(x_t, t, h):
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.int64))
    n = x_t.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), (n,))
    if np.any(t + h > 1.0 + 1e-9):
        raise ValidationError("teacher interval must satisfy t + h <= 1")
    return x_t, t, h


def rk4_estimate(x_t, t, h, teacher_model, scheduler, rng):
    """Four-point averaged logits (1,2,2,1)/6 over [t, t+h].

    Exactly four model evaluations and three internal jump applications; the
    model is conditioned on the sub-step h/2 throughout.
    """
    x_t, t, h = _as_batch(x_t, t, h)
    hp = h / 2.0
    t_mid, t_next = t + hp, t + h

    l1 = teacher_model.evaluate(x_t, t, hp)
    x1 = _half_step_jump(x_t, teacher_model.probs_from(l1), t, hp, scheduler, rng)
    l2 = teacher_model.evaluate(x1, t_mid, hp)
    x2 = _half_step_jump(x1, teacher_model.probs_from(l2), t_mid, hp, scheduler, rng)
    l3 = teacher_model.evaluate(x2, t_mid, hp)
    x3 = _half_step_jump(x2, teacher_model.probs_from(l3), t_mid, hp, scheduler, rng)
    l4 = teacher_model.evaluate(x3, t_next, hp)
    return (l1 + 2.0 * l2 + 2.0 * l3 + l4) / 6.0


def rk2_estimate(x_t, t, h, teacher_model, scheduler, rng):
    """Two-point averaged logits (1,1)/2: one evaluation at (x_t, t), one at
    the half-step state; two model evaluations total."""
    x_t, t, h = _as_batch(x_t, t, h)
    hp = h / 2.0
    l1 = teacher_model.evaluate(x_t, t, hp)
    x_mid = _half_step_jump(x_t, teacher_model.probs_from(l1), t, hp, scheduler, rng)
    l2 = teacher_model.evaluate(x_mid, t + hp, hp)
    return (l1 + l2) / 2.0


def teacher_estimate(config, x_t, t, h, teacher_model, scheduler, step=0):
    """Dispatch on the configured kind with a per-step derived seed so targets
    are reproducible despite the internal stochastic jumps."""
    rng = spawn_rng(config.teacher_seed, 0x7EAC, step)
    fn = rk4_estimate if config.kind == "rk4" else rk2_estimate
    return fn(x_t, t, h, teacher_model, scheduler, rng)
