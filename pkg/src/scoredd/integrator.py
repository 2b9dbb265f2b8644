"""Reverse-time Euler (flow ODE) and Euler-Maruyama (reverse SDE) integration.

A step from ``t_i`` to ``t_{i+1} = t_i - dt`` is applied in the literal
three-stage order of the pseudocode::

    x <- x - f(t_i) x dt
    x <- x + c g(t_i)^2 score(x_start, t_i) dt        c = 1/2 (ode) or 1 (sde)
    x <- x + g(t_i) sqrt(dt) n                        sde only

with the score always evaluated at the step-start state.  The whole-score
branch uses the network, the self-score branch uses ``-z/sigma`` and
re-derives ``z`` after every step.  Both branches share the helper below, so
a network that returns the self-score reproduces the self branch bit for bit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from .sde import DomainError, SdeSpec, drift_diffusion, grid_index, marginal_params, noise_of, perturb, prior_sample, time_grid

MODES = ("ode", "sde")
Rng = Union[np.random.Generator, Sequence[np.random.Generator]]


class IntegrationDivergence(FloatingPointError):
    def __init__(self, step, t):
        super().__init__(f"non-finite state at step {step} (t={t!r})")
        self.step = step
        self.t = t


def sample_streams(seed: int, sample_ids, scale_index: int = 0) -> List[np.random.Generator]:
    """Independent counter-based (Philox) streams keyed by (seed, sample, scale).

    Results depend only on the key, never on the order in which samples or
    scales are processed.
    """
    return [np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(i), int(scale_index)])))
            for i in sample_ids]


def draw_normal(rng: Rng, shape):
    """Standard normals of ``shape``; a list of streams gives one row per stream."""
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape)
    rng = list(rng)
    if len(rng) != shape[0]:
        raise ValueError(f"{len(rng)} streams for a batch of {shape[0]}")
    return np.stack([g.standard_normal(shape[1:]) for g in rng]) if rng else np.zeros(shape)


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def _euler(spec, x, score, t_i, dt, mode, n):
    f, g = drift_diffusion(spec, t_i)
    x_next = x - f * x * dt
    if mode == "ode":
        x_next = x_next + 0.5 * g * g * score * dt
    else:
        x_next = x_next + g * g * score * dt
        x_next = x_next + g * math.sqrt(dt) * n
    return x_next


def _guard(x, step, t):
    if not np.all(np.isfinite(x)):
        raise IntegrationDivergence(step, t)
    return x


def flow_ode_step_whole(spec: SdeSpec, net, x, t_i, dt):
    """One Euler step of the probability-flow ODE driven by the network score."""
    if not dt > 0:
        raise ValueError("dt must be positive (reverse time)")
    return _euler(spec, x, net.forward(x, t_i), t_i, dt, "ode", None)


def reverse_sde_step_whole(spec: SdeSpec, net, x, t_i, dt, n):
    """One Euler-Maruyama step of the reverse SDE driven by the network score."""
    if not dt > 0:
        raise ValueError("dt must be positive (reverse time)")
    return _euler(spec, x, net.forward(x, t_i), t_i, dt, "sde", n)


def self_step(spec: SdeSpec, x_self, x0_ref, z, t_i, dt, mode="ode", n=None, t_next=None):
    """Advance the self-score branch one step and return ``(x_next, z_next)``.

    ``t_next`` defaults to ``t_i - dt``; pass the exact grid value when
    stepping along :func:`~scoredd.sde.time_grid`.
    """
    _check_mode(mode)
    t_next = t_i - dt if t_next is None else t_next
    if t_next < spec.epsilon * (1 - 1e-12):
        raise DomainError(f"self step would end at t={t_next!r} < epsilon={spec.epsilon}")
    _, sigma = marginal_params(spec, t_i)
    x_next = _euler(spec, x_self, -z / sigma, t_i, dt, mode, n)
    return x_next, noise_of(spec, x_next, x0_ref, t_next)


@dataclass
class TrajectoryPair:
    """Coupled whole-score (``x_whole``) and self-score (``x_self``) states."""

    x_whole: np.ndarray
    x_self: np.ndarray
    z: np.ndarray
    x0_ref: np.ndarray
    t_current: float
    index: int
    nfe: int = 0
    noise_log: Optional[list] = None
    history: Optional[list] = None

    def record(self, step):
        if self.history is not None:
            self.history.append((step, self.t_current, self.x_whole.copy(), self.x_self.copy()))


def init_pair(spec: SdeSpec, x0, t_start, rng: Rng, record=False, log_noise=False) -> TrajectoryPair:
    x0 = np.asarray(x0, dtype=np.float64)
    k = grid_index(spec, t_start)
    t = time_grid(spec)[k]
    z_draw = draw_normal(rng, x0.shape)
    x_t = perturb(spec, x0, t, z_draw)
    # z re-derived from the state so both branches see identical floats
    z = noise_of(spec, x_t, x0, t)
    pair = TrajectoryPair(x_t.copy(), x_t.copy(), z, x0, t, k, noise_log=[] if log_noise else None,
                          history=[] if record else None)
    pair.record(0)
    return pair


def advance_pair(spec: SdeSpec, net, pair: TrajectoryPair, steps: int, mode: str, rng: Rng = None,
                 stop_index: int = 0) -> TrajectoryPair:
    """Advance both branches ``steps`` grid steps (never past ``stop_index``)."""
    _check_mode(mode)
    grid = time_grid(spec)
    if pair.index - steps < stop_index:
        raise DomainError(f"grid underrun: cannot take {steps} steps from index {pair.index}")
    for i in range(steps):
        k = pair.index
        t_i, t_next = grid[k], grid[k - 1]
        dt = t_i - t_next
        n = None
        if mode == "sde":
            n = draw_normal(rng, pair.x_whole.shape)
            if pair.noise_log is not None:
                pair.noise_log.append(n)
        score = net.forward(pair.x_whole, t_i)
        pair.nfe += 1
        pair.x_whole = _guard(_euler(spec, pair.x_whole, score, t_i, dt, mode, n), i, t_i)
        pair.x_self, pair.z = self_step(spec, pair.x_self, pair.x0_ref, pair.z, t_i, dt, mode, n, t_next=t_next)
        _guard(pair.x_self, i, t_i)
        pair.index = k - 1
        pair.t_current = t_next
        pair.record(i + 1)
    return pair


def run_pair(spec: SdeSpec, net, x0, t_start, r: int, mode: str, rng: Rng, record=False, log_noise=False):
    """Perturb ``x0`` to ``t_start`` and run ``r`` coupled reverse steps.

    ``rng`` is one generator for the whole batch or one per sample; ``z`` is
    drawn first, then one shared ``n`` per step (sde mode).
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    pair = init_pair(spec, x0, t_start, rng, record=record, log_noise=log_noise)
    return advance_pair(spec, net, pair, r, mode, rng)


def reverse_from(spec: SdeSpec, net, x, index: int, mode: str, rng: Rng = None, stop_index: int = 0):
    """Whole-score reverse pass from grid ``index`` down to ``stop_index``."""
    _check_mode(mode)
    grid = time_grid(spec)
    for k in range(index, stop_index, -1):
        t_i, dt = grid[k], grid[k] - grid[k - 1]
        n = draw_normal(rng, x.shape) if mode == "sde" else None
        x = _guard(_euler(spec, x, net.forward(x, t_i), t_i, dt, mode, n), index - k, t_i)
    return x


def generate(spec: SdeSpec, net, shape, rng: np.random.Generator, mode="ode"):
    """Sample by integrating from the prior over the whole grid (``S - 1`` NFE)."""
    x = prior_sample(spec, shape, rng)
    return reverse_from(spec, net, x, spec.steps - 1, mode, rng)


def reconstruct(spec: SdeSpec, net, x0, t_start, rng: Rng, mode="ode"):
    """Perturb ``x0`` to ``t_start`` and integrate the whole-score branch to ``epsilon``."""
    x0 = np.asarray(x0, dtype=np.float64)
    k = grid_index(spec, t_start)
    x = perturb(spec, x0, time_grid(spec)[k], draw_normal(rng, x0.shape))
    return reverse_from(spec, net, x, k, mode, rng)


class SelfScoreStub:
    """A "network" that returns the exact self-score for a fixed reference batch.

    Plugged in as the whole-score model it makes both branches coincide.  Its
    single tap (id 0) is the score itself so feature pipelines also run.
    """

    tap_ids = (0,)

    def __init__(self, spec: SdeSpec, x0_ref):
        self.spec = spec
        self.x0_ref = np.asarray(x0_ref, dtype=np.float64)
        self.nfe = 0

    def forward(self, x, t):
        from .sde import self_score

        self.nfe += 1
        return self_score(self.spec, x, self.x0_ref, t)

    __call__ = forward

    def bind(self, x0_ref):
        """A stub for another reference batch (used when detection runs in chunks)."""
        return SelfScoreStub(self.spec, x0_ref)

    def forward_with_taps(self, x, t, taps=None):
        s = self.forward(x, t)
        taps = self.tap_ids if taps is None else tuple(taps)
        for k in taps:
            if k not in self.tap_ids:
                raise KeyError(f"unknown tap layer id {k}")
        return s, [(k, s) for k in taps]


def write_trajectory_csv(path, pairs_or_history, label_rows=None) -> None:
    """Write ``branch,step,t,coord0,coord1`` rows for a 2-D trajectory history.

    ``pairs_or_history`` is a :class:`TrajectoryPair` recorded with
    ``record=True`` (single sample) or its ``history`` list.
    """
    history = pairs_or_history.history if isinstance(pairs_or_history, TrajectoryPair) else pairs_or_history
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["branch", "step", "t", "coord0", "coord1"])
        for branch, col in (("whole", 2), ("self", 3)):
            for entry in history:
                x = np.asarray(entry[col]).reshape(-1)
                w.writerow([branch, entry[0], repr(float(entry[1])), repr(float(x[0])), repr(float(x[1]))])
