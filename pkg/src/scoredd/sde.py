"""Forward SDE families (VE, VP, sub-VP) and their closed-form transition kernels.

All three families have a drift linear in ``x``, so ``p_0t(x(t) | x(0))`` is the
Gaussian ``N(mu(t) x(0), sigma(t)^2 I)``.  Every function accepts a scalar
time or an array of times (one per sample) and broadcasts accordingly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

KINDS = ("VE", "VP", "SubVP")


class DomainError(ValueError):
    """Raised when a time lies outside the admissible interval."""


@dataclass(frozen=True)
class SdeSpec:
    """One of the three SDE families plus its time discretisation.

    ``sigma_min``/``sigma_max`` are only used by VE, ``beta_min``/``beta_max``
    only by VP and SubVP.  ``steps`` is the number of points of the uniform
    grid on ``[epsilon, 1]``.
    """

    kind: str = "VE"
    sigma_min: float = 0.1
    sigma_max: float = 20.0
    beta_min: float = 0.1
    beta_max: float = 20.0
    steps: int = 1000
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown SDE kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "VE":
            if not 0 < self.sigma_min < self.sigma_max:
                raise ValueError("VE requires 0 < sigma_min < sigma_max")
        elif not 0 < self.beta_min < self.beta_max:
            raise ValueError(f"{self.kind} requires 0 < beta_min < beta_max")
        if int(self.steps) != self.steps or self.steps < 2:
            raise ValueError("steps must be an integer >= 2")
        if not 0 < self.epsilon < 1.0 / self.steps:
            raise ValueError("epsilon must lie in (0, 1/steps)")

    @classmethod
    def ve(cls, sigma_min=0.1, sigma_max=20.0, steps=1000, epsilon=1e-5):
        return cls("VE", sigma_min=sigma_min, sigma_max=sigma_max, steps=steps, epsilon=epsilon)

    @classmethod
    def vp(cls, beta_min=0.1, beta_max=20.0, steps=1000, epsilon=1e-5):
        return cls("VP", beta_min=beta_min, beta_max=beta_max, steps=steps, epsilon=epsilon)

    @classmethod
    def subvp(cls, beta_min=0.1, beta_max=20.0, steps=1000, epsilon=1e-5):
        return cls("SubVP", beta_min=beta_min, beta_max=beta_max, steps=steps, epsilon=epsilon)

    def replace(self, **changes) -> "SdeSpec":
        fields = dict(self.__dict__)
        fields.update(changes)
        return SdeSpec(**fields)

    @property
    def dt(self) -> float:
        """Spacing of the uniform time grid (the integrator step)."""
        return (1.0 - self.epsilon) / (self.steps - 1)


def _check_time(t, lower=0.0, inclusive=False):
    ta = np.asarray(t, dtype=np.float64)
    bad = (ta < lower) if inclusive else (ta <= lower)
    if np.any(bad) or np.any(ta > 1.0) or not np.all(np.isfinite(ta)):
        raise DomainError(f"time {t!r} outside ({lower}, 1]")
    return ta


def _beta_integral(spec: SdeSpec, t):
    return spec.beta_min * t + 0.5 * t * t * (spec.beta_max - spec.beta_min)


def _beta(spec: SdeSpec, t):
    return spec.beta_min + t * (spec.beta_max - spec.beta_min)


def _ve_sigma(spec: SdeSpec, t):
    return spec.sigma_min * (spec.sigma_max / spec.sigma_min) ** t


def _unwrap(a):
    return float(a) if np.ndim(a) == 0 else a


def marginal_params(spec: SdeSpec, t) -> Tuple:
    """Return ``(mu(t), sigma(t))`` of the transition kernel ``p_0t``."""
    t = _check_time(t)
    if spec.kind == "VE":
        mu = np.ones_like(t)
        sigma = _ve_sigma(spec, t)
    else:
        integral = _beta_integral(spec, t)
        mu = np.exp(-0.5 * integral)
        if spec.kind == "VP":
            sigma = np.sqrt(-np.expm1(-integral))
        else:
            sigma = -np.expm1(-integral)
    return _unwrap(mu), _unwrap(sigma)


def drift_diffusion(spec: SdeSpec, t) -> Tuple:
    """Return ``(f(t), g(t))`` with drift ``f(t) x`` and diffusion ``g(t)``."""
    t = _check_time(t)
    if spec.kind == "VE":
        f = np.zeros_like(t)
        g = _ve_sigma(spec, t) * math.sqrt(2.0 * math.log(spec.sigma_max / spec.sigma_min))
    else:
        beta = _beta(spec, t)
        f = -0.5 * beta
        if spec.kind == "VP":
            g = np.sqrt(beta)
        else:
            g = np.sqrt(-beta * np.expm1(-2.0 * _beta_integral(spec, t)))
    return _unwrap(f), _unwrap(g)


def _per_sample(coeff, ndim):
    """Reshape a per-sample coefficient array so it broadcasts over a batch."""
    c = np.asarray(coeff, dtype=np.float64)
    if c.ndim == 0:
        return c
    return c.reshape(c.shape + (1,) * (ndim - c.ndim))


def perturb(spec: SdeSpec, x0, t, z):
    """Sample ``x(t) = mu(t) x0 + sigma(t) z`` for a given standard normal ``z``."""
    x0 = np.asarray(x0, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x0.shape != z.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs z {z.shape}")
    mu, sigma = marginal_params(spec, t)
    return _per_sample(mu, x0.ndim) * x0 + _per_sample(sigma, x0.ndim) * z


def noise_of(spec: SdeSpec, x_t, x0, t):
    """Recover ``z(t) = (x(t) - mu(t) x0) / sigma(t)`` from a perturbed state."""
    x_t = np.asarray(x_t, dtype=np.float64)
    _check_time(t, spec.epsilon, inclusive=True)
    mu, sigma = marginal_params(spec, t)
    return (x_t - _per_sample(mu, x_t.ndim) * x0) / _per_sample(sigma, x_t.ndim)


def self_score(spec: SdeSpec, x_t, x0, t):
    """Score of the transition kernel conditioned on ``x0``: ``-z(t) / sigma(t)``.

    Computed as ``-((x_t - mu x0) / sigma) / sigma`` so that it matches the
    self-branch update of the integrator operation for operation.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if x_t.shape != x0.shape:
        raise ValueError(f"shape mismatch: x_t {x_t.shape} vs x0 {x0.shape}")
    try:
        _check_time(t, spec.epsilon, inclusive=True)
    except DomainError:
        raise DomainError(f"self-score needs t >= epsilon={spec.epsilon}, got {t!r}") from None
    _, sigma = marginal_params(spec, t)
    sigma = _per_sample(sigma, x_t.ndim)
    z = noise_of(spec, x_t, x0, t)
    return -z / sigma


def prior_sample(spec: SdeSpec, shape, rng: np.random.Generator):
    """Draw from the prior reached at ``t = 1``."""
    scale = spec.sigma_max if spec.kind == "VE" else 1.0
    return scale * rng.standard_normal(shape)


def time_grid(spec: SdeSpec) -> np.ndarray:
    """Ascending uniform grid ``t_k = eps + k/(S-1) (1 - eps)``, ``k = 0..S-1``."""
    k = np.arange(spec.steps, dtype=np.float64)
    return spec.epsilon + (k / (spec.steps - 1)) * (1.0 - spec.epsilon)


def grid_index(spec: SdeSpec, t, tol=1e-9) -> int:
    """Inverse of :func:`time_grid` for a time lying on the grid."""
    k = (t - spec.epsilon) / (1.0 - spec.epsilon) * (spec.steps - 1)
    ki = int(round(k))
    if abs(k - ki) > tol * spec.steps or not 0 <= ki < spec.steps:
        raise DomainError(f"time {t!r} is not on the {spec.steps}-point grid")
    return ki


def nearest_grid_index(spec: SdeSpec, t) -> int:
    """Index of the grid time closest to ``t`` in ``[epsilon, 1]``."""
    _check_time(t, spec.epsilon, inclusive=True)
    return int(round((t - spec.epsilon) / (1.0 - spec.epsilon) * (spec.steps - 1)))


def simulate_forward(spec: SdeSpec, x0, t_end, n_paths, rng, n_steps=1000):
    """Euler-Maruyama simulation of the forward SDE from ``epsilon`` to ``t_end``.

    Paths start from an exact draw of ``p_0,eps`` (the VE schedule jumps from
    0 to ``sigma_min`` at the origin, so starting noise-free at ``t = 0`` would
    miss that variance).  Returns an array of shape ``(n_paths,) + x0.shape``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    t0 = spec.epsilon
    x = np.broadcast_to(x0, (n_paths,) + x0.shape).copy()
    x = perturb(spec, x, t0, rng.standard_normal(x.shape))
    h = (t_end - t0) / n_steps
    for k in range(n_steps):
        t = t0 + k * h
        f, g = drift_diffusion(spec, t)
        x = x + f * x * h + g * math.sqrt(h) * rng.standard_normal(x.shape)
    return x
