"""Denoising score matching with an Adam optimiser."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .sde import SdeSpec, marginal_params, perturb

log = logging.getLogger(__name__)

WEIGHTINGS = ("sigma2", "one")


class TrainingDivergence(FloatingPointError):
    """Loss became non-finite."""

    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class TrainConfig:
    batch: int = 128
    steps: int = 20000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weighting: str = "sigma2"
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_path: Optional[str] = None
    loss_warn: Optional[float] = None
    log_every: int = 1000

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0 < self.beta1 < self.beta2 < 1:
            raise ValueError("need 0 < beta1 < beta2 < 1")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")


def _bcast(c, ndim):
    return np.asarray(c).reshape((-1,) + (1,) * (ndim - 1))


def dsm_loss(net, spec: SdeSpec, x0, rng: np.random.Generator, weighting="sigma2", with_grad=True,
             t=None, z=None):
    """Monte Carlo denoising score-matching loss and its parameter gradient.

    Per sample: ``t ~ U[eps, 1]``, ``z ~ N(0, I)``, ``x_t = mu x0 + sigma z`` and
    ``0.5 * lambda(t) * ||-z/sigma - s(x_t, t)||^2``.  With ``lambda = sigma^2``
    this is ``0.5 * ||sigma s + z||^2``.  ``t`` and ``z`` may be supplied to
    evaluate a fixed draw.  Returns ``(mean_loss, grads)``; ``grads`` is None
    when ``with_grad`` is false.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim < 2 or len(x0) == 0:
        raise ValueError("dsm_loss needs a non-empty batch")
    n = len(x0)
    if t is None:
        t = rng.uniform(spec.epsilon, 1.0, size=n)
    if z is None:
        z = rng.standard_normal(x0.shape)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()
    x_t = perturb(spec, x0, t, z)
    _, sigma = marginal_params(spec, t)
    sig = _bcast(sigma, x0.ndim)
    if with_grad:
        s, pullback = net.vjp(x_t, t)
    else:
        s, pullback = net.forward(x_t, t), None
    axes = tuple(range(1, x0.ndim))
    if weighting == "sigma2":
        resid = sig * s + z
        per = 0.5 * np.sum(resid**2, axis=axes)
        g_s = sig * resid / n
    elif weighting == "one":
        resid = s + z / sig
        per = 0.5 * np.sum(resid**2, axis=axes)
        g_s = resid / n
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    loss = float(np.mean(per))
    if not math.isfinite(loss):
        raise TrainingDivergence(None, loss)
    grads = pullback(g_s) if with_grad else None
    return loss, grads


@dataclass
class AdamState:
    m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    step: int = 0


def optimizer_step(state: AdamState, params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    if set(params) != set(grads):
        raise ValueError("params and grads have different keys")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient {k} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


def train(net, spec: SdeSpec, dataset, cfg: TrainConfig, progress=None):
    """Fit ``net`` in place; returns ``(net, loss_trace)``.

    Mini-batches are drawn with replacement from ``dataset`` using a generator
    seeded by ``cfg.seed``, so identical inputs give identical traces.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if len(data) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    trace = np.empty(cfg.steps)
    for step in range(cfg.steps):
        idx = rng.integers(0, len(data), size=cfg.batch)
        try:
            loss, grads = dsm_loss(net, spec, data[idx], rng, weighting=cfg.weighting)
        except TrainingDivergence as exc:
            raise TrainingDivergence(step, exc.loss) from None
        optimizer_step(state, net.params, grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        trace[step] = loss
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("step %d loss %.5f (running mean %.5f)", step + 1, loss,
                     trace[max(0, step + 1 - cfg.log_every) : step + 1].mean())
        if progress is not None:
            progress(step, loss)
        if cfg.checkpoint_every and cfg.checkpoint_path and (step + 1) % cfg.checkpoint_every == 0:
            from .checkpoint import save_checkpoint

            save_checkpoint(net, cfg.checkpoint_path)
    if cfg.loss_warn is not None and cfg.steps:
        tail = trace[-min(len(trace), 500) :].mean()
        if tail > cfg.loss_warn:
            warnings.warn(f"final mean loss {tail:.4f} above threshold {cfg.loss_warn}", RuntimeWarning)
    return net, trace


def write_loss_csv(path, trace) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])
