"""T-scales anomaly detection from coupled whole-score / self-score trajectories.

For every initial time ``t`` in the configured set, a test input is noised to
``t`` and both branches take ``r`` reverse steps.  The two end states go
through the score network once each and the tapped activations are compared
by Euclidean distance over channels.  Per layer, distances are summed over
scales, resized to the input resolution and finally multiplied together.

Vector data produce one scalar per sample instead of a map.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import _kernels as K
from .integrator import MODES, advance_pair, init_pair, sample_streams
from .sde import SdeSpec, grid_index, time_grid

COMBINES = ("feature_product", "score_diff", "recon_loss")
SCORE_LAYER = "score"
CHUNK = 64


@dataclass
class DetectConfig:
    t_set: Sequence[float]
    r: int = 1
    mode: str = "ode"
    layers: Optional[Sequence[int]] = None
    combine: str = "feature_product"
    seed: int = 0

    def __post_init__(self):
        self.t_set = tuple(float(t) for t in self.t_set)
        if self.layers is not None:
            self.layers = tuple(int(k) for k in self.layers)
        if len(self.t_set) < 1:
            raise ValueError("t_set needs at least one time")
        if len(set(self.t_set)) != len(self.t_set) or list(self.t_set) != sorted(self.t_set, reverse=True):
            raise ValueError("t_set must hold distinct times in descending order")
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.combine not in COMBINES:
            raise ValueError(f"combine must be one of {COMBINES}")

    def validate(self, spec: SdeSpec):
        """Map times to grid indices, checking every scale can take ``r`` steps."""
        idx = []
        for t in self.t_set:
            if not spec.epsilon < t <= 1.0:
                raise ValueError(f"t={t} outside (epsilon, 1]")
            k = grid_index(spec, t)
            if k - self.r < 0:
                raise ValueError(f"t={t} cannot take r={self.r} steps before epsilon")
            idx.append(k)
        return idx


def grid_t_set(spec: SdeSpec, indices) -> Tuple[float, ...]:
    """Times for grid indices, e.g. ``(250, 200, 150, 100, 50)`` of a 2000-point grid."""
    g = time_grid(spec)
    return tuple(float(g[k]) for k in sorted(indices, reverse=True))


# ----------------------------------------------------------------------------
# building blocks


def feature_distance(taps_a, taps_b):
    """Per-layer Euclidean distance over the channel axis, no normalisation.

    Taps are ``[(layer_id, activation)]``.  Image activations ``(..., C, h, w)``
    give maps ``(..., h, w)``; vector activations ``(..., width)`` give scalars.
    """
    if [k for k, _ in taps_a] != [k for k, _ in taps_b]:
        raise ValueError("tap layer ids differ between the two feature sets")
    out = []
    for (k, a), (_, b) in zip(taps_a, taps_b):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise ValueError(f"layer {k}: shapes {a.shape} and {b.shape} differ")
        axis = -3 if a.ndim >= 3 else -1
        out.append((k, np.sqrt(np.sum((a - b) ** 2, axis=axis))))
    return out


def upsample(m, height, width):
    """Corner-aligned bilinear resize of a ``(h, w)`` map to ``(height, width)``."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("upsample expects a 2-D map")
    if m.shape[0] > height or m.shape[1] > width:
        raise ValueError("upsample target smaller than the map")
    if m.shape == (height, width):
        return m.copy()
    return K.bilinear_resize(m, height, width)


def assemble(distance_maps: Dict, height=None, width=None):
    """Sum over scales per layer, resize, then multiply across layers.

    ``distance_maps`` maps ``(scale, layer) -> map``.  Maps may carry leading
    batch axes; ``height``/``width`` of None means vector data (no resize).
    """
    if not distance_maps:
        raise ValueError("no distance maps to assemble")
    per_layer: Dict = {}
    for (scale, layer), m in distance_maps.items():
        m = np.asarray(m, dtype=np.float64)
        per_layer[layer] = per_layer[layer] + m if layer in per_layer else m.copy()
    result = None
    for layer in per_layer:
        m = per_layer[layer]
        if height is not None:
            m = _resize_batch(m, height, width)
        result = m if result is None else result * m
    return result


def _resize_batch(m, height, width):
    if m.ndim == 2:
        return upsample(m, height, width)
    flat = m.reshape((-1,) + m.shape[-2:])
    out = np.stack([upsample(x, height, width) for x in flat])
    return out.reshape(m.shape[:-2] + (height, width))


def _channel_sq(d):
    d = np.asarray(d, dtype=np.float64)
    if d.ndim >= 3:
        return np.sum(d * d, axis=-3)
    return np.sum(d * d, axis=-1)


def score_diff_metric(net, spec: SdeSpec, x_whole, x_self, t):
    """``||s(x_whole, t) - s(x_self, t)||^2`` per location (2 NFE)."""
    if np.shape(x_whole) != np.shape(x_self):
        raise ValueError("branch shapes differ")
    return _channel_sq(net.forward(x_whole, t) - net.forward(x_self, t))


def recon_loss_metric(x_whole, x_self):
    """``||x_whole - x_self||^2`` per location (0 NFE)."""
    if np.shape(x_whole) != np.shape(x_self):
        raise ValueError("branch shapes differ")
    return _channel_sq(np.asarray(x_whole, dtype=np.float64) - np.asarray(x_self, dtype=np.float64))


def image_score(anomaly_map):
    """Image-level score: the maximum of the map."""
    a = np.asarray(anomaly_map)
    if a.size == 0:
        raise ValueError("empty anomaly map")
    return float(a.max())


# ----------------------------------------------------------------------------
# pipelines


@dataclass
class DetectResult:
    maps: np.ndarray  # (n, H, W) or (n,)
    nfe: np.ndarray  # per sample
    layers: Tuple = field(default_factory=tuple)

    @property
    def scores(self):
        if self.maps.ndim == 1:
            return self.maps.copy()
        return self.maps.reshape(len(self.maps), -1).max(axis=1)


def _spatial(x):
    x = np.asarray(x)
    return (x.shape[-2], x.shape[-1]) if x.ndim >= 3 else (None, None)


def _scale_distances(net, spec, cfg, layers, x0, ids, scale_pos, k):
    if hasattr(net, "bind"):
        net = net.bind(x0)
    streams = sample_streams(cfg.seed, ids, scale_pos)
    pair = init_pair(spec, x0, time_grid(spec)[k], streams)
    advance_pair(spec, net, pair, cfg.r, cfg.mode, streams)
    t_r = pair.t_current
    nfe = pair.nfe
    if cfg.combine == "recon_loss":
        return {SCORE_LAYER: recon_loss_metric(pair.x_whole, pair.x_self)}, nfe
    if cfg.combine == "score_diff":
        return {SCORE_LAYER: score_diff_metric(net, spec, pair.x_whole, pair.x_self, t_r)}, nfe + 2
    _, taps_w = net.forward_with_taps(pair.x_whole, t_r, layers)
    _, taps_s = net.forward_with_taps(pair.x_self, t_r, layers)
    return dict(feature_distance(taps_w, taps_s)), nfe + 2


def detect(net, spec: SdeSpec, cfg: DetectConfig, x0, sample_ids=None, threads: int = 1) -> DetectResult:
    """Run the T-scales detector over a batch ``x0`` (leading axis = samples).

    Work is split into fixed chunks of samples x scales; each chunk uses the
    per-(seed, sample, scale) noise streams, so the result is identical for
    any ``threads``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n = len(x0)
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    indices = cfg.validate(spec)
    layers = tuple(getattr(net, "tap_ids", ())) if cfg.layers is None else cfg.layers
    if cfg.combine == "feature_product" and not layers:
        raise ValueError("feature_product needs a network with tap layers")
    H, W = _spatial(x0)
    chunks = [slice(a, min(a + CHUNK, n)) for a in range(0, n, CHUNK)]
    jobs = [(c, j, k) for c in chunks for j, k in enumerate(indices)]

    def run(job):
        c, j, k = job
        return _scale_distances(net, spec, cfg, layers, x0[c], ids[c], j, k)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    maps = np.empty((n,) + ((H, W) if H is not None else ()))
    nfe = np.zeros(n, dtype=np.int64)
    layer_ids = ()
    for ci, c in enumerate(chunks):
        dist = {}
        for j in range(len(indices)):
            per_layer, cost = results[ci * len(indices) + j]
            layer_ids = tuple(per_layer)
            for layer, m in per_layer.items():
                dist[(j, layer)] = m
            nfe[c] += cost
        maps[c] = assemble(dist, H, W)
    return DetectResult(maps, nfe, layer_ids)


def detect_one(net, spec: SdeSpec, cfg: DetectConfig, x0, sample_id=0):
    """Single-input convenience wrapper; returns ``(anomaly_map, nfe)``."""
    res = detect(net, spec, cfg, np.asarray(x0)[None], sample_ids=[sample_id])
    return res.maps[0], int(res.nfe[0])


def continuous_baseline(net, spec: SdeSpec, x0, start_index: int, mode="ode", seed=0, sample_ids=None):
    """Single long run without T scales (the ablation baselines).

    Both branches start at grid ``start_index`` and are iterated down to grid
    index 1, the point next to ``epsilon``.  Returns
    ``(score_diff, recon_loss, nfe_per_sample)``: the squared whole-score
    difference of the end states (2 extra NFE) and their squared distance.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    ids = np.arange(len(x0)) if sample_ids is None else np.asarray(sample_ids)
    if hasattr(net, "bind"):
        net = net.bind(x0)
    if start_index < 2:
        raise ValueError("start_index must be >= 2")
    streams = sample_streams(seed, ids, 0)
    pair = init_pair(spec, x0, time_grid(spec)[start_index], streams)
    advance_pair(spec, net, pair, start_index - 1, mode, streams, stop_index=1)
    sd = score_diff_metric(net, spec, pair.x_whole, pair.x_self, pair.t_current)
    rl = recon_loss_metric(pair.x_whole, pair.x_self)
    return sd, rl, pair.nfe + 2
