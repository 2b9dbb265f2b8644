"""Time-conditioned score networks with hand-written reverse-mode gradients.

Two architectures share one surface:

* :class:`MlpScoreNet` for vector data, ``[x, emb(t)] -> h -> h -> d``.
* :class:`ConvScoreNet` for single-channel images, a three-resolution
  encoder-decoder whose decoder activations can be tapped.

Both take an optional :class:`~scoredd.sde.SdeSpec`.  When present the raw
network output is preconditioned: the input is scaled by
``1 / sqrt(mu(t)^2 data_var + sigma(t)^2)`` and the output by ``1 / sigma(t)``,
so the regression target seen by the weights is ``-z`` at every time.

Conventions: ``forward(x, t)`` accepts one sample or a batch, ``t`` a scalar
or one time per sample.  ``backward_params(x, t, upstream)`` returns the
gradient of ``<upstream, forward(x, t)>`` for every parameter.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np
from scipy.special import expit

from . import _kernels as K
from .sde import _check_time, marginal_params

FOURIER_SCALE = 16.0


class TimeEmbedding:
    """Random Fourier features ``[sin(2 pi f t), cos(2 pi f t)]`` with frozen ``f``."""

    def __init__(self, n_freq=16, scale=FOURIER_SCALE, seed=0, frequencies=None):
        if frequencies is None:
            frequencies = np.random.default_rng(seed).standard_normal(n_freq) * scale
        self.frequencies = np.asarray(frequencies, dtype=np.float64)
        self.scale = float(scale)
        self.seed = int(seed)

    @property
    def dim(self) -> int:
        return 2 * len(self.frequencies)

    def __call__(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        arg = 2.0 * np.pi * t[:, None] * self.frequencies[None, :]
        return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _silu_np(x):
    s = expit(x)
    return x * s, s


class _ScoreNetBase:
    arch = ""
    tap_ids: tuple = ()

    def __init__(self, sde=None, data_var=1.0, dtype="float64"):
        self.sde = sde
        self.data_var = float(data_var)
        self.dtype = np.dtype(dtype)
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.nfe = 0

    # -- time handling -------------------------------------------------------

    def _times(self, t, n):
        lower = self.sde.epsilon if self.sde is not None else 0.0
        ta = np.asarray(_check_time(t, lower, inclusive=True), dtype=np.float64)
        if ta.ndim == 0:
            ta = np.full(n, float(ta))
        if ta.shape != (n,):
            raise ValueError(f"expected {n} times, got shape {ta.shape}")
        return ta

    def _preconditioners(self, t):
        if self.sde is None:
            one = np.ones_like(t)
            return one, one
        mu, sigma = marginal_params(self.sde, t)
        mu = np.asarray(mu)
        sigma = np.asarray(sigma)
        c_in = 1.0 / np.sqrt(mu**2 * self.data_var + sigma**2)
        return c_in, 1.0 / sigma

    # -- public surface ------------------------------------------------------

    def forward(self, x, t):
        out, _, _ = self._run(x, t, taps=(), keep=False)
        return out

    __call__ = forward

    def forward_with_taps(self, x, t, taps=None):
        """Return ``(score, [(layer_id, activation), ...])`` from one pass."""
        taps = self.tap_ids if taps is None else tuple(taps)
        unknown = [k for k in taps if k not in self.tap_ids]
        if unknown:
            raise KeyError(f"unknown tap layer ids {unknown}; available {list(self.tap_ids)}")
        if list(taps) != sorted(set(taps)):
            raise ValueError("tap ids must be strictly increasing")
        out, tapped, _ = self._run(x, t, taps=taps, keep=False)
        return out, tapped

    def backward_params(self, x, t, upstream):
        out, _, cache = self._run(x, t, taps=(), keep=True)
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != out.shape:
            raise ValueError(f"upstream shape {upstream.shape} != output shape {out.shape}")
        return self._backprop(cache, upstream)

    def vjp(self, x, t):
        """One forward pass; returns ``(score, pullback)`` for parameter gradients."""
        out, _, cache = self._run(x, t, taps=(), keep=True)

        def pullback(upstream):
            upstream = np.asarray(upstream, dtype=np.float64)
            if upstream.shape != out.shape:
                raise ValueError(f"upstream shape {upstream.shape} != output shape {out.shape}")
            return self._backprop(cache, upstream)

        return out, pullback

    def zero_grads(self):
        return OrderedDict((k, np.zeros_like(v)) for k, v in self.params.items())

    def copy(self):
        other = self.__class__.__new__(self.__class__)
        other.__dict__.update(self.__dict__)
        other.params = OrderedDict((k, v.copy()) for k, v in self.params.items())
        other.nfe = 0
        return other

    def _check_input(self, x):
        x = np.asarray(x)
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite input to score network")
        return x


# ----------------------------------------------------------------------------


class MlpScoreNet(_ScoreNetBase):
    """Widths ``[d + 2F, hidden, hidden, d]`` with SiLU hidden activations."""

    arch = "mlp"
    tap_ids = (0, 1)

    def __init__(self, dim=2, hidden=128, n_freq=16, fourier_scale=FOURIER_SCALE, seed=0, sde=None,
                 data_var=1.0, dtype="float64", embedding=None):
        super().__init__(sde=sde, data_var=data_var, dtype=dtype)
        self.dim = int(dim)
        self.hidden = int(hidden)
        self.seed = int(seed)
        self.embedding = embedding or TimeEmbedding(n_freq, fourier_scale, seed=seed)
        rng = np.random.default_rng([seed, 1])
        widths = [self.dim + self.embedding.dim, self.hidden, self.hidden, self.dim]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            w = np.zeros((a, b)) if last else rng.standard_normal((a, b)) * np.sqrt(1.0 / a)
            self.params[f"W{i}"] = w.astype(self.dtype)
            self.params[f"b{i}"] = np.zeros(b, dtype=self.dtype)

    def descriptor(self):
        return {"arch": self.arch, "d": self.dim, "hidden": self.hidden}

    def _run(self, x, t, taps=(), keep=False):
        x = self._check_input(x)
        single = x.ndim == 1
        xb = np.atleast_2d(x).astype(np.float64)
        if xb.shape[1] != self.dim:
            raise ValueError(f"expected data dimension {self.dim}, got {xb.shape}")
        n = xb.shape[0]
        tt = self._times(t, n)
        self.nfe += 1
        c_in, c_out = self._preconditioners(tt)
        dt = self.dtype
        h = np.concatenate([xb * c_in[:, None], self.embedding(tt)], axis=1).astype(dt)
        p = self.params
        acts = [h]
        pre = []
        tapped = []
        for i in range(2):
            a = h @ p[f"W{i}"] + p[f"b{i}"]
            h, s = _silu_np(a)
            pre.append((a, s))
            acts.append(h)
            if i in taps:
                tapped.append((i, h[0].astype(np.float64) if single else h.astype(np.float64)))
        raw = h @ p["W2"] + p["b2"]
        out = raw.astype(np.float64) * c_out[:, None]
        cache = (acts, pre, c_out) if keep else None
        return (out[0] if single else out), tapped, cache

    def _backprop(self, cache, upstream):
        acts, pre, c_out = cache
        p = self.params
        g = np.atleast_2d(upstream) * c_out[:, None]
        g = g.astype(self.dtype)
        grads = OrderedDict()
        grads["W2"] = acts[2].T @ g
        grads["b2"] = g.sum(axis=0)
        g = g @ p["W2"].T
        for i in (1, 0):
            a, s = pre[i]
            g = g * (s * (1.0 + a * (1.0 - s)))
            grads[f"W{i}"] = acts[i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            if i:
                g = g @ p[f"W{i}"].T
        return OrderedDict((k, grads[k]) for k in p)


# ----------------------------------------------------------------------------
# conv helpers, channel-major (C, N, H, W)


def _conv(a, w, b):
    c, n, h, wd = a.shape
    cols = K.im2col(a)
    y = w.reshape(w.shape[0], -1) @ cols
    y += b[:, None]
    return y.reshape(w.shape[0], n, h, wd), cols


def _conv_back(g, cols, w, in_shape, need_input=True):
    co = w.shape[0]
    gm = g.reshape(co, -1)
    gw = (gm @ cols.T).reshape(w.shape)
    gb = gm.sum(axis=1)
    gx = None
    if need_input:
        gx = K.col2im(w.reshape(co, -1).T @ gm, *in_shape)
    return gx, gw, gb


def _pool(a):
    c, n, h, w = a.shape
    return a.reshape(c, n, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _pool_back(g):
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25


def _up(a):
    return np.repeat(np.repeat(a, 2, axis=2), 2, axis=3)


def _up_back(g):
    c, n, h, w = g.shape
    return g.reshape(c, n, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


class ConvScoreNet(_ScoreNetBase):
    """Encoder at H, H/2, H/4 (c, 2c, 4c channels); mirrored decoder with skips.

    Decoder taps (coarse to fine): 0 -> (4c, H/4), 1 -> (2c, H/2), 2 -> (c, H).
    Each block adds a learned per-channel projection of the time embedding.
    """

    arch = "conv"
    tap_ids = (0, 1, 2)

    # (name, in_channels_multiple, out_channels_multiple)
    _blocks = (
        ("enc1", None, 1),
        ("enc2", 1, 2),
        ("enc3", 2, 4),
        ("dec3", 4, 4),
        ("dec2", 6, 2),
        ("dec1", 2, 1),
    )

    def __init__(self, height=32, width=32, channels=1, base=16, n_freq=16, fourier_scale=FOURIER_SCALE,
                 seed=0, sde=None, data_var=1.0, dtype="float64", embedding=None):
        super().__init__(sde=sde, data_var=data_var, dtype=dtype)
        if height % 4 or width % 4:
            raise ValueError("image height and width must be divisible by 4")
        self.height, self.width, self.channels = int(height), int(width), int(channels)
        self.base = int(base)
        self.seed = int(seed)
        self.embedding = embedding or TimeEmbedding(n_freq, fourier_scale, seed=seed)
        rng = np.random.default_rng([seed, 1])
        c = self.base
        e = self.embedding.dim
        for name, cin, cout in self._blocks:
            ci = self.channels if cin is None else cin * c
            co = cout * c
            self.params[f"{name}.w"] = (rng.standard_normal((co, ci, 3, 3)) * np.sqrt(1.0 / (9 * ci))).astype(self.dtype)
            self.params[f"{name}.b"] = np.zeros(co, dtype=self.dtype)
            self.params[f"{name}.tw"] = (rng.standard_normal((e, co)) * np.sqrt(1.0 / e)).astype(self.dtype)
            self.params[f"{name}.tb"] = np.zeros(co, dtype=self.dtype)
        self.params["out.w"] = np.zeros((self.channels, c, 3, 3), dtype=self.dtype)
        self.params["out.b"] = np.zeros(self.channels, dtype=self.dtype)

    def descriptor(self):
        return {"arch": self.arch, "H": self.height, "W": self.width, "C": self.channels, "channels": self.base}

    def tap_shapes(self):
        c, h, w = self.base, self.height, self.width
        return {0: (4 * c, h // 4, w // 4), 1: (2 * c, h // 2, w // 2), 2: (c, h, w)}

    def _block(self, name, a, temb, cache, skip=None):
        p = self.params
        y, cols = _conv(a, p[f"{name}.w"], p[f"{name}.b"])
        proj = temb @ p[f"{name}.tw"] + p[f"{name}.tb"]  # (N, Co)
        y += proj.T[:, :, None, None]
        if skip is not None:
            y += skip
        out, s = K.silu(y)
        if cache is not None:
            cache[name] = (cols, a.shape, y, s)
        return out

    def _block_back(self, name, g, temb, cache, grads, need_input=True):
        cols, in_shape, y, s = cache[name]
        g = K.silu_backward(g, y, s)
        gproj = g.sum(axis=(2, 3)).T  # (N, Co)
        grads[f"{name}.tw"] = temb.T @ gproj
        grads[f"{name}.tb"] = gproj.sum(axis=0)
        gx, grads[f"{name}.w"], grads[f"{name}.b"] = _conv_back(g, cols, self.params[f"{name}.w"], in_shape, need_input)
        return gx, g

    def _run(self, x, t, taps=(), keep=False):
        x = self._check_input(x)
        single = x.ndim == 3
        xb = x[None] if single else x
        if xb.shape[1:] != (self.channels, self.height, self.width):
            raise ValueError(f"expected images of shape {(self.channels, self.height, self.width)}, got {xb.shape[1:]}")
        n = xb.shape[0]
        tt = self._times(t, n)
        self.nfe += 1
        c_in, c_out = self._preconditioners(tt)
        dt = self.dtype
        temb = self.embedding(tt).astype(dt)
        a = (xb.astype(np.float64) * c_in[:, None, None, None]).astype(dt).transpose(1, 0, 2, 3)
        a = np.ascontiguousarray(a)
        cache = {} if keep else None
        e1 = self._block("enc1", a, temb, cache)
        e2 = self._block("enc2", _pool(e1), temb, cache)
        e3 = self._block("enc3", _pool(e2), temb, cache)
        d3 = self._block("dec3", e3, temb, cache)
        d2 = self._block("dec2", np.concatenate([_up(d3), e2], axis=0), temb, cache)
        # additive skip at full resolution keeps the widest im2col small
        d1 = self._block("dec1", _up(d2), temb, cache, skip=e1)
        p = self.params
        raw, cols = _conv(d1, p["out.w"], p["out.b"])
        out = raw.transpose(1, 0, 2, 3).astype(np.float64) * c_out[:, None, None, None]
        tapped = []
        for k, act in ((0, d3), (1, d2), (2, d1)):
            if k in taps:
                v = act.transpose(1, 0, 2, 3).astype(np.float64)
                tapped.append((k, v[0] if single else v))
        if keep:
            cache.update(temb=temb, out_cols=cols, d1_shape=d1.shape, c_out=c_out, e2c=e2.shape[0])
        return (out[0] if single else out), tapped, cache

    def _backprop(self, cache, upstream):
        p = self.params
        grads = {}
        temb = cache["temb"]
        g = upstream if upstream.ndim == 4 else upstream[None]
        g = (g * cache["c_out"][:, None, None, None]).astype(self.dtype)
        g = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
        gd1, grads["out.w"], grads["out.b"] = _conv_back(g, cache["out_cols"], p["out.w"], cache["d1_shape"])
        gup2, g_e1_skip = self._block_back("dec1", gd1, temb, cache, grads)
        gd2 = _up_back(gup2)
        gcat, _ = self._block_back("dec2", gd2, temb, cache, grads)
        n_up = gcat.shape[0] - cache["e2c"]
        gd3 = _up_back(gcat[:n_up])
        g_e2 = gcat[n_up:]
        ge3, _ = self._block_back("dec3", gd3, temb, cache, grads)
        gpool2, _ = self._block_back("enc3", ge3, temb, cache, grads)
        g_e2 = g_e2 + _pool_back(gpool2)
        gpool1, _ = self._block_back("enc2", g_e2, temb, cache, grads)
        g_e1 = g_e1_skip + _pool_back(gpool1)
        self._block_back("enc1", g_e1, temb, cache, grads, need_input=False)
        return OrderedDict((k, np.asarray(grads[k], dtype=self.dtype)) for k in p)


def build_net(descriptor: dict, sde=None, **kw):
    arch = descriptor.get("arch")
    if arch == "mlp":
        return MlpScoreNet(dim=int(descriptor["d"]), hidden=int(descriptor.get("hidden", 128)), sde=sde, **kw)
    if arch == "conv":
        return ConvScoreNet(height=int(descriptor["H"]), width=int(descriptor["W"]), channels=int(descriptor.get("C", 1)),
                            base=int(descriptor.get("channels", 16)), sde=sde, **kw)
    raise ValueError(f"unknown architecture {arch!r}")
