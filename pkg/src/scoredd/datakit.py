"""Synthetic datasets: the 2-D mixture benchmark and small defect textures.

Both generators are pure functions of their seed and arguments.  Images are
quantised to multiples of 1/255 so that a PGM round trip is lossless.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .formats import ManifestRecord, read_manifest, read_pgm, write_manifest, write_pgm
from .oracle import GaussianMixture, marginal_log_density, reference_mixture, sample
from .sde import SdeSpec

# the three probe points of the exploratory 2-D experiment: one anomaly, two normals
PROBE_POINTS = np.array([[-6.0, 5.0], [5.17, 5.2], [-4.2, -4.3]])
PROBE_LABELS = np.array([1, 0, 0])


@dataclass
class ToyBenchmark:
    train: np.ndarray
    test_normal: np.ndarray
    test_anomalous: np.ndarray
    probe: np.ndarray = field(default_factory=lambda: PROBE_POINTS.copy())
    probe_labels: np.ndarray = field(default_factory=lambda: PROBE_LABELS.copy())
    threshold: float = float("nan")

    @property
    def x_test(self):
        """Probe points first, then sampled normals, then sampled anomalies."""
        return np.concatenate([self.probe, self.test_normal, self.test_anomalous])

    @property
    def y_test(self):
        return np.concatenate([self.probe_labels, np.zeros(len(self.test_normal), dtype=int),
                               np.ones(len(self.test_anomalous), dtype=int)])


def low_density_band(mix: GaussianMixture, spec: SdeSpec, n: int, threshold: float, rng, box=10.0):
    """``n`` points uniform on ``{x in [-box, box]^d : log p_eps(x) < threshold}``."""
    out: List[np.ndarray] = []
    have = 0
    while have < n:
        cand = rng.uniform(-box, box, size=(max(4 * (n - have), 64), mix.dim))
        keep = cand[marginal_log_density(mix, spec, cand, spec.epsilon) < threshold]
        out.append(keep)
        have += len(keep)
    return np.concatenate(out)[:n]


def gen_toy(seed: int, n_train: int, n_test: int, quantile: float = 1e-3, spec: SdeSpec = None,
            mix: GaussianMixture = None) -> ToyBenchmark:
    """Training draws from the mixture plus ``n_test`` normal and ``n_test`` anomalous test points.

    The anomaly threshold is the ``quantile`` of the training log-densities at
    ``t = epsilon``; anomalies are drawn uniformly on the part of the box
    ``[-10, 10]^2`` below it.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("counts must be >= 1")
    spec = SdeSpec.ve() if spec is None else spec
    mix = reference_mixture() if mix is None else mix
    rng = np.random.default_rng(seed)
    train = sample(mix, n_train, rng)
    thr = float(np.quantile(marginal_log_density(mix, spec, train, spec.epsilon), quantile))
    test_normal = sample(mix, n_test, rng)
    test_anom = low_density_band(mix, spec, n_test, thr, rng)
    return ToyBenchmark(train, test_normal, test_anom, threshold=thr)


# ----------------------------------------------------------------------------
# defect textures

DEFECT_KINDS = ("rect", "ellipse")
TEXTURE_MEAN = 0.5
TEXTURE_STD = 0.12


@dataclass
class DefectImageSet:
    images: np.ndarray  # (n, 1, H, W) in [0, 1]
    masks: np.ndarray  # (n, H, W) uint8
    labels: np.ndarray  # (n,)
    split: str = "test"

    def __len__(self):
        return len(self.images)


def texture(rng, height, width, smooth=1.5):
    """Band-limited noise with fixed mean/std, clipped to [0, 1]."""
    z = gaussian_filter(rng.standard_normal((height, width)), smooth, mode="wrap")
    z = (z - z.mean()) / z.std()
    return np.clip(TEXTURE_MEAN + TEXTURE_STD * z, 0.0, 1.0)


def defect_mask(rng, height, width, kind, min_frac=0.01, max_frac=0.2):
    """Random rectangle or ellipse whose area fraction lies in ``[min_frac, max_frac]``."""
    yy, xx = np.mgrid[0:height, 0:width]
    total = height * width
    while True:
        frac = rng.uniform(min_frac * 1.5, max_frac * 0.8)
        aspect = rng.uniform(0.5, 2.0)
        if kind == "rect":
            h = max(1, int(round(np.sqrt(frac * total * aspect))))
            w = max(1, int(round(frac * total / h)))
            if h >= height or w >= width:
                continue
            y0 = rng.integers(0, height - h + 1)
            x0 = rng.integers(0, width - w + 1)
            m = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        elif kind == "ellipse":
            ry = np.sqrt(frac * total * aspect / np.pi)
            rx = frac * total / (np.pi * ry)
            if 2 * ry >= height - 2 or 2 * rx >= width - 2:
                continue
            cy = rng.uniform(ry, height - 1 - ry)
            cx = rng.uniform(rx, width - 1 - rx)
            m = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            raise ValueError(f"unknown defect kind {kind!r}")
        if min_frac <= m.mean() <= max_frac:
            return m.astype(np.uint8)


def gen_defect_images(seed: int, n: int, height: int = 32, width: int = 32,
                      defect_kinds: Sequence[str] = DEFECT_KINDS, anomaly_fraction: float = 0.5,
                      split: str = "test", contrast: Tuple[float, float] = (0.25, 0.45)) -> DefectImageSet:
    """Textures, a share of which carry one rectangle/ellipse contrast defect.

    Exactly ``round(anomaly_fraction * n)`` images are defective; set it to 0
    for a training split.  The defect shifts intensity by a random signed
    amount from ``contrast`` inside the mask.
    """
    if height % 4 or width % 4:
        raise ValueError("height and width must be divisible by 4")
    if n < 0:
        raise ValueError("n must be >= 0")
    for k in defect_kinds:
        if k not in DEFECT_KINDS:
            raise ValueError(f"unknown defect kind {k!r}")
    rng = np.random.default_rng(seed)
    n_def = int(round(anomaly_fraction * n))
    labels = np.zeros(n, dtype=np.int64)
    labels[rng.permutation(n)[:n_def]] = 1
    images = np.empty((n, 1, height, width))
    masks = np.zeros((n, height, width), dtype=np.uint8)
    for i in range(n):
        img = texture(rng, height, width)
        if labels[i]:
            kind = defect_kinds[rng.integers(len(defect_kinds))]
            m = defect_mask(rng, height, width, kind)
            shift = rng.uniform(*contrast) * rng.choice([-1.0, 1.0])
            img = np.clip(img + shift * m, 0.0, 1.0)
            masks[i] = m
        images[i, 0] = np.rint(img * 255.0) / 255.0
    return DefectImageSet(images, masks, labels, split)


def save_image_set(root, ds: DefectImageSet, manifest="manifest.tsv", append=False) -> str:
    """Write images (and masks of defective ones) as PGM plus a manifest."""
    os.makedirs(root, exist_ok=True)
    mpath = os.path.join(root, manifest)
    records = read_manifest(mpath) if append and os.path.exists(mpath) else []
    records = [ManifestRecord(os.path.relpath(r.path, root), r.split, r.label,
                              "-" if r.mask_path == "-" else os.path.relpath(r.mask_path, root)) for r in records]
    for i in range(len(ds)):
        name = f"{ds.split}_{i:04d}.pgm"
        write_pgm(os.path.join(root, name), np.rint(ds.images[i, 0] * 255).astype(np.uint8))
        mask = "-"
        if ds.labels[i]:
            mask = f"{ds.split}_{i:04d}_mask.pgm"
            write_pgm(os.path.join(root, mask), ds.masks[i] * np.uint8(255))
        records.append(ManifestRecord(name, ds.split, int(ds.labels[i]), mask))
    write_manifest(mpath, records)
    return mpath


def load_image_set(manifest_path, split: str) -> DefectImageSet:
    """Read one split of a manifest; images scaled to [0, 1], masks to {0, 1}."""
    recs = [r for r in read_manifest(manifest_path) if r.split == split]
    if not recs:
        return DefectImageSet(np.zeros((0, 1, 0, 0)), np.zeros((0, 0, 0), np.uint8), np.zeros(0, np.int64), split)
    imgs = [read_pgm(r.path) for r in recs]
    h, w = imgs[0].shape
    masks = np.zeros((len(recs), h, w), dtype=np.uint8)
    for i, r in enumerate(recs):
        if imgs[i].shape != (h, w):
            raise ValueError(f"{r.path}: image size differs from the rest of the split")
        if r.mask_path != "-":
            masks[i] = (read_pgm(r.mask_path) > 127).astype(np.uint8)
    images = np.stack(imgs)[:, None].astype(np.float64) / 255.0
    return DefectImageSet(images, masks, np.array([r.label for r in recs], dtype=np.int64), split)
