"""Command-line entry point: ``scoredd {gendata,train,sample,detect,eval,toy2d,bench}``.

Configuration is a flat ``key = value`` file (``#`` comments allowed);
``--set key=value`` and dedicated flags override it.  Unknown keys are
rejected.  Exit codes: 0 success, 1 config/validation error, 2 numerical
divergence, 3 I/O error.

BLAS is pinned to one thread so that outputs never depend on ``--threads``;
that flag sizes the detector worker pool and the numba kernels instead.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from typing import Dict, List, Optional

import numpy as np

from . import _kernels as K
from .checkpoint import load_checkpoint, save_checkpoint
from .datakit import PROBE_LABELS, PROBE_POINTS, gen_defect_images, gen_toy, load_image_set, save_image_set
from .detector import COMBINES, DetectConfig, continuous_baseline, detect
from .evaluation import RunRecord, UndefinedMetricError, auroc, nfe_report, pixel_auroc, write_results_csv
from .formats import FormatError, read_tensor, write_pgm, write_tensor
from .integrator import IntegrationDivergence, SelfScoreStub, generate, run_pair, sample_streams
from .nets import ConvScoreNet, MlpScoreNet
from .oracle import OracleScore, reference_mixture
from .sde import SdeSpec, nearest_grid_index, time_grid
from .trainer import TrainConfig, TrainingDivergence, train, write_loss_csv

log = logging.getLogger("scoredd")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


# key -> (type, default); None default means "required when used"
SCHEMA: Dict[str, tuple] = {
    "seed": (int, 0),
    "sde.kind": (str, None),
    "sde.sigma_min": (float, 0.1),
    "sde.sigma_max": (float, 20.0),
    "sde.beta_min": (float, 0.1),
    "sde.beta_max": (float, 20.0),
    "sde.steps": (int, 1000),
    "sde.epsilon": (float, 1e-5),
    "data.kind": (str, "toy"),
    "data.manifest": (str, None),
    "data.n_train": (int, 10000),
    "data.n_test": (int, 200),
    "data.split": (str, "test"),
    "net.hidden": (int, 128),
    "net.base": (int, 16),
    "net.dtype": (str, "float64"),
    "train.steps": (int, 20000),
    "train.lr": (float, 1e-3),
    "train.batch": (int, 128),
    "train.weighting": (str, "sigma2"),
    "train.checkpoint_every": (int, 0),
    "detect.t_set": (str, None),
    "detect.t_index": (str, None),
    "detect.r": (int, 1),
    "detect.mode": (str, "ode"),
    "detect.layers": (str, None),
    "detect.combine": (str, None),
}


def parse_config_text(text: str, source="<config>") -> Dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {k!r}")
        out[k] = v
    return out


class RunConfig:
    """Validated view over the merged config file and overrides."""

    def __init__(self, raw: Dict[str, str]):
        self.raw = dict(raw)
        self.values = {}
        for k, v in self.raw.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            typ = SCHEMA[k][0]
            try:
                self.values[k] = typ(v)
            except ValueError:
                raise ConfigError(f"config key {k!r}: cannot parse {v!r} as {typ.__name__}") from None

    def get(self, key):
        if key in self.values:
            return self.values[key]
        default = SCHEMA[key][1]
        if default is None:
            raise ConfigError(f"missing required config key {key!r}")
        return default

    def has(self, key):
        return key in self.values

    def sde(self) -> SdeSpec:
        kind = self.get("sde.kind")
        try:
            return SdeSpec(kind=kind, sigma_min=self.get("sde.sigma_min"), sigma_max=self.get("sde.sigma_max"),
                           beta_min=self.get("sde.beta_min"), beta_max=self.get("sde.beta_max"),
                           steps=self.get("sde.steps"), epsilon=self.get("sde.epsilon"))
        except ValueError as exc:
            raise ConfigError(f"sde.*: {exc}") from None

    def detect_config(self, spec: SdeSpec, vector_data: bool, combine=None) -> DetectConfig:
        if self.has("detect.t_index") == self.has("detect.t_set"):
            raise ConfigError("set exactly one of 'detect.t_set' and 'detect.t_index'")
        if self.has("detect.t_index"):
            grid = time_grid(spec)
            idx = _int_list(self.get("detect.t_index"), "detect.t_index")
            if any(not 0 <= k < spec.steps for k in idx):
                raise ConfigError(f"detect.t_index outside 0..{spec.steps - 1}")
            t_set = [float(grid[k]) for k in idx]
        else:
            t_set = _float_list(self.get("detect.t_set"), "detect.t_set")
        layers = None
        if self.has("detect.layers"):
            layers = _int_list(self.get("detect.layers"), "detect.layers")
        if combine is None:
            combine = self.values.get("detect.combine") or ("score_diff" if vector_data else "feature_product")
        try:
            cfg = DetectConfig(t_set, r=self.get("detect.r"), mode=self.get("detect.mode"), layers=layers,
                               combine=combine, seed=self.get("seed"))
            cfg.validate(spec)
        except ValueError as exc:
            raise ConfigError(f"detect.*: {exc}") from None
        return cfg


def _float_list(s, key):
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{key}: expected a comma-separated list of numbers") from None


def _int_list(s, key):
    try:
        return [int(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{key}: expected a comma-separated list of integers") from None


def load_config(args) -> RunConfig:
    raw: Dict[str, str] = {}
    if getattr(args, "config", None):
        _require_file(args.config)
        with open(args.config, encoding="utf-8") as f:
            raw.update(parse_config_text(f.read(), args.config))
    for item in getattr(args, "set", None) or []:
        raw.update(parse_config_text(item, "--set"))
    if getattr(args, "seed", None) is not None:
        raw["seed"] = str(args.seed)
    return RunConfig(raw)


def _require_file(path):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such file: {path}")


def _setup_threads(n):
    from threadpoolctl import threadpool_limits

    threadpool_limits(1)
    K.set_threads(n)


# ----------------------------------------------------------------------------
# data helpers


def _load_data(cfg: RunConfig, spec: SdeSpec, split: str):
    """Return ``(x, labels, masks_or_None)`` for the configured dataset and split."""
    kind = cfg.get("data.kind")
    if kind == "toy":
        bench = gen_toy(cfg.get("seed"), cfg.get("data.n_train"), cfg.get("data.n_test"), spec=spec)
        if split == "train":
            return bench.train, np.zeros(len(bench.train), dtype=np.int64), None
        x = np.concatenate([bench.test_normal, bench.test_anomalous])
        y = np.r_[np.zeros(len(bench.test_normal)), np.ones(len(bench.test_anomalous))].astype(np.int64)
        return x, y, None
    if kind == "images":
        manifest = cfg.get("data.manifest")
        _require_file(manifest)
        ds = load_image_set(manifest, split)
        if len(ds) == 0:
            raise ConfigError(f"manifest {manifest} has no {split!r} records")
        return ds.images, ds.labels, ds.masks
    raise ConfigError(f"data.kind must be 'toy' or 'images', got {kind!r}")


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v))


# ----------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_config(args)
    spec = cfg.sde()
    x, _, _ = _load_data(cfg, spec, "train")
    seed = cfg.get("seed")
    data_var = float(np.mean(x**2))
    if x.ndim == 2:
        net = MlpScoreNet(x.shape[1], cfg.get("net.hidden"), seed=seed, sde=spec, data_var=data_var,
                          dtype=cfg.get("net.dtype"))
    else:
        net = ConvScoreNet(x.shape[-2], x.shape[-1], x.shape[-3], base=cfg.get("net.base"), seed=seed, sde=spec,
                           data_var=data_var, dtype=cfg.get("net.dtype"))
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "checkpoint.sddm")
    tcfg = TrainConfig(batch=cfg.get("train.batch"), steps=cfg.get("train.steps"), lr=cfg.get("train.lr"),
                       weighting=cfg.get("train.weighting"), seed=seed,
                       checkpoint_every=cfg.get("train.checkpoint_every"), checkpoint_path=ckpt)
    net, trace = train(net, spec, x, tcfg)
    save_checkpoint(net, ckpt)
    write_loss_csv(os.path.join(args.out, "loss.csv"), trace)
    log.info("wrote %s", ckpt)
    return EXIT_OK


def _score_model(args, cfg: RunConfig, spec: SdeSpec):
    if getattr(args, "oracle_stub", False):
        return SelfScoreStub(spec, np.zeros(1))
    if getattr(args, "oracle_score", False):
        if cfg.get("data.kind") != "toy":
            raise ConfigError("--oracle-score is only available for data.kind = toy")
        return OracleScore(reference_mixture(), spec)
    if not args.checkpoint:
        raise ConfigError("a --checkpoint is required (or --oracle-score / --oracle-stub)")
    _require_file(args.checkpoint)
    net = load_checkpoint(args.checkpoint)
    if net.sde is not None and net.sde != spec:
        raise ConfigError(f"checkpoint was trained with {net.sde}, config asks for {spec}")
    return net


def cmd_sample(args) -> int:
    cfg = load_config(args)
    spec = cfg.sde()
    net = _score_model(args, cfg, spec)
    if isinstance(net, SelfScoreStub):
        raise ConfigError("sampling needs a real score model")
    if args.n < 0:
        raise ConfigError("--n must be >= 0")
    shape = (2,) if isinstance(net, OracleScore) else _net_sample_shape(net)
    rng = np.random.default_rng(cfg.get("seed"))
    os.makedirs(args.out, exist_ok=True)
    x = generate(spec, net, (args.n,) + shape, rng, mode=args.mode) if args.n else np.zeros((0,) + shape)
    write_tensor(os.path.join(args.out, "samples.sdd"), np.asarray(x, dtype=np.float64))
    flat = np.asarray(x).reshape(args.n, int(np.prod(shape)))
    _write_rows(os.path.join(args.out, "samples.csv"), [f"x{i}" for i in range(flat.shape[1])],
                [[_fmt(v) for v in row] for row in flat])
    return EXIT_OK


def _net_sample_shape(net):
    d = net.descriptor()
    if d["arch"] == "mlp":
        return (int(d["d"]),)
    return (int(d["C"]), int(d["H"]), int(d["W"]))


def cmd_detect(args) -> int:
    cfg = load_config(args)
    spec = cfg.sde()
    split = cfg.get("data.split")
    x, y, masks = _load_data(cfg, spec, split)
    net = _score_model(args, cfg, spec)
    vector = x.ndim == 2
    dcfg = cfg.detect_config(spec, vector, combine=args.combine)
    t0 = time.perf_counter()
    if args.continuous:
        start = max(nearest_grid_index(spec, t) for t in dcfg.t_set)
        sd, rl, nfe = continuous_baseline(net, spec, x, start, mode=dcfg.mode, seed=dcfg.seed)
        maps = rl if dcfg.combine == "recon_loss" else sd
        nfe = np.full(len(x), nfe, dtype=np.int64)
    else:
        res = detect(net, spec, dcfg, x, threads=args.threads)
        maps, nfe = res.maps, res.nfe
    wall_ms = (time.perf_counter() - t0) * 1e3
    os.makedirs(args.out, exist_ok=True)
    scores = maps if vector else maps.reshape(len(maps), -1).max(axis=1)
    rows = []
    for i in range(len(x)):
        rows.append([i, int(y[i]), _fmt(scores[i]), int(nfe[i])])
    _write_rows(os.path.join(args.out, "scores.csv"), ["id", "label", "score", "nfe"], rows)
    write_tensor(os.path.join(args.out, "maps.sdd"), np.asarray(maps, dtype=np.float64))
    if masks is not None:
        write_tensor(os.path.join(args.out, "masks.sdd"), masks.astype(np.float64))
        pgm_dir = os.path.join(args.out, "pgm")
        os.makedirs(pgm_dir, exist_ok=True)
        for i in range(len(x)):
            write_pgm(os.path.join(pgm_dir, f"map_{i:04d}.pgm"), maps[i])
    with open(os.path.join(args.out, "timing.txt"), "w") as f:
        f.write(f"wall_ms={wall_ms:.3f}\n")
    log.info("detect: %d items, total NFE %d, %.1f ms", len(x), int(nfe.sum()), wall_ms)
    return EXIT_OK


def cmd_eval(args) -> int:
    d = args.detect_dir
    _require_file(os.path.join(d, "scores.csv"))
    with open(os.path.join(d, "scores.csv"), newline="") as f:
        rows = list(csv.DictReader(f))
    scores = np.array([float(r["score"]) for r in rows])
    labels = np.array([int(r["label"]) for r in rows])
    total_nfe = int(sum(int(r["nfe"]) for r in rows))
    img = auroc(scores, labels)
    pix = float("nan")
    mpath = os.path.join(d, "masks.sdd")
    if os.path.exists(mpath):
        maps = read_tensor(os.path.join(d, "maps.sdd"))
        masks = read_tensor(mpath)
        pix = pixel_auroc(list(maps), list(masks))
    wall = ""  # left blank so that the CSV is reproducible
    if args.timing:
        tpath = os.path.join(d, "timing.txt")
        _require_file(tpath)
        with open(tpath) as f:
            wall = float(f.read().strip().split("=", 1)[1])
    row = {"dataset": args.dataset, "config_id": args.config_id, "image_auroc": img, "pixel_auroc": pix,
           "total_nfe": total_nfe, "wall_ms": wall}
    write_results_csv(args.out, [row])
    print(f"image_auroc={img:.6f} pixel_auroc={pix:.6f} total_nfe={total_nfe}")
    return EXIT_OK


def cmd_gendata(args) -> int:
    """Write the synthetic defect textures (train, val and test splits) as PGM plus manifest."""
    if min(args.n_train, args.n_val, args.n_test) < 0:
        raise ConfigError("split sizes must be >= 0")
    root = args.out
    # seed offsets: train 0, test 1, val 2
    splits = (("train", args.n_train, 0.0, 0), ("val", args.n_val, 0.5, 2), ("test", args.n_test, 0.5, 1))
    mpath = None
    for split, n, frac, j in splits:
        if n == 0:
            continue
        ds = gen_defect_images(args.seed + j, n, args.size, args.size, anomaly_fraction=frac, split=split)
        mpath = save_image_set(root, ds, append=mpath is not None)
    log.info("wrote %s", mpath)
    return EXIT_OK


def cmd_toy2d(args) -> int:
    """Trajectories of the three probe points and the whole-score difference table."""
    cfg = load_config(args)
    raw = {"sde.kind": "VE", "sde.sigma_min": "0.1", "sde.sigma_max": "20", "sde.steps": "101"}
    raw.update(cfg.raw)
    cfg = RunConfig(raw)
    spec = cfg.sde()
    mix = reference_mixture()
    if args.use_net:
        _require_file(args.use_net)
        net = load_checkpoint(args.use_net)
    else:
        net = OracleScore(mix, spec)
    seed = cfg.get("seed")
    grid = time_grid(spec)
    os.makedirs(args.out, exist_ok=True)
    table = []
    for t_req in (0.6, 1.0):
        k = nearest_grid_index(spec, t_req)
        for mode in ("ode", "sde"):
            for i, (p, lab) in enumerate(zip(PROBE_POINTS, PROBE_LABELS)):
                rng = sample_streams(seed, [i], k)
                pair = run_pair(spec, net, p[None], grid[k], k, mode, rng, record=True)
                for branch, col in (("whole", 2), ("self", 3)):
                    _write_rows(os.path.join(args.out, f"traj_p{i}_t{t_req:.1f}_{mode}_{branch}.csv"),
                                ["step", "t", "x0", "x1"],
                                [[e[0], _fmt(e[1]), _fmt(e[col][0, 0]), _fmt(e[col][0, 1])] for e in pair.history])
                sw = net.forward(pair.x_whole, pair.t_current)
                ss = net.forward(pair.x_self, pair.t_current)
                diff = float(np.sum((sw - ss) ** 2))
                end = pair.x_whole[0]
                mode_dist = float(np.min(np.linalg.norm(mix.means - end, axis=1)))
                table.append([i, int(lab), _fmt(p[0]), _fmt(p[1]), _fmt(grid[k]), mode, _fmt(diff),
                              _fmt(np.linalg.norm(end - p)), _fmt(mode_dist)])
    _write_rows(os.path.join(args.out, "score_diff.csv"),
                ["point", "label", "x0", "x1", "t", "mode", "score_diff", "return_distance", "mode_distance"], table)
    return EXIT_OK


def cmd_bench(args) -> int:
    """NFE and wall time of T-scales detection versus the continuous version."""
    cfg = load_config(args)
    spec = cfg.sde()
    x, _, _ = _load_data(cfg, spec, cfg.get("data.split"))
    x = x[: args.n]
    net = _score_model(args, cfg, spec)
    dcfg = cfg.detect_config(spec, x.ndim == 2)
    runs: List[RunRecord] = []
    for i in range(len(x)):
        t0 = time.perf_counter()
        res = detect(net, spec, dcfg, x[i : i + 1], sample_ids=[i])
        runs.append(RunRecord("t_scales", int(res.nfe[0]), (time.perf_counter() - t0) * 1e3))
        start = max(nearest_grid_index(spec, t) for t in dcfg.t_set)
        t0 = time.perf_counter()
        _, _, nfe = continuous_baseline(net, spec, x[i : i + 1], start, mode=dcfg.mode, seed=dcfg.seed,
                                        sample_ids=[i])
        runs.append(RunRecord("continuous", int(nfe), (time.perf_counter() - t0) * 1e3))
    rows = nfe_report(runs)
    cols = ("config_id", "items", "total_nfe") + (("wall_ms",) if args.timing else ())
    write_results_csv(args.out, rows, columns=cols)
    for r in rows:
        print(f"{r['config_id']}: items={r['items']} total_nfe={r['total_nfe']} wall_ms={r['wall_ms']:.1f}")
    return EXIT_OK


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scoredd", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="flat key = value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
            sp.add_argument("--seed", type=int, help="override the 'seed' key")
        sp.add_argument("--threads", type=int, default=1, help="worker cap (results do not depend on it)")

    sp = sub.add_parser("train", help="fit a score network")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="generate samples from a trained model")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--oracle-score", action="store_true", help="use the exact toy mixture score")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--mode", choices=("ode", "sde"), default="ode")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("detect", help="anomaly maps and scores")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--oracle-score", action="store_true", help="use the exact toy mixture score")
    sp.add_argument("--oracle-stub", action="store_true", help="use the self-score as the model (null detector)")
    sp.add_argument("--combine", choices=COMBINES)
    sp.add_argument("--continuous", action="store_true",
                    help="single run from the largest t down to epsilon instead of T scales")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("eval", help="AUROC metrics from a detect output directory")
    common(sp, config=False)
    sp.add_argument("detect_dir")
    sp.add_argument("--dataset", default="dataset")
    sp.add_argument("--config-id", default="default")
    sp.add_argument("--timing", action="store_true", help="fill wall_ms (makes the CSV run-dependent)")
    sp.add_argument("--out", required=True, help="results CSV path")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gendata", help="write the synthetic defect-texture dataset")
    common(sp, config=False)
    sp.add_argument("--seed", type=int, default=0, help="train/test/val splits use seed, seed+1, seed+2")
    sp.add_argument("--n-train", type=int, default=500)
    sp.add_argument("--n-val", type=int, default=100)
    sp.add_argument("--n-test", type=int, default=100)
    sp.add_argument("--size", type=int, default=32, help="image height and width")
    sp.add_argument("--out", required=True, help="dataset directory (manifest.tsv goes here)")
    sp.set_defaults(func=cmd_gendata)

    sp = sub.add_parser("toy2d", help="probe-point trajectories on the 2-D mixture")
    common(sp)
    sp.add_argument("--use-net", metavar="CHECKPOINT", help="use a trained network instead of the exact score")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_toy2d)

    sp = sub.add_parser("bench", help="NFE / wall-time comparison of T scales and the continuous version")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--oracle-score", action="store_true")
    sp.add_argument("--oracle-stub", action="store_true")
    sp.add_argument("--n", type=int, default=10, help="number of inputs")
    sp.add_argument("--timing", action="store_true", help="include wall_ms in the CSV")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    _setup_threads(args.threads)
    try:
        return args.func(args)
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDivergence, IntegrationDivergence, FloatingPointError) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UndefinedMetricError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
