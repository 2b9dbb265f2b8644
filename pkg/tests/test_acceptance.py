"""One pass/fail test per acceptance criterion, at the stated tolerances.

Criteria that cannot be met by a faithful implementation are left failing;
the supplementary tests at the end pin what the implementation does deliver.
"""

import filecmp
import os
import time

import numpy as np
import pytest

from scoredd import recipes as R
from scoredd.cli import main
from scoredd.datakit import PROBE_LABELS, PROBE_POINTS
from scoredd.detector import DetectConfig, continuous_baseline, detect, detect_one, grid_t_set
from scoredd.evaluation import auroc, pixel_auroc
from scoredd.formats import read_pgm, to_uint8
from scoredd.integrator import SelfScoreStub, advance_pair, init_pair, run_pair, sample_streams
from scoredd.nets import ConvScoreNet, MlpScoreNet
from scoredd.oracle import OracleScore, marginal_log_density, marginal_score, reference_mixture
from scoredd.sde import SdeSpec, marginal_params, nearest_grid_index, simulate_forward, time_grid
from scoredd.trainer import dsm_loss

KINDS = [SdeSpec.ve(), SdeSpec.vp(), SdeSpec.subvp()]
GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


def kind_id(s):
    return s.kind


# -- 1 -------------------------------------------------------------------------


def test_c01_transition_density_fidelity():
    x0 = np.array([1.0, -2.0])
    t_start = time.process_time()
    for spec in KINDS:
        for i, t in enumerate((0.25, 0.5, 1.0)):
            x = simulate_forward(spec, x0, t, 10_000, np.random.default_rng([0, i]), n_steps=1000)
            mu, sigma = marginal_params(spec, t)
            scale = np.sqrt((mu * x0) ** 2 + sigma**2)
            assert np.all(np.abs(x.mean(axis=0) - mu * x0) < 0.02 * scale), (spec.kind, t)
            # isotropic kernel: pool the per-coordinate variances
            assert abs(x.var(axis=0).mean() / sigma**2 - 1) < 0.02, (spec.kind, t)
    assert time.process_time() - t_start < 30


# -- 2 -------------------------------------------------------------------------


@pytest.mark.parametrize("spec", [SdeSpec.ve(0.1, 20.0), SdeSpec.vp(), SdeSpec.subvp()], ids=kind_id)
def test_c02_oracle_gradient_identity(spec):
    mix = reference_mixture()
    rng = np.random.default_rng(0)
    x = rng.uniform(-10, 10, (100, 2))
    t = rng.uniform(spec.epsilon, 1.0, 100)
    t_start = time.process_time()
    score = marginal_score(mix, spec, x, t)
    for i in range(100):
        _, sigma = marginal_params(spec, t[i])
        h = 1e-3 * np.sqrt(sigma**2 + 1e-2)
        fd = []
        for e in np.eye(2):
            f = lambda d: marginal_log_density(mix, spec, x[i] + d * e, t[i])  # noqa: E731
            fd.append((-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h))
        assert np.linalg.norm(score[i] - fd) / np.linalg.norm(score[i]) < 1e-6
    assert time.process_time() - t_start < 5


# -- 3 -------------------------------------------------------------------------


def _max_rel_grad_error(net, x, t, n_probe, seed=0, h=1e-6):
    rng = np.random.default_rng(seed)
    for k, v in net.params.items():
        net.params[k] = rng.standard_normal(v.shape) * 0.3
    u = rng.standard_normal(net.forward(x, t).shape)
    grads = net.backward_params(x, t, u)
    worst = 0.0
    for name, p in net.params.items():
        flat = p.reshape(-1)
        for i in rng.choice(flat.size, size=min(n_probe, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            fp = np.sum(u * net.forward(x, t))
            flat[i] = old - h
            fm = np.sum(u * net.forward(x, t))
            flat[i] = old
            num = (fp - fm) / (2 * h)
            ana = grads[name].reshape(-1)[i]
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    return worst


def test_c03_network_gradient_check():
    t_start = time.process_time()
    rng = np.random.default_rng(1)
    mlp = MlpScoreNet(dim=2, hidden=128, sde=R.TOY_SPEC, data_var=17.0)
    assert _max_rel_grad_error(mlp, rng.standard_normal((8, 2)) * 4, rng.uniform(0.01, 1, 8), 25) < 1e-4
    conv = ConvScoreNet(16, 16, 1, base=4, sde=R.IMAGE_SPEC, data_var=0.27)
    assert _max_rel_grad_error(conv, rng.uniform(0, 1, (2, 1, 16, 16)), rng.uniform(0.01, 1, 2), 8) < 1e-4
    assert time.process_time() - t_start < 60


# -- 4 -------------------------------------------------------------------------


class _ZeroNet:
    def forward(self, x, t):
        return np.zeros_like(np.asarray(x, dtype=np.float64))


@pytest.mark.parametrize("spec", KINDS, ids=kind_id)
def test_c04_dsm_ground_truth_zero(spec):
    rng = np.random.default_rng(0)
    for shape in ((64, 2), (7, 1, 8, 8)):
        x0 = rng.standard_normal(shape) * 3
        loss, _ = dsm_loss(SelfScoreStub(spec, x0), spec, x0, rng, with_grad=False)
        assert abs(loss) < 1e-12
    d = 2
    x0 = rng.standard_normal((10_000, d))
    loss, _ = dsm_loss(_ZeroNet(), spec, x0, rng, with_grad=False)
    assert abs(loss - d / 2) <= 0.03 * d / 2


# -- 5 -------------------------------------------------------------------------


def _probe_runs(t_req, mode="ode", spec=R.TOY_SPEC, seed=0):
    """Full paired runs of the three probe points, as ``scoredd toy2d`` does them."""
    mix = reference_mixture()
    orc = OracleScore(mix, spec)
    k = nearest_grid_index(spec, t_req)
    out = []
    for i, p in enumerate(PROBE_POINTS):
        pair = run_pair(spec, orc, p[None], time_grid(spec)[k], k, mode, sample_streams(seed, [i], k))
        sw = orc.forward(pair.x_whole, pair.t_current)
        ss = orc.forward(pair.x_self, pair.t_current)
        end = pair.x_whole[0]
        out.append({
            "score_diff": float(np.sum((sw - ss) ** 2)),
            "return": float(np.linalg.norm(end - p)),
            "mode": float(np.min(np.linalg.norm(mix.means - end, axis=1))),
            "self_return": float(np.linalg.norm(pair.x_self[0] - p)),
        })
    return out


def test_c05_probe_points_oracle():
    t_start = time.process_time()
    runs = _probe_runs(0.6)
    assert time.process_time() - t_start < 10
    anomaly, normals = runs[0], runs[1:]
    assert PROBE_LABELS.tolist() == [1, 0, 0]
    assert all(r["score_diff"] < anomaly["score_diff"] for r in normals)
    assert anomaly["mode"] < 1.5
    assert all(r["return"] < 0.5 for r in normals)


# -- 6 -------------------------------------------------------------------------


def _self_error(spec, x0, t_start, mode, seed):
    """Self-branch end error for a full run from ``t_start`` down to epsilon."""
    k = nearest_grid_index(spec, t_start)
    streams = sample_streams(seed, range(len(x0)))
    pair = init_pair(spec, x0, time_grid(spec)[k], streams)
    z0 = pair.z.copy()
    advance_pair(spec, SelfScoreStub(spec, x0), pair, k, mode, streams)
    if mode == "ode":
        # the self trajectory ends at mu(eps) x0 + sigma(eps) z0, not at x0
        mu, sigma = marginal_params(spec, spec.epsilon)
        return np.linalg.norm(pair.x_self - (mu * x0 + sigma * z0), axis=1)
    return np.linalg.norm(pair.x_self - x0, axis=1)


@pytest.mark.parametrize("kind", ["VE", "VP", "SubVP"])
def test_c06_self_trajectory_convergence(kind):
    make = {"VE": SdeSpec.ve, "VP": SdeSpec.vp, "SubVP": SdeSpec.subvp}[kind]
    x0 = np.random.default_rng(0).standard_normal((50, 2)) * 3
    e1, e2 = (_self_error(make(steps=s), x0, 1.0, "ode", 1).mean() for s in (1000, 2000))
    sde1, sde2 = (_self_error(make(steps=s), np.tile(x0[:1], (100, 1)), 1.0, "sde", 1).mean() for s in (1000, 2000))
    assert sde2 < sde1
    assert 0.375 <= e2 / e1 <= 0.625, f"error ratio {e2 / e1:.3f}"


# -- 7 -------------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["ode", "sde"])
def test_c07_null_detector(mode):
    spec = SdeSpec.ve(steps=2000)
    x = np.random.default_rng(3).uniform(0, 1, (100, 1, 16, 16))
    res = detect(SelfScoreStub(spec, x), spec, DetectConfig(grid_t_set(spec, [250, 200, 150, 100, 50]), mode=mode), x)
    np.testing.assert_array_equal(res.maps, 0.0)
    np.testing.assert_array_equal(res.scores, 0.0)


# -- 8 -------------------------------------------------------------------------


def test_c08_toy_detection(toy_net, toy_test_xy):
    net, trace, cpu_s = toy_net
    x, y = toy_test_xy
    assert len(trace) == 20000 and cpu_s < 600
    res = detect(net, R.TOY_SPEC, DetectConfig(grid_t_set(R.TOY_SPEC, R.TOY_T_INDEX)), x)
    assert np.all(res.nfe == 15)
    assert auroc(res.scores, y) >= 0.95
    orc = OracleScore(reference_mixture(), R.TOY_SPEC)
    ceiling = detect(orc, R.TOY_SPEC, DetectConfig(grid_t_set(R.TOY_SPEC, R.TOY_T_INDEX),
                                                   combine="score_diff"), x)
    assert auroc(ceiling.scores, y) >= 0.99


# -- 9 -------------------------------------------------------------------------


def _ablation(net, x, y):
    t_scales = auroc(detect(net, R.TOY_SPEC, DetectConfig(grid_t_set(R.TOY_SPEC, R.TOY_T_INDEX)), x).scores, y)
    sd, rl, _ = continuous_baseline(net, R.TOY_SPEC, x, max(R.TOY_T_INDEX))
    return t_scales, auroc(sd, y), auroc(rl, y)


def test_c09_ablation_direction(toy_net, toy_test_xy):
    t_scales, cont_sd, recon = _ablation(toy_net[0], *toy_test_xy)
    assert t_scales >= cont_sd, (t_scales, cont_sd, recon)
    assert cont_sd >= recon, (t_scales, cont_sd, recon)


# -- 10 ------------------------------------------------------------------------


class _Counted:
    def __init__(self, net):
        self.net, self.tap_ids, self.calls = net, net.tap_ids, 0

    def forward(self, x, t):
        self.calls += 1
        return self.net.forward(x, t)

    def forward_with_taps(self, x, t, taps=None):
        self.calls += 1
        return self.net.forward_with_taps(x, t, taps)


def test_c10_nfe_accounting():
    spec = SdeSpec.ve(steps=2000)
    net = _Counted(ConvScoreNet(8, 8, 1, base=2, sde=spec))
    x0 = np.random.default_rng(0).uniform(0, 1, (1, 8, 8))
    _, nfe = detect_one(net, spec, DetectConfig(grid_t_set(spec, [250, 200, 150, 100, 50]), r=1), x0)
    assert nfe == 15 and net.calls == 15
    net.calls = 0
    _, _, nfe = continuous_baseline(net, spec, x0[None], 250)
    assert nfe == 251 and net.calls == 251


# -- 11 ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def image_maps(image_net):
    net = image_net[0]
    test = R.image_split("test", 100)
    res = detect(net, R.IMAGE_SPEC, DetectConfig(grid_t_set(R.IMAGE_SPEC, R.IMAGE_T_INDEX)), test.images)
    return test, res


def test_c11_image_pipeline(image_net, image_maps):
    _, trace, cpu_s = image_net
    test, res = image_maps
    assert len(trace) == R.IMAGE_TRAIN.steps and cpu_s < 7200
    assert len(test) == 100
    assert pixel_auroc(res.maps, test.masks) >= 0.85
    assert auroc(res.scores, test.labels) >= 0.90


def test_c11_golden_maps_localize(image_maps):
    test, res = image_maps
    names = sorted(f for f in os.listdir(GOLDEN) if f.startswith("map_"))
    assert names
    for name in names:
        i = int(name[4:8])
        golden = read_pgm(os.path.join(GOLDEN, name)).astype(int)
        fresh = to_uint8(res.maps[i]).astype(int)
        assert np.abs(fresh - golden).mean() < 2.0, name
        if test.labels[i]:
            m = test.masks[i].astype(bool)
            assert golden[m].mean() > 2 * golden[~m].mean(), name


# -- 12 ------------------------------------------------------------------------

CLI_TOY = """\
sde.kind = VE
sde.steps = 101
data.n_train = 400
data.n_test = 30
net.hidden = 32
train.steps = 40
train.batch = 32
detect.t_index = 60,50,40
"""

CLI_IMG = """\
sde.kind = VE
sde.sigma_min = 0.01
sde.sigma_max = 10
sde.steps = 400
data.kind = images
data.manifest = {manifest}
net.base = 4
train.steps = 4
train.batch = 4
detect.t_index = 100,80,60
detect.mode = sde
"""


def _cli_outputs(root, threads):
    th = ["--threads", str(threads)]
    root.mkdir()
    (root / "toy.cfg").write_text(CLI_TOY)
    data = root / "data"
    assert main(["gendata", "--out", str(data), "--n-train", "12", "--n-val", "0", "--n-test", "70",
                 "--size", "16"] + th) == 0
    (root / "img.cfg").write_text(CLI_IMG.format(manifest=data / "manifest.tsv"))
    toy, img = str(root / "toy.cfg"), str(root / "img.cfg")
    cmds = [
        ["train", "--config", toy, "--out", str(root / "toy_train")],
        ["train", "--config", img, "--out", str(root / "img_train")],
        ["sample", "--config", toy, "--checkpoint", str(root / "toy_train" / "checkpoint.sddm"), "--n", "20",
         "--mode", "sde", "--out", str(root / "sample")],
        ["detect", "--config", toy, "--checkpoint", str(root / "toy_train" / "checkpoint.sddm"),
         "--out", str(root / "toy_det")],
        ["detect", "--config", toy, "--oracle-score", "--continuous", "--out", str(root / "toy_cont")],
        ["detect", "--config", img, "--checkpoint", str(root / "img_train" / "checkpoint.sddm"),
         "--out", str(root / "img_det")],
        ["eval", str(root / "img_det"), "--out", str(root / "eval.csv")],
        ["toy2d", "--out", str(root / "toy2d")],
        ["bench", "--config", toy, "--oracle-score", "--n", "3", "--out", str(root / "bench.csv")],
    ]
    for cmd in cmds:
        assert main(cmd[:1] + th + cmd[1:]) == 0, cmd
    files = []
    for dirpath, _, names in os.walk(root):
        files += [os.path.relpath(os.path.join(dirpath, n), root) for n in names
                  if n.endswith((".csv", ".sdd", ".sddm", ".pgm", ".tsv"))]
    return sorted(files)


def test_c12_cli_determinism(tmp_path):
    a = _cli_outputs(tmp_path / "a", 1)
    b = _cli_outputs(tmp_path / "b", 4)
    assert a == b and len(a) > 100
    different = [f for f in a if not filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)]
    assert different == []


# -- supplementary -------------------------------------------------------------


def test_supp_probe_oracle_values_frozen():
    # values of the t=0.6 flow-ODE oracle run, pinned at first run
    runs = _probe_runs(0.6)
    np.testing.assert_allclose([r["score_diff"] for r in runs], PROBE_SCORE_DIFF, rtol=1e-6)
    np.testing.assert_allclose([r["return"] for r in runs], PROBE_RETURN, rtol=1e-6)
    assert all(r["self_return"] < 0.5 for r in runs)


def test_supp_shorter_runs_return_closer():
    # averaged over noise draws, starting at t=0.6 returns closer than t=1.0
    near = np.mean([r["return"] for s in range(20) for r in _probe_runs(0.6, seed=s)[1:]])
    far = np.mean([r["return"] for s in range(20) for r in _probe_runs(1.0, seed=s)[1:]])
    assert near < far


def test_supp_ablation_direction_large_sample(toy_net):
    bench = R.toy_benchmark(5, n_train=10, n_test=3000)
    x = np.concatenate([bench.test_normal, bench.test_anomalous])
    y = np.r_[np.zeros(3000), np.ones(3000)].astype(int)
    t_scales, cont_sd, recon = _ablation(toy_net[0], x, y)
    assert t_scales >= cont_sd >= recon, (t_scales, cont_sd, recon)


PROBE_SCORE_DIFF = [90.10034193787465, 2.1242052645028813, 1.0777341815122952]
PROBE_RETURN = [6.605702525606936, 1.6273621549463448, 1.1589158477172683]
