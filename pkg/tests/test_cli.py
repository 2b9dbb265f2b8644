import csv

import pytest

from scoredd.cli import main
from scoredd.formats import read_tensor

TOY_CFG = """\
# small toy run
sde.kind = VE
sde.steps = 101
data.n_train = 300
data.n_test = 20
net.hidden = 16
train.steps = 30
train.batch = 32
detect.t_index = 60,50,40
"""

IMG_CFG = """\
sde.kind = VE
sde.sigma_min = 0.01
sde.sigma_max = 10
sde.steps = 200
data.kind = images
data.manifest = {manifest}
net.base = 2
train.steps = 3
train.batch = 4
detect.t_index = 50,40,30,20,10
"""


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture()
def toy_cfg(tmp_path):
    p = tmp_path / "toy.cfg"
    p.write_text(TOY_CFG)
    return str(p)


@pytest.fixture(scope="module")
def image_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("img")
    assert main(["gendata", "--out", str(root / "data"), "--n-train", "8", "--n-val", "0",
                 "--n-test", "10", "--size", "8"]) == 0
    cfg = root / "img.cfg"
    cfg.write_text(IMG_CFG.format(manifest=root / "data" / "manifest.tsv"))
    assert main(["train", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root, str(cfg), str(root / "run" / "checkpoint.sddm")


def test_missing_key_exits_1(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("train.steps = 2\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "sde.kind" in capsys.readouterr().err


def test_unknown_and_malformed_keys_exit_1(tmp_path, toy_cfg, capsys):
    out = str(tmp_path / "o")
    assert main(["train", "--config", toy_cfg, "--set", "train.stepz=3", "--out", out]) == 1
    assert "train.stepz" in capsys.readouterr().err
    assert main(["train", "--config", toy_cfg, "--set", "train.steps=many", "--out", out]) == 1
    assert main(["train", "--config", toy_cfg, "--set", "sde.kind=XX", "--out", out]) == 1
    assert main(["detect", "--config", toy_cfg, "--set", "detect.t_set=0.5", "--oracle-score", "--out", out]) == 1
    assert main(["detect", "--config", toy_cfg, "--set", "detect.t_index=1", "--set", "detect.r=3",
                 "--oracle-score", "--out", out]) == 1


def test_io_errors_exit_3(tmp_path, toy_cfg):
    out = str(tmp_path / "o")
    assert main(["train", "--config", str(tmp_path / "missing.cfg"), "--out", out]) == 3
    assert main(["detect", "--config", toy_cfg, "--checkpoint", str(tmp_path / "none.sddm"), "--out", out]) == 3
    bad = tmp_path / "bad.sddm"
    bad.write_bytes(b"NOPE" + bytes(12))
    assert main(["detect", "--config", toy_cfg, "--checkpoint", str(bad), "--out", out]) == 3


def test_divergence_exits_2(tmp_path, toy_cfg, capsys):
    assert main(["train", "--config", toy_cfg, "--set", "train.lr=1e200", "--out", str(tmp_path / "o")]) == 2
    assert "divergence" in capsys.readouterr().err


def test_checkpoint_sde_mismatch_exits_1(tmp_path, toy_cfg):
    run = tmp_path / "run"
    assert main(["train", "--config", toy_cfg, "--out", str(run)]) == 0
    assert main(["detect", "--config", toy_cfg, "--set", "sde.steps=201", "--checkpoint",
                 str(run / "checkpoint.sddm"), "--out", str(tmp_path / "d")]) == 1


def test_train_outputs_and_seed_reproducibility(tmp_path, toy_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", toy_cfg, "--seed", "7", "--out", str(a)]) == 0
    assert main(["train", "--config", toy_cfg, "--seed", "7", "--out", str(b)]) == 0
    assert (a / "checkpoint.sddm").read_bytes() == (b / "checkpoint.sddm").read_bytes()
    trace = rows(a / "loss.csv")
    assert len(trace) == 30 and trace[0]["step"] == "0"


def test_image_detect_nfe_and_outputs(image_setup, tmp_path):
    root, cfg, ckpt = image_setup
    out = tmp_path / "det"
    assert main(["detect", "--config", cfg, "--checkpoint", ckpt, "--out", str(out)]) == 0
    r = rows(out / "scores.csv")
    assert len(r) == 10
    assert sum(int(x["nfe"]) for x in r) == 150
    assert read_tensor(out / "maps.sdd").shape == (10, 8, 8)
    assert len(list((out / "pgm").glob("map_*.pgm"))) == 10


def test_stub_scores_are_zero(image_setup, tmp_path):
    _, cfg, _ = image_setup
    out = tmp_path / "stub"
    assert main(["detect", "--config", cfg, "--oracle-stub", "--set", "detect.mode=sde", "--out", str(out)]) == 0
    assert all(float(x["score"]) == 0.0 for x in rows(out / "scores.csv"))


def test_eval_and_single_class(image_setup, tmp_path, capsys):
    _, cfg, ckpt = image_setup
    det = tmp_path / "det"
    assert main(["detect", "--config", cfg, "--checkpoint", ckpt, "--combine", "recon_loss", "--out", str(det)]) == 0
    res = tmp_path / "res.csv"
    assert main(["eval", str(det), "--dataset", "tex", "--config-id", "recon", "--out", str(res)]) == 0
    (row,) = rows(res)
    assert row["dataset"] == "tex" and row["total_nfe"] == "50" and row["wall_ms"] == ""
    assert 0.0 <= float(row["pixel_auroc"]) <= 1.0
    # keep only normal rows: AUROC undefined
    lines = (det / "scores.csv").read_text().splitlines()
    (det / "scores.csv").write_text("\n".join([lines[0]] + [ln for ln in lines[1:] if ln.split(",")[1] == "0"]))
    (det / "masks.sdd").unlink()
    assert main(["eval", str(det), "--out", str(res)]) == 1


def test_toy2d_outputs(tmp_path):
    out = tmp_path / "toy2d"
    assert main(["toy2d", "--out", str(out)]) == 0
    trajs = sorted(p.name for p in out.glob("traj_*.csv"))
    assert len(trajs) == 24
    table = rows(out / "score_diff.csv")
    assert len(table) == 12
    first = rows(out / "traj_p0_t0.6_ode_whole.csv")
    assert len(first) == 61 and first[0]["t"] == "0.600004"
    self_end = rows(out / "traj_p0_t0.6_ode_self.csv")[-1]
    assert abs(float(self_end["x0"]) + 6.0) < 0.5 and abs(float(self_end["x1"]) - 5.0) < 0.5


def test_sample_outputs(tmp_path):
    cfg = tmp_path / "s.cfg"
    cfg.write_text("sde.kind = VE\nsde.steps = 50\n")
    a, b, e = tmp_path / "a", tmp_path / "b", tmp_path / "e"
    assert main(["sample", "--config", str(cfg), "--oracle-score", "--n", "5", "--out", str(a)]) == 0
    assert main(["sample", "--config", str(cfg), "--oracle-score", "--n", "5", "--out", str(b)]) == 0
    assert (a / "samples.csv").read_bytes() == (b / "samples.csv").read_bytes()
    assert read_tensor(a / "samples.sdd").shape == (5, 2)
    assert main(["sample", "--config", str(cfg), "--oracle-score", "--n", "0", "--out", str(e)]) == 0
    assert read_tensor(e / "samples.sdd").shape == (0, 2)
    assert (e / "samples.csv").read_text() == "x0,x1\n"


def test_bench_table(tmp_path, capsys):
    cfg = tmp_path / "b.cfg"
    cfg.write_text("sde.kind = VE\nsde.steps = 2000\ndata.n_train = 100\ndata.n_test = 5\n"
                   "detect.t_index = 250,200,150,100,50\n")
    out = tmp_path / "bench.csv"
    assert main(["bench", "--config", str(cfg), "--oracle-score", "--n", "4", "--out", str(out)]) == 0
    r = {x["config_id"]: x for x in rows(out)}
    assert r["t_scales"]["total_nfe"] == str(4 * 15)
    assert r["continuous"]["total_nfe"] == str(4 * 251)
    assert "wall_ms" not in r["t_scales"]


def test_gendata_manifest(tmp_path):
    out = tmp_path / "d"
    assert main(["gendata", "--out", str(out), "--n-train", "3", "--n-val", "2", "--n-test", "4", "--size", "8"]) == 0
    lines = (out / "manifest.tsv").read_text().splitlines()
    assert len(lines) == 9
    assert sum(ln.split("\t")[1] == "val" for ln in lines) == 2
    assert main(["gendata", "--out", str(out), "--size", "10"]) == 1


def test_bad_threads():
    assert main(["toy2d", "--threads", "0", "--out", "unused"]) == 1
