import csv
import json

import numpy as np
import pytest

from geot import gradcheck
from geot.cli import main
from geot.cloudgen import PointCloud, write_cloud
from geot.diffcore import ParamStore, save_checkpoint
from geot.backbone import BackboneConfig, init_backbone
from geot.trainer import LOG_NAME, TrainConfig, train


def _cfg_file(tmp_path, data, **kw):
    cfg = TrainConfig(data=str(data), epochs=1, steps_per_epoch=2, width=8, k_feat=4, k1=3, k2=3, seed=2, **kw)
    path = tmp_path / "run.cfg"
    path.write_text(cfg.to_text())
    return path


def test_gen_split_counts(tmp_path):
    assert main(["gen", "--clouds", "40", "--points", "16", "--classes", "3", "--labeled-ratio", "0.05",
                 "--seed", "7", "--out", str(tmp_path / "d")]) == 0
    assert len(list((tmp_path / "d" / "labeled").glob("*.geopc"))) == 2
    assert len(list((tmp_path / "d" / "unlabeled").glob("*.geopc"))) == 38
    assert len(list((tmp_path / "d" / "test").glob("*.geopc"))) == 4
    assert (tmp_path / "d" / "manifest.txt").exists()


def test_gen_bad_flags(tmp_path):
    assert main(["gen", "--clouds", "4", "--points", "16", "--classes", "3", "--labeled-ratio", "1.5",
                 "--out", str(tmp_path)]) == 2
    assert main(["gen", "--clouds", "x"]) == 2


def test_gen_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen", "--clouds", "2", "--points", "8", "--classes", "2", "--labeled-ratio", "0.5",
                 "--out", str(blocker / "sub")]) == 2


def test_train_and_eval(tmp_path, tiny_data):
    cfg = _cfg_file(tmp_path, tiny_data)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / LOG_NAME).read_text().count("\n") == 1
    report = tmp_path / "metrics.json"
    assert main(["eval", "--checkpoint", str(out / "checkpoint.geotckpt"), "--data", str(tiny_data / "test"),
                 "--out", str(report)]) == 0
    data = json.loads(report.read_text())
    assert {"miou", "dsc", "acc", "per_class_iou", "per_class_dsc", "per_cloud"} <= set(data)
    assert len(data["per_cloud"]) == 2


def test_train_missing_data(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("data = /does/not/exist\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_train_bad_config(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("epochz = 1\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "epochz" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_numerical_failure(tmp_path, tiny_data):
    cfg = _cfg_file(tmp_path, tiny_data, lr=1e300)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_eval_empty_dir(tmp_path, tiny_data):
    res = train(TrainConfig(data=str(tiny_data), epochs=1, steps_per_epoch=1, width=8, k_feat=4), tmp_path / "r")
    (tmp_path / "empty").mkdir()
    assert main(["eval", "--checkpoint", str(res.checkpoint), "--data", str(tmp_path / "empty")]) == 2


def test_eval_version_mismatch(tmp_path, tiny_data):
    bad = tmp_path / "old.geotckpt"
    bad.write_text("GEOTCKPT v0\n")
    assert main(["eval", "--checkpoint", str(bad), "--data", str(tiny_data / "test")]) == 2


def test_eval_perfect_oracle(tmp_path):
    # every point is class 0 and the head is biased hard towards it
    cloud = PointCloud(np.random.default_rng(0).standard_normal((20, 3)), 2, np.zeros(20, dtype=np.int64))
    (tmp_path / "one").mkdir()
    write_cloud(cloud, tmp_path / "one" / "c.geopc")
    bb = BackboneConfig(n_classes=2, width=4, k_feat=3)
    ps = init_backbone(bb)
    ps.set("seg.head.weight", np.zeros((4, 2)))
    ps.set("seg.head.bias", np.array([10.0, 0.0]))
    ckpt = tmp_path / "oracle.geotckpt"
    save_checkpoint(ckpt, ps, {"n_classes": 2, "width": 4, "blocks": 2, "k_feat": 3, "epoch": 0, "opt_step": 0})
    out = tmp_path / "m.json"
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(tmp_path / "one"), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["miou"] == 1.0


def test_gradcheck_subset_passes():
    assert main(["gradcheck", "--paths", "focal,T^C", "--seeds", "2"]) == 0


def test_gradcheck_tiny_tolerance_fails(capsys):
    assert main(["gradcheck", "--paths", "focal", "--tol", "1e-12", "--seeds", "3"]) == 1
    assert "FAILED for: focal" in capsys.readouterr().out


def test_gradcheck_corrupted_path_named(monkeypatch, capsys):
    def corrupted(seed):
        ps = ParamStore()
        ps.add("x", np.array([1.0, 2.0]))
        from geot import diffcore as dc

        def loss(p):
            x = p.tensor("x")
            # forward x^2, backward claims 3x: deliberately wrong
            return dc.tsum(dc.make_op(x.data ** 2, (x,), (lambda g: 3 * x.data * g,)))

        return loss, ps

    monkeypatch.setitem(gradcheck.PATHS, "broken", corrupted)
    assert main(["gradcheck", "--paths", "broken,focal", "--seeds", "1"]) == 1
    out = capsys.readouterr().out
    assert "FAIL broken" in out and "FAILED for: broken" in out and "PASS focal" in out


def test_gradcheck_unknown_path():
    assert main(["gradcheck", "--paths", "nope"]) == 2


def test_ablate_rows_and_consistency(tmp_path, tiny_data):
    cfg = _cfg_file(tmp_path, tiny_data)
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(cfg), "--seeds", "0,1", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert len(rows) == 10 and list(rows[0]) == ["config", "seed", "miou", "dsc", "acc"]
    assert [r["config"] for r in rows[:5]] == ["baseline", "IDTM", "IDTM+PLGR", "IDTM+CLGS", "full"]
    # baseline row equals a direct training run with every switch off
    from geot.trainer import load_config
    direct = train(load_config(cfg).replace(seed=1, use_idtm=False, use_plgr=False, use_clgs=False))
    row = next(r for r in rows if r["config"] == "baseline" and r["seed"] == "1")
    assert float(row["miou"]) == direct.records[-1].miou


def test_ablate_sweep(tmp_path, tiny_data):
    cfg = _cfg_file(tmp_path, tiny_data)
    out = tmp_path / "sw"
    assert main(["ablate", "--config", str(cfg), "--seeds", "0", "--sweep", "lambda", "--values", "0.1,0.99",
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert [r["config"] for r in rows] == ["full@lambda=0.1", "full@lambda=0.99"]


def test_ablate_bad_seeds(tmp_path, tiny_data):
    cfg = _cfg_file(tmp_path, tiny_data)
    assert main(["ablate", "--config", str(cfg), "--seeds", "a,b", "--out", str(tmp_path / "x")]) == 2


def test_ablate_parallel_matches_sequential(tmp_path, tiny_data, monkeypatch):
    cfg = _cfg_file(tmp_path, tiny_data)
    monkeypatch.setenv("GEOT_THREADS", "0")
    assert main(["ablate", "--config", str(cfg), "--seeds", "0", "--out", str(tmp_path / "s")]) == 0
    monkeypatch.setenv("GEOT_THREADS", "2")
    assert main(["ablate", "--config", str(cfg), "--seeds", "0", "--out", str(tmp_path / "p")]) == 0
    assert (tmp_path / "s" / "ablation.csv").read_bytes() == (tmp_path / "p" / "ablation.csv").read_bytes()


def test_module_entry_point():
    import subprocess, sys
    r = subprocess.run([sys.executable, "-m", "geot", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gradcheck" in r.stdout
