import numpy as np
import pytest

from geot.cloudgen import read_dataset
from geot.diffcore import ConfigError
from geot.objective import corrected_unsup_loss
from geot.optim import AdamW
from geot.trainer import (LOG_NAME, TrainConfig, alpha_at, batch_objective, high_lr_epochs, init_model,
                          load_config, load_model, lr_at, parse_config, prepare_batch, pseudo_label, train,
                          train_step)


def test_pseudo_label_examples():
    assert pseudo_label(np.array([[0.2, 0.5, 0.3]])).tolist() == [1]
    assert pseudo_label(np.array([[0.5, 0.5]])).tolist() == [0]
    assert pseudo_label(np.eye(4)[[3, 1, 2]]).tolist() == [3, 1, 2]
    assert pseudo_label(np.eye(2)).dtype.kind == "i"


def test_schedule():
    cfg = TrainConfig(epochs=10, lr=1e-3)
    assert high_lr_epochs(cfg) == 9
    assert lr_at(cfg, 8) == 1e-3 and lr_at(cfg, 9) == pytest.approx(1e-4)
    assert alpha_at(cfg, 0, 100) == 0.0 and alpha_at(cfg, 10, 100) == 1.0 and alpha_at(cfg, 5, 100) == 0.5
    # the long schedule (220 + 30 epochs) maps onto the same 90 % split
    assert high_lr_epochs(TrainConfig(epochs=250)) == 225


def test_parse_config_values_and_errors():
    cfg = parse_config("# comment\nepochs = 3\nuse_plgr = false\nlam = 0.5  # inline\n")
    assert (cfg.epochs, cfg.use_plgr, cfg.lam) == (3, False, 0.5)
    with pytest.raises(ConfigError, match="unknown key 'nope'"):
        parse_config("nope = 1\n")
    with pytest.raises(ConfigError, match="epochs"):
        parse_config("epochs = many\n")
    with pytest.raises(ConfigError, match="lam"):
        parse_config("lam = 1.5\n")
    with pytest.raises(ConfigError, match="key = value"):
        parse_config("just words\n")


def test_config_text_round_trip():
    cfg = TrainConfig(lam=0.99, use_clgs=False, data="x")
    assert parse_config(cfg.to_text()) == cfg


def _batch(tiny_data, cfg, seed=0):
    ds = read_dataset(tiny_data)
    model = init_model(cfg, ds.n_classes)
    rng = np.random.default_rng(seed)
    return ds, model, prepare_batch(ds.labeled[:2], ds.unlabeled[:2], model, cfg, rng)


def test_labeled_path_independent_of_switches(tiny_data, tiny_cfg):
    values = set()
    for switches in [(False, False, False), (True, False, False), (True, True, False), (True, False, True),
                     (True, True, True)]:
        cfg = tiny_cfg.replace(use_idtm=switches[0], use_plgr=switches[1], use_clgs=switches[2])
        ds, model, batch = _batch(tiny_data, cfg)
        values.add(batch_objective(model.params, batch, model, cfg, 1.0)[1].L_s)
    assert len(values) == 1


def test_idtm_off_is_plain_focal(tiny_data, tiny_cfg):
    cfg = tiny_cfg.replace(use_idtm=False, use_plgr=False, use_clgs=False)
    ds, model, batch = _batch(tiny_data, cfg)
    parts = batch_objective(model.params, batch, model, cfg, 1.0)[1]
    from geot.backbone import seg_forward
    P = np.concatenate([seg_forward(v.strong, model.params, model.backbone, neighbors=v.strong_neighbors).data
                        for v in batch.unlabeled])
    Y = np.concatenate([v.pseudo for v in batch.unlabeled])
    assert parts.L_u == corrected_unsup_loss(P, None, Y).item()
    assert parts.L_m == 0.0 and parts.beta == 0.0


def test_uniform_init_loss_is_finite(tiny_data, tiny_cfg):
    cfg = tiny_cfg.replace(use_clgs=False, use_plgr=False)
    ds, model, batch = _batch(tiny_data, cfg)
    parts = batch_objective(model.params, batch, model, cfg, 1.0)[1]
    C = ds.n_classes
    # uniform transition rows mix every prediction into the uniform distribution
    expected = (1 - 1 / C) ** 2 * np.log(C)
    assert parts.L_u == pytest.approx(expected, rel=1e-12)


def test_zero_lr_keeps_params(tiny_data, tiny_cfg):
    ds = read_dataset(tiny_data)
    model = init_model(tiny_cfg, ds.n_classes)
    before = model.params.copy()
    opt = AdamW(model.params, lr=0.0, weight_decay=0.0)
    parts, _ = train_step(ds.labeled[:2], ds.unlabeled[:2], model, opt, tiny_cfg, np.random.default_rng(0), 1.0)
    assert np.isfinite(parts.total)
    for n in before:
        assert np.array_equal(before.value(n), model.params.value(n))


def test_pseudo_labels_are_plain_integers(tiny_data, tiny_cfg):
    _, _, batch = _batch(tiny_data, tiny_cfg)
    for v in batch.unlabeled:
        assert isinstance(v.pseudo, np.ndarray) and v.pseudo.dtype.kind == "i"


def test_one_epoch_smoke(tmp_path, tiny_cfg):
    res = train(tiny_cfg.replace(epochs=1), tmp_path / "run")
    assert len(res.records) == 1
    assert (tmp_path / "run" / LOG_NAME).read_text().count("\n") == 1
    assert res.checkpoint.exists()


def test_determinism_byte_identical_logs(tmp_path, tiny_cfg):
    train(tiny_cfg, tmp_path / "a")
    train(tiny_cfg, tmp_path / "b")
    assert (tmp_path / "a" / LOG_NAME).read_bytes() == (tmp_path / "b" / LOG_NAME).read_bytes()
    assert (tmp_path / "a" / "checkpoint.geotckpt").read_bytes() == (tmp_path / "b" / "checkpoint.geotckpt").read_bytes()


def test_resume_reproduces_uninterrupted_run(tmp_path, tiny_cfg):
    cfg = tiny_cfg.replace(epochs=3)
    train(cfg, tmp_path / "full")
    train(cfg, tmp_path / "part", max_epochs=1)
    train(cfg, tmp_path / "part", resume=tmp_path / "part" / "checkpoint.geotckpt")
    assert (tmp_path / "full" / LOG_NAME).read_bytes() == (tmp_path / "part" / LOG_NAME).read_bytes()


def test_checkpoint_loads_model(tmp_path, tiny_cfg):
    res = train(tiny_cfg.replace(epochs=1), tmp_path)
    model, meta, _ = load_model(res.checkpoint)
    for n in res.model.params:
        assert np.array_equal(model.params.value(n), res.model.params.value(n))
    assert int(meta["epoch"]) == 0


def test_missing_data_names_key(tmp_path):
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("data = /nowhere/at/all\nepochs = 1\n")
    with pytest.raises(ConfigError, match="data"):
        train(load_config(cfg_file))


def test_relative_data_path_resolves(tmp_path, tiny_data):
    cfg_file = tmp_path / "c.cfg"
    import os
    cfg_file.write_text(f"data = {os.path.relpath(tiny_data, tmp_path)}\n")
    assert load_config(cfg_file).data == str(tmp_path / os.path.relpath(tiny_data, tmp_path))


def test_sum_mode_runs(tiny_data, tiny_cfg):
    cfg = tiny_cfg.replace(aggregate="sum")
    ds, model, batch = _batch(tiny_data, cfg)
    total, parts = batch_objective(model.params, batch, model, cfg, 1.0)
    assert np.isfinite(parts.total) and parts.total == pytest.approx(total.item())
