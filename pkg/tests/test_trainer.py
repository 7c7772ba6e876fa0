import dataclasses
import json

import numpy as np
import pytest
from conftest import TINY

from synergy3d.synthdata import SynthConfig, make_synthetic_basis, sample_dataset
from synergy3d.trainer import (
    TrainConfig,
    TrainingError,
    evaluate,
    format_grid,
    load_model,
    run_ablation_grid,
    table_configs,
    train,
)



@pytest.fixture(scope="module")
def basis():
    return make_synthetic_basis(1, 300)


@pytest.fixture(scope="module")
def toy(basis):
    return sample_dataset(basis, SynthConfig(seed=3, n_samples=200))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(decay_fractions=(0.8, 0.6))
    with pytest.raises(ValueError):
        TrainConfig(decay_fractions=(0.6, 1.0))


def test_lr_schedule_in_log(toy, basis):
    tc = TrainConfig(epochs=10, batch_size=64, lr=0.01, seed=0)
    res = train(toy, basis, TINY, tc)
    lrs = [r["lr"] for r in res.log]
    expected = [0.01 if e < 6 else 0.001 if e < 8 else 0.0001 for e in range(10)]
    np.testing.assert_allclose(lrs, expected, rtol=1e-12)
    assert [r["epoch"] for r in res.log] == list(range(10))
    for r in res.log:
        assert set(r) == {"epoch", "lr", "loss", "val_nme", "val_mae"}
        assert set(r["loss"]) == {"l3dmm", "lmk", "l3dmm_lmk", "consistency", "total"}


def test_zero_lr_keeps_parameters(toy, basis):
    from synergy3d.synergy import SynergyNet

    before = SynergyNet(TINY, basis, seed=4)
    res = train(toy, basis, TINY, TrainConfig(epochs=2, batch_size=64, lr=0.0, seed=4))
    after = dict(res.model.named_parameters())
    for name, p in before.named_parameters():
        np.testing.assert_array_equal(after[name].data, p.data)


def test_toy_run_descends(toy, basis):
    res = train(toy, basis, TINY, TrainConfig(epochs=20, batch_size=32, lr=0.002, seed=0))
    assert res.log[-1]["loss"]["total"] < res.log[0]["loss"]["total"]
    assert 0 <= res.best_epoch < 20


def test_same_seed_same_log(toy, basis, tmp_path):
    tc = TrainConfig(epochs=3, batch_size=64, seed=7)
    train(toy, basis, TINY, tc, out_dir=tmp_path / "a")
    train(toy, basis, TINY, tc, out_dir=tmp_path / "b")
    for name in ("train_log.jsonl", "model.ckpt", "net.cfg", "train.cfg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    other = train(toy, basis, TINY, dataclasses.replace(tc, seed=8))
    first = [json.loads(line) for line in (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()]
    assert first != other.log


def test_checkpoint_round_trip_metrics(toy, basis, tmp_path):
    tc = TrainConfig(epochs=3, batch_size=64, seed=1, checkpoint_every=1)
    res = train(toy, basis, TINY, tc, out_dir=tmp_path)
    assert (tmp_path / "epoch002.ckpt").exists()
    loaded = load_model(res.checkpoint, basis)
    _, val = toy.split()
    assert evaluate(loaded, val) == evaluate(res.model, val)


def test_data_parallel_close_to_single(toy, basis):
    tc = TrainConfig(epochs=2, batch_size=64, seed=2)
    single = train(toy, basis, TINY, tc).log[-1]["loss"]["total"]
    multi = train(toy, basis, TINY, dataclasses.replace(tc, jobs=2)).log[-1]["loss"]["total"]
    # shards see different batch statistics, so only approximate agreement is expected
    assert abs(single - multi) / single < 0.2


def test_nan_loss_aborts(toy, basis):
    bad = toy.subset(np.arange(len(toy)))  # fancy index copies
    bad.landmarks[5, 0, 0] = np.nan
    with pytest.raises(TrainingError, match="epoch 0, batch"):
        train(bad, basis, TINY, TrainConfig(epochs=1, batch_size=256, seed=0))


def test_empty_dataset_rejected(toy, basis):
    with pytest.raises(ValueError):
        train(toy.subset(slice(0, 0)), basis, TINY, TrainConfig(epochs=1))


def test_grid_of_one_equals_train_eval(toy, basis):
    tc = TrainConfig(epochs=2, batch_size=64, seed=5)
    rows = run_ablation_grid(toy, basis, [("full", TINY)], tc)
    dev, test = toy.split()
    res = train(dev, basis, TINY, dataclasses.replace(tc, mode=""))
    assert rows[0].metrics == evaluate(res.model, test)


def test_full_grid_rows_and_order(toy, basis, tmp_path):
    tc = TrainConfig(epochs=1, batch_size=64, seed=0)
    configs = table_configs(TINY, "modes")
    rows = run_ablation_grid(toy, basis, configs, tc, out_dir=tmp_path)
    assert [r.name for r in rows] == ["baseline", "mafa", "l2m", "full"]
    table = format_grid(rows).splitlines()
    assert len(table) == 5
    assert [c.strip() for c in table[0].split("|")][:5] == ["config", "0-30", "30-60", "60-90", "All"]
    assert (tmp_path / "mafa" / "metrics.json").exists()
    again = run_ablation_grid(toy, basis, configs, tc)
    assert [r.as_dict() for r in again] == [r.as_dict() for r in rows]


def test_variant_tables():
    names = [n for n, _ in table_configs(TINY, "attributes")]
    assert names == ["mafa:point", "mafa:point+image", "mafa:all"]
    targets = table_configs(TINY, "targets")
    assert [c.l2m_targets for _, c in targets] == ["pose", "shape+expr", "all"]
    with pytest.raises(ValueError):
        table_configs(TINY, "nope")
