import numpy as np
import pytest

from calpro import datagen, head, trainer
from calpro.head import HeadConfig
from calpro.trainer import TrainConfig


def _ds(seed=0, n_chains=6):
    return datagen.gen_chain_dataset(
        datagen.GeneratorConfig(n_chains=n_chains, chain_length=30, seed=seed))


def _fast_cfg(seed=0, **kw):
    base = dict(learning_rate=3e-3, batch_size=4, max_epochs=15, patience=5, seed=seed)
    base.update(kw)
    return TrainConfig(**base)


class TestTrain:
    def test_zero_epochs_returns_init(self):
        ds = _ds()
        tr = ds.subset(ds.split_indices("train"))
        cfg = _fast_cfg(max_epochs=0, patience=0)
        params, mono, record = trainer.train(cfg, tr, tr)
        init = head.init_head(HeadConfig(init_seed=cfg.seed), ds.features.shape[1])
        assert np.array_equal(params.to_vector(), init.to_vector())
        assert record.epochs == []

    def test_deterministic_record(self):
        ds = _ds(seed=2)
        tr = ds.subset(ds.split_indices("train"))
        outs = [trainer.train(_fast_cfg(seed=5, max_epochs=6), tr, tr) for _ in range(2)]
        assert np.array_equal(outs[0][0].to_vector(), outs[1][0].to_vector())
        assert outs[0][2].to_dict() == outs[1][2].to_dict()

    def test_loss_decreases(self):
        wins = 0
        for seed in range(10):
            ds = _ds(seed=seed)
            tr = ds.subset(ds.split_indices("train"))
            _, _, rec = trainer.train(_fast_cfg(seed=seed), tr, tr)
            if rec.epochs[-1]["loss"] < rec.epochs[0]["loss"]:
                wins += 1
        assert wins >= 9

    def test_returns_best_epoch_params(self):
        ds = _ds(seed=3)
        tr = ds.subset(ds.split_indices("train"))
        val = ds.subset(ds.split_indices("calibration"))
        params, _, rec = trainer.train(_fast_cfg(seed=3, max_epochs=20, patience=20), tr, val)
        eces = [e["val_ece"] for e in rec.epochs]
        assert rec.selected_epoch == int(np.argmin(eces))

    def test_does_not_mutate_dataset(self):
        ds = _ds(seed=4)
        tr = ds.subset(ds.split_indices("train"))
        before = tr.features.copy()
        trainer.train(_fast_cfg(seed=4, max_epochs=3, patience=2), tr, tr)
        assert np.array_equal(tr.features, before)

    def test_empty_dataset_rejected(self):
        ds = _ds()
        tr = ds.subset(ds.split_indices("train"))
        empty = ds.subset(np.array([], dtype=int))
        with pytest.raises(ValueError):
            trainer.train(_fast_cfg(), empty, tr)

    def test_record_excludes_wall_clock(self):
        ds = _ds(seed=5)
        tr = ds.subset(ds.split_indices("train"))
        _, _, rec = trainer.train(_fast_cfg(seed=5, max_epochs=2, patience=1), tr, tr)
        assert rec.wall_clock > 0
        assert "wall_clock" not in rec.to_dict()


class TestValidationEce:
    def test_range(self, trained):
        val = trainer.validation_ece(trained["params"], trained["test_ds"])
        assert 0.0 <= val <= 1.0

    def test_empty_rejected(self, trained, small_chain_ds):
        empty = small_chain_ds.subset(np.array([], dtype=int))
        with pytest.raises(ValueError):
            trainer.validation_ece(trained["params"], empty)

    def test_trained_beats_random(self):
        """Early stopping is only meaningful if the proxy ranks a trained
        head ahead of an untrained one most of the time."""
        wins = 0
        for seed in range(10):
            ds = _ds(seed=seed + 100, n_chains=8)
            tr = ds.subset(ds.split_indices("train"))
            val = ds.subset(ds.split_indices("calibration"))
            trained_p, _, _ = trainer.train(_fast_cfg(seed=seed, max_epochs=25), tr, val)
            random_p = head.init_head(HeadConfig(init_seed=seed + 50), ds.features.shape[1])
            if trainer.validation_ece(trained_p, val) <= trainer.validation_ece(random_p, val):
                wins += 1
        assert wins >= 6


class TestConfigValidation:
    def test_bad_values(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0).validate()
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0).validate()
        with pytest.raises(ValueError):
            TrainConfig(max_epochs=10, patience=20).validate()
