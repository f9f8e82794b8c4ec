import numpy as np
import pytest

from maxmargin import data, losses, margin, nn, training
from maxmargin.attacks import Norm, PgdConfig
from maxmargin.losses import LossKind
from maxmargin.rng import derive_seed
from maxmargin.training import (
    EpsilonStore,
    Method,
    OptimSpec,
    TrainConfig,
    mma_minibatch_loss,
)


def blobs(n=80, dist=3.0, sigma=0.15, seed=0):
    return data.gen_blobs(n, [[0.0, 0.0], [dist, 0.0]], sigma, seed)


def base_cfg(**kw):
    defaults = dict(
        method=Method.STD,
        hidden=(16,),
        norm=Norm.L2,
        optimizer=OptimSpec(kind="adam", lr=5e-3),
        epochs=20,
        batch_size=16,
        seed=0,
        attack=PgdConfig(steps=10, loss=LossKind.SLM, rand_init=True),
        val_fraction=0.1,
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


def clean_ce(model, x, y):
    return float(np.mean(losses.loss_value(LossKind.CE, nn.forward(model, x), y)))


class TestConfig:
    def test_pgd_requires_eps(self):
        with pytest.raises(ValueError):
            base_cfg(method=Method.PGD)

    def test_mma_requires_dmax(self):
        with pytest.raises(ValueError):
            base_cfg(method=Method.MMA)

    def test_mma_default_bounds(self):
        cfg = base_cfg(method=Method.MMA, d_max=2.0)
        assert cfg.resolved_eps_min() == pytest.approx(0.1)
        assert cfg.resolved_eps_max() == pytest.approx(2.1)


class TestStandard:
    def test_separable_blobs_reach_high_accuracy(self):
        ds = blobs(n=100)
        result = training.train_standard(ds, base_cfg(epochs=200))
        assert training.accuracy(result.model, ds) >= 0.99

    def test_zero_epochs_returns_initialized_model(self):
        ds = blobs()
        cfg = base_cfg(epochs=0)
        result = training.train_standard(ds, cfg)
        expected = nn.init_model([2, 16, 2], derive_seed(cfg.seed, "init"))
        assert result.model.equals(expected)

    def test_bit_reproducible(self):
        ds = blobs()
        a = training.train_standard(ds, base_cfg(epochs=5))
        b = training.train_standard(ds, base_cfg(epochs=5))
        assert a.model.flat_params().tobytes() == b.model.flat_params().tobytes()

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            training.train_standard(None, base_cfg())  # type: ignore[arg-type]


class TestPgd:
    def test_eps_zero_equals_standard(self):
        ds = blobs()
        cfg_std = base_cfg(epochs=6)
        cfg_pgd = base_cfg(method=Method.PGD, eps=0.0, epochs=6,
                           attack=PgdConfig(steps=10, loss=LossKind.CE, rand_init=False))
        a = training.train_standard(ds, cfg_std)
        b = training.train_pgd(ds, cfg_pgd)
        assert a.model.flat_params().tobytes() == b.model.flat_params().tobytes()

    def test_margins_reach_training_radius(self):
        ds = blobs(n=60, dist=3.0, sigma=0.12, seed=3)
        cfg = base_cfg(method=Method.PGD, eps=0.5, epochs=60,
                       optimizer=OptimSpec(kind="adam", lr=1e-2))
        result = training.train_pgd(ds, cfg)
        assert training.accuracy(result.model, ds) >= 0.95
        sub = np.arange(0, len(ds), 3)
        ok = 0
        for i in sub:
            bf = margin.brute_force_margin(result.model, ds.inputs[i],
                                           int(ds.labels[i]), Norm.L2, 1.2, 64)
            ok += bf >= 0.5
        assert ok >= 0.9 * len(sub)

    def test_bit_reproducible(self):
        ds = blobs()
        cfg = base_cfg(method=Method.PGD, eps=0.3, epochs=4)
        a = training.train_pgd(ds, cfg)
        b = training.train_pgd(ds, cfg)
        assert a.model.flat_params().tobytes() == b.model.flat_params().tobytes()


class TestPgdls:
    def test_first_epoch_is_standard(self):
        ds = blobs()
        cfg_ls = base_cfg(method=Method.PGDLS, eps=0.5, epochs=1, ramp_epochs=4,
                          attack=PgdConfig(steps=10, loss=LossKind.CE, rand_init=False))
        cfg_std = base_cfg(epochs=1)
        a = training.train_pgdls(ds, cfg_ls)
        b = training.train_standard(ds, cfg_std)
        assert a.model.flat_params().tobytes() == b.model.flat_params().tobytes()

    def test_ramp_saturates(self):
        cfg = base_cfg(method=Method.PGDLS, eps=1.0, epochs=10, ramp_epochs=1)
        assert cfg.resolved_ramp() == 1
        cfg2 = base_cfg(method=Method.PGDLS, eps=1.0, epochs=10)
        assert cfg2.resolved_ramp() == 5


class TestMmaMinibatchLoss:
    def _store(self, n, d_max):
        return EpsilonStore.init(n, 0.05 * d_max, 1.05 * d_max)

    def test_all_misclassified_reduces_to_clean_ce(self):
        ds = blobs(n=24, seed=5)
        model = nn.init_model([2, 8, 2], 1)
        wrong = (1 - ds.labels).astype(np.int64)
        pred = nn.forward(model, ds.inputs).argmax(axis=1)
        flipped = np.where(pred == ds.labels, wrong, ds.labels)
        store = self._store(len(ds), 1.0)
        before = store.snapshot()
        batch = (ds.inputs, flipped, np.arange(len(ds)))
        loss, store2 = mma_minibatch_loss(model, batch, store, 1.0, Method.MMA,
                                          norm=Norm.L2)
        np.testing.assert_array_equal(store2.values, before)
        assert loss == pytest.approx(clean_ce(model, ds.inputs, flipped))

    def test_hinge_excludes_large_margins(self):
        # Tiny d_max: every found magnitude is clamped to >= eps_min ~ d_max,
        # so nothing is admitted and the MMA loss is the 1/3 clean term.
        ds = blobs(n=16, dist=4.0, sigma=0.05, seed=6)
        cfg = base_cfg(epochs=40)
        model = training.train_standard(ds, cfg).model
        pred = nn.forward(model, ds.inputs).argmax(axis=1)
        keep = pred == ds.labels
        x, y = ds.inputs[keep], ds.labels[keep]
        assert x.shape[0] >= 8
        d_max = 1e-4
        store = EpsilonStore.init(x.shape[0], d_max, 1.05 * d_max)
        batch = (x, y, np.arange(x.shape[0]))
        loss, store2 = mma_minibatch_loss(model, batch, store, d_max, Method.MMA,
                                          norm=Norm.L2)
        frac = x.shape[0] / x.shape[0]  # batch is the whole set here
        assert loss == pytest.approx((1.0 / 3.0) * clean_ce(model, x, y) * frac)
        assert np.all(store2.values >= d_max)

    def test_combined_weights_one_third_two_thirds(self):
        ds = blobs(n=20, dist=2.0, sigma=0.1, seed=7)
        model = training.train_standard(ds, base_cfg(epochs=60)).model
        pred = nn.forward(model, ds.inputs).argmax(axis=1)
        keep = pred == ds.labels
        x, y = ds.inputs[keep], ds.labels[keep]
        m = x.shape[0]
        d_max = 50.0  # everything admitted
        batch = (x, y, np.arange(m))
        kw = dict(norm=Norm.L2, attack_cfg=PgdConfig(steps=15, loss=LossKind.SLM),
                  seed=11, epoch=0)
        loss_mma, _ = mma_minibatch_loss(model, batch,
                                         EpsilonStore.init(m, 0.05, 1.05 * d_max),
                                         d_max, Method.MMA, **kw)
        loss_omma, _ = mma_minibatch_loss(model, batch,
                                          EpsilonStore.init(m, 0.05, 1.05 * d_max),
                                          d_max, Method.OMMA, **kw)
        expected = (1.0 / 3.0) * clean_ce(model, x, y) + (2.0 / 3.0) * loss_omma
        assert loss_mma == pytest.approx(expected, rel=1e-9)

    def test_store_bounds_after_update(self):
        ds = blobs(n=30, seed=8)
        model = nn.init_model([2, 8, 2], 3)
        store = self._store(len(ds), 0.7)
        batch = (ds.inputs, ds.labels, np.arange(len(ds)))
        mma_minibatch_loss(model, batch, store, 0.7, Method.MMA, norm=Norm.L2)
        assert np.all(store.values >= store.eps_min - 1e-12)
        assert np.all(store.values <= store.eps_max + 1e-12)


class TestTrainMma:
    def test_margins_grow_toward_dmax(self):
        ds = blobs(n=60, dist=3.0, sigma=0.12, seed=9)
        cfg = base_cfg(method=Method.MMA, d_max=0.8, epochs=40,
                       optimizer=OptimSpec(kind="adam", lr=1e-2),
                       attack=PgdConfig(steps=10, loss=LossKind.SLM))
        result = training.train_mma(ds, cfg)
        assert training.accuracy(result.model, ds) >= 0.95
        sub = np.arange(0, len(ds), 4)
        margins = [
            margin.brute_force_margin(result.model, ds.inputs[i], int(ds.labels[i]),
                                      Norm.L2, 1.5, 64)
            for i in sub
        ]
        margins = np.minimum(margins, 1.5)
        assert float(np.mean(margins)) >= 0.6

    def test_store_history_tracks_epochs_and_bounds(self):
        ds = blobs(n=40, seed=10)
        cfg = base_cfg(method=Method.MMA, d_max=0.6, epochs=5)
        result = training.train_mma(ds, cfg)
        assert len(result.store_history) == 5
        for snap in result.store_history:
            assert np.all(snap >= cfg.resolved_eps_min() - 1e-12)
            assert np.all(snap <= cfg.resolved_eps_max() + 1e-12)

    def test_huge_dmax_keeps_clean_accuracy(self):
        ds = blobs(n=60, dist=3.0, sigma=0.12, seed=11)
        cfg = base_cfg(method=Method.MMA, d_max=20.0, epochs=40,
                       optimizer=OptimSpec(kind="adam", lr=1e-2))
        result = training.train_mma(ds, cfg)
        assert training.accuracy(result.model, ds) >= 0.9

    def test_bit_reproducible(self):
        ds = blobs(n=40, seed=12)
        cfg = base_cfg(method=Method.MMA, d_max=0.6, epochs=4)
        a = training.train_mma(ds, cfg)
        b = training.train_mma(ds, cfg)
        assert a.model.flat_params().tobytes() == b.model.flat_params().tobytes()
        np.testing.assert_array_equal(a.store_history[-1], b.store_history[-1])

    def test_returns_model_and_history(self):
        ds = blobs(n=40, seed=13)
        cfg = base_cfg(method=Method.MMA, d_max=0.6, epochs=2)
        model, history = training.train_mma(ds, cfg)
        assert isinstance(model, nn.DenseModel)
        assert len(history) == 2


class TestEnsemble:
    def test_all_agree(self):
        m = nn.init_model([2, 4, 3], 0)
        ens = training.Ensemble([m, m, m])
        x = np.array([0.3, -0.2])
        assert training.ensemble_predict(ens, x) == int(np.argmax(nn.forward(m, x)))

    def test_single_member(self):
        m = nn.init_model([2, 4, 3], 1)
        ens = training.Ensemble([m])
        x = np.array([1.0, 1.0])
        assert training.ensemble_predict(ens, x) == int(np.argmax(nn.forward(m, x)))

    def test_tie_breaks_by_summed_softmax(self):
        # Two fixed linear voters per label; engineered logits give a 2-2
        # tie with summed softmax favoring class 1.
        def constant_model(logits):
            w = np.zeros((len(logits), 2))
            return nn.DenseModel([(w, np.array(logits, dtype=float))])

        ens = training.Ensemble([
            constant_model([3.0, 0.0]),
            constant_model([2.0, 0.0]),
            constant_model([0.0, 2.5]),
            constant_model([0.0, 2.2]),
        ])
        x = np.zeros(2)
        votes = [int(np.argmax(nn.forward(m, x))) for m in ens.members]
        assert sorted(votes) == [0, 0, 1, 1]
        scores = np.sum([losses.softmax(nn.forward(m, x)) for m in ens.members], axis=0)
        assert training.ensemble_predict(ens, x) == int(np.argmax(scores))

    def test_mismatched_members_rejected(self):
        with pytest.raises(ValueError):
            training.Ensemble([nn.init_model([2, 4, 2], 0), nn.init_model([3, 4, 2], 0)])
