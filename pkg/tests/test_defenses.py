import numpy as np
import pytest

from malrobust.data import Dataset, ManipulationPolicy, generate_synthetic
from malrobust.defenses import (DefenseConfig, DenoisingAutoencoder,
                                EnsembleClassifier, HardenedClassifier,
                                _dae_param_grads, _salt_pepper_batch,
                                adversarial_training_loss, dae_loss,
                                ensemble_predict, inner_maximize,
                                load_ensemble, load_hardened, salt_pepper,
                                save_ensemble, save_hardened, train_ensemble,
                                train_hardened)
from malrobust.nn import (AdamState, DenseStack, MlpClassifier,
                          _batch_param_gradients, adam_step, cross_entropy)


def identity_autoencoder(dim):
    enc = DenseStack([np.eye(dim)], [np.zeros(dim)], "relu", activate_last=True)
    dec = DenseStack([np.eye(dim)], [np.zeros(dim)], "relu", activate_last=False)
    return DenoisingAutoencoder(enc, dec, dim)


def small_task(dim=24, seed=3):
    ds, _ = generate_synthetic(dim, 2, 40, 0.05, seed=seed)
    policy = ManipulationPolicy(np.ones(dim, bool), np.zeros(dim, bool))
    return ds, policy


class TestSaltPepper:
    def test_zero_ratio_identity(self, rng):
        x = rng.random(30)
        assert np.array_equal(salt_pepper(x, 0.0, seed=1), x)

    def test_full_ratio_binary(self, rng):
        x = rng.random(30)
        out = salt_pepper(x, 1.0, seed=2)
        assert np.all((out == 0.0) | (out == 1.0))

    def test_reproducible(self, rng):
        x = rng.random(30)
        assert np.array_equal(salt_pepper(x, 0.4, seed=3), salt_pepper(x, 0.4, seed=3))

    def test_touched_count(self, rng):
        x = np.full(40, 0.5)
        out = salt_pepper(x, 0.25, seed=4)
        changed = np.sum(out != x)
        assert changed <= 10  # floor(0.25 * 40), some may coincide by value
        assert np.all(np.isin(out[out != x], [0.0, 1.0]))


class TestDaeLoss:
    def test_identity_ae_zero_loss(self):
        ae = identity_autoencoder(6)
        x = np.array([0.0, 1.0, 1.0, 0.0, 1.0, 0.0])
        assert dae_loss(ae, x, x.copy(), x.copy()) == 0.0

    def test_identity_ae_k_over_d(self):
        d = 8
        ae = identity_autoencoder(d)
        x = np.zeros(d)
        noisy = x.copy()
        noisy[[1, 4, 6]] = 1.0  # k = 3 coordinates off by 1
        assert abs(dae_loss(ae, x, noisy, x.copy()) - 3 / d) < 1e-12

    def test_matches_straight_line_recompute(self, rng):
        dim, latent = 7, 5
        ae = DenoisingAutoencoder.init(dim, latent, seed=11)
        x = rng.random(dim)
        noisy = rng.random(dim)
        adv = rng.random(dim)
        h1 = np.maximum(noisy @ ae.encoder.weights[0] + ae.encoder.biases[0], 0)
        r1 = h1 @ ae.decoder.weights[0] + ae.decoder.biases[0]
        h2 = np.maximum(adv @ ae.encoder.weights[0] + ae.encoder.biases[0], 0)
        r2 = h2 @ ae.decoder.weights[0] + ae.decoder.biases[0]
        expected = np.mean((x - r1) ** 2) + np.mean((x - r2) ** 2)
        assert abs(dae_loss(ae, x, noisy, adv) - expected) < 1e-12


class TestInnerMaximize:
    def test_zero_steps_zero_restarts(self, rng):
        ds, policy = small_task()
        model = MlpClassifier.init([24, 8, 2], seed=1)
        cfg = DefenseConfig(inner_steps=0, restarts=0, seed=5)
        x = ds.X[0]
        x_adv, delta = inner_maximize(model, x, int(ds.y[0]), policy, cfg)
        assert np.array_equal(x_adv, x)
        assert np.all(delta == 0)

    def test_single_trial_deterministic(self, rng):
        ds, policy = small_task()
        model = MlpClassifier.init([24, 8, 2], seed=2)
        cfg = DefenseConfig(inner_steps=15, restarts=0, seed=6)
        a = inner_maximize(model, ds.X[:5], ds.y[:5], policy, cfg)
        b = inner_maximize(model, ds.X[:5], ds.y[:5], policy, cfg)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_returned_trial_beats_logged_trials(self, rng):
        # replay the restart trials with the same stream and check the max
        ds, policy = small_task()
        model = MlpClassifier.init([24, 8, 2], seed=3)
        cfg = DefenseConfig(inner_steps=10, restarts=3, noise_ratio_max=0.2, seed=7)
        X, y = ds.X[:6], ds.y[:6]
        best_x, _ = inner_maximize(model, X, y, policy, cfg)
        best_loss = model.loss(best_x, y)

        replay = np.random.default_rng(cfg.seed)
        for trial in range(cfg.restarts + 1):
            if trial == 0:
                delta = np.zeros_like(X)
            else:
                ratio = replay.uniform(0.0, cfg.noise_ratio_max)
                delta = _salt_pepper_batch(X, ratio, replay) - X
            adam = AdamState.zeros(X.shape, learning_rate=cfg.inner_lr)
            for _ in range(cfg.inner_steps):
                g = model.input_gradients(X + delta, y)
                delta = adam_step(adam, delta, g, "maximize")
                delta = np.clip(X + delta, 0.0, 1.0) - X
            from malrobust.data import project_to_m
            rounded = project_to_m(X, X + delta, policy)
            trial_loss = model.loss(rounded, y)
            assert np.all(best_loss >= trial_loss - 1e-12)

    def test_box_only_mode_rounds_plainly(self, rng):
        ds, _ = small_task()
        model = MlpClassifier.init([24, 8, 2], seed=4)
        cfg = DefenseConfig(inner_steps=10, restarts=0, seed=8)
        x_adv, _ = inner_maximize(model, ds.X[:4], ds.y[:4], None, cfg)
        assert np.all((x_adv == 0.0) | (x_adv == 1.0))

    def test_never_below_zero_delta_baseline(self, rng):
        ds, policy = small_task()
        model = MlpClassifier.init([24, 8, 2], seed=9)
        cfg = DefenseConfig(inner_steps=12, restarts=2, seed=10)
        X, y = ds.X[:8], ds.y[:8]
        x_adv, _ = inner_maximize(model, X, y, policy, cfg)
        assert np.all(model.loss(x_adv, y) >= model.loss(X, y) - 1e-12)


class TestAdversarialTrainingLoss:
    def test_doubled_at_fixed_point(self, rng):
        model = MlpClassifier.init([5, 4, 2], seed=1)
        x = (rng.random(5) < 0.5).astype(float)
        loss = adversarial_training_loss(model, x, 1, x.copy())
        assert abs(loss - 2 * cross_entropy(model.predict_proba(x), 1)) < 1e-12

    def test_dominates_supervised_loss(self, rng):
        model = MlpClassifier.init([6, 4, 2], seed=2)
        for _ in range(30):
            x = (rng.random(6) < 0.5).astype(float)
            x_adv = (rng.random(6) < 0.5).astype(float)
            y = int(rng.integers(2))
            assert adversarial_training_loss(model, x, y, x_adv) >= \
                cross_entropy(model.predict_proba(x), y)

    def test_componentwise_sum(self, rng):
        model = MlpClassifier.init([6, 4, 2], seed=3)
        x = rng.random(6)
        x_adv = rng.random(6)
        expected = cross_entropy(model.predict_proba(x), 0) + \
            cross_entropy(model.predict_proba(x_adv), 0)
        assert abs(adversarial_training_loss(model, x, 0, x_adv) - expected) < 1e-12


class TestTrainHardened:
    def test_degenerate_gradient_is_doubled_supervised(self, rng):
        # with T=0, K=0 the adversarial batch equals the clean batch, so the
        # classifier-step gradient is exactly twice the supervised gradient
        ds, policy = small_task()
        model = MlpClassifier.init([24, 8, 2], seed=5)
        X, y = ds.X[:16], ds.y[:16]
        cfg = DefenseConfig(inner_steps=0, restarts=0, seed=11)
        x_adv, _ = inner_maximize(model, X, y, policy, cfg)
        assert np.array_equal(x_adv, X)
        wg, bg, _ = _batch_param_gradients(model, X, y)
        wg2, bg2, _ = _batch_param_gradients(model, x_adv, y)
        for a, b in zip(wg, wg2):
            assert np.allclose(a + b, 2 * a, atol=1e-12)

    def test_seeded_determinism(self):
        ds, policy = small_task()
        cfg = DefenseConfig(inner_steps=5, epochs=3, batch_size=16, lr=0.01,
                            hidden=(8, 8), seed=12)
        a, ta = train_hardened(ds, policy, cfg)
        b, tb = train_hardened(ds, policy, cfg)
        assert ta == tb
        for W1, W2 in zip(a.mlp.weights, b.mlp.weights):
            assert np.array_equal(W1, W2)

    def test_requires_policy_when_known(self):
        ds, _ = small_task()
        cfg = DefenseConfig(epochs=1, hidden=(4,))
        with pytest.raises(ValueError):
            train_hardened(ds, None, cfg, known_manipulation_set=True)

    def test_regularization_mode_trains_without_policy(self):
        ds, _ = small_task()
        cfg = DefenseConfig(inner_steps=3, epochs=2, batch_size=16, lr=0.01,
                            hidden=(8,), seed=13)
        clf, trace = train_hardened(ds, None, cfg, known_manipulation_set=False)
        assert len(trace) == 2
        assert clf.predict(ds.X).shape == (len(ds),)

    def test_binarization_and_subspace(self):
        ds, policy = small_task()
        cfg = DefenseConfig(inner_steps=2, epochs=1, batch_size=16, lr=0.01,
                            hidden=(8, 8), subspace_ratio=0.5, seed=14)
        clf, _ = train_hardened(ds, policy, cfg, use_binarization=True)
        assert len(clf.subset) == 12
        assert clf.thresholds is not None
        # gradients live in the full input space, zero outside the subset
        g = clf.input_gradients(ds.X[0], int(ds.y[0]))
        off = np.setdiff1d(np.arange(24), clf.subset)
        assert np.all(g[off] == 0.0)

    def test_dae_wiring_and_block_isolation(self):
        ds, policy = small_task()
        cfg = DefenseConfig(inner_steps=2, epochs=1, batch_size=16, lr=0.01,
                            hidden=(8, 8), latent_dim=10, seed=15)
        clf, _ = train_hardened(ds, policy, cfg, use_dae=True)
        assert clf.dae is not None
        assert clf.dae.latent_dim == 10
        assert clf.mlp.layer_sizes[0] == 10  # head consumes the encoding

        # a DAE update touches no head parameters, and vice versa
        head_before = [W.copy() for W in clf.mlp.weights]
        enc_before = [W.copy() for W in clf.dae.encoder.weights]
        X = ds.X[:8]
        ewg, ebg, dwg, dbg, _ = _dae_param_grads(clf.dae, X, (X, X))
        states = [AdamState.zeros(W.shape, 0.01) for W in clf.dae.encoder.weights]
        for i in range(len(clf.dae.encoder.weights)):
            clf.dae.encoder.weights[i] = adam_step(states[i],
                                                   clf.dae.encoder.weights[i], ewg[i])
        assert all(np.array_equal(a, b) for a, b in zip(head_before, clf.mlp.weights))

        H = clf.dae.encoder.forward(X)
        wg, bg, _ = _batch_param_gradients(clf.mlp, H, ds.y[:8])
        hstates = [AdamState.zeros(W.shape, 0.01) for W in clf.mlp.weights]
        enc_snapshot = [W.copy() for W in clf.dae.encoder.weights]
        for i in range(len(clf.mlp.weights)):
            clf.mlp.weights[i] = adam_step(hstates[i], clf.mlp.weights[i], wg[i])
        assert all(np.array_equal(a, b)
                   for a, b in zip(enc_snapshot, clf.dae.encoder.weights))

    def test_oversample_hook(self):
        X = np.vstack([np.zeros((30, 6)), np.ones((4, 6))])
        y = np.array([0] * 30 + [1] * 4)
        ds = Dataset(X, y, 2)
        policy = ManipulationPolicy(np.ones(6, bool), np.ones(6, bool))
        cfg = DefenseConfig(inner_steps=1, epochs=1, batch_size=8, lr=0.01,
                            hidden=(4,), oversample_ratio=0.5, seed=16)
        clf, _ = train_hardened(ds, policy, cfg)  # just exercises the path
        assert clf.predict(X).shape == (34,)


class TestEnsemble:
    def test_mean_vote_example(self):
        m1 = MlpClassifier([np.zeros((3, 2))], [np.log(np.array([0.6, 0.4]))])
        m2 = MlpClassifier([np.zeros((3, 2))], [np.log(np.array([0.2, 0.8]))])
        ens = EnsembleClassifier([m1, m2])
        p = ensemble_predict(ens, np.zeros(3))
        assert np.allclose(p, [0.4, 0.6], atol=1e-12)
        assert ens.predict(np.zeros(3)) == 1

    def test_identical_members_collapse(self):
        m = MlpClassifier.init([4, 3, 2], seed=21)
        ens = EnsembleClassifier([m, m, m])
        x = np.array([0.0, 1.0, 1.0, 0.0])
        assert np.allclose(ensemble_predict(ens, x), m.predict_proba(x), atol=1e-15)

    def test_mean_matches_member_recompute(self, rng):
        members = [MlpClassifier.init([5, 4, 3], seed=s) for s in (1, 2, 3)]
        ens = EnsembleClassifier(members)
        X = rng.random((6, 5))
        expected = sum(m.predict_proba(X) for m in members) / 3
        assert np.allclose(ensemble_predict(ens, X), expected, atol=1e-15)
        assert np.allclose(ensemble_predict(ens, X).sum(axis=1), 1.0, atol=1e-9)

    def test_subspace_sizes(self):
        ds, policy = small_task(dim=20)
        cfg = DefenseConfig(inner_steps=1, epochs=1, batch_size=16, lr=0.01,
                            hidden=(6, 6), ensemble_size=3, subspace_ratio=0.5,
                            data_fraction=0.8, seed=22)
        ens, _ = train_ensemble(ds, policy, cfg)
        assert ens.l == 3
        for m in ens.members:
            assert len(m.subset) == 10

    def test_members_differ(self):
        ds, policy = small_task(dim=16)
        cfg = DefenseConfig(inner_steps=1, epochs=2, batch_size=16, lr=0.01,
                            hidden=(6,), ensemble_size=2, subspace_ratio=1.0,
                            data_fraction=1.0, seed=23)
        ens, _ = train_ensemble(ds, policy, cfg)
        w0 = ens.members[0].mlp.weights[0]
        w1 = ens.members[1].mlp.weights[0]
        assert not np.array_equal(w0, w1)

    def test_single_member_equals_hardened(self):
        ds, policy = small_task(dim=16)
        cfg = DefenseConfig(inner_steps=2, epochs=2, batch_size=16, lr=0.01,
                            hidden=(6,), ensemble_size=1, subspace_ratio=1.0,
                            data_fraction=1.0, seed=24)
        ens, _ = train_ensemble(ds, policy, cfg)
        from dataclasses import replace
        from malrobust.nn import child_seed
        solo, _ = train_hardened(ds, policy,
                                 replace(cfg, seed=child_seed(cfg.seed, 1000)))
        assert np.allclose(ens.predict_proba(ds.X), solo.predict_proba(ds.X),
                           atol=1e-15)

    def test_ensemble_gradients_match_finite_differences(self, rng):
        ds, policy = small_task(dim=12)
        cfg = DefenseConfig(inner_steps=1, epochs=1, batch_size=16, lr=0.01,
                            hidden=(5,), ensemble_size=2, subspace_ratio=0.5,
                            data_fraction=1.0, seed=25)
        ens, _ = train_ensemble(ds, policy, cfg)
        x, y = ds.X[0], int(ds.y[0])
        g = ens.input_gradients(x, y)
        h = 1e-5
        for j in range(12):
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            fd = (cross_entropy(ens.predict_proba(xp), y)
                  - cross_entropy(ens.predict_proba(xm), y)) / (2 * h)
            assert abs(fd - g[j]) < 1e-6


class TestCheckpoints:
    def test_hardened_round_trip(self, tmp_path):
        ds, policy = small_task(dim=14)
        cfg = DefenseConfig(inner_steps=1, epochs=1, batch_size=16, lr=0.01,
                            hidden=(6, 6), subspace_ratio=0.5, latent_dim=5, seed=26)
        clf, _ = train_hardened(ds, policy, cfg, use_dae=True, use_binarization=True)
        path = tmp_path / "hardened.json"
        save_hardened(path, clf)
        back = load_hardened(path)
        assert np.array_equal(back.subset, clf.subset)
        assert np.array_equal(back.thresholds, clf.thresholds)
        assert np.allclose(back.predict_proba(ds.X), clf.predict_proba(ds.X),
                           atol=1e-15)

    def test_ensemble_round_trip(self, tmp_path):
        ds, policy = small_task(dim=12)
        cfg = DefenseConfig(inner_steps=1, epochs=1, batch_size=16, lr=0.01,
                            hidden=(5,), ensemble_size=3, subspace_ratio=0.5,
                            seed=27)
        ens, _ = train_ensemble(ds, policy, cfg)
        manifest = save_ensemble(tmp_path / "ens", ens)
        back = load_ensemble(manifest)
        assert back.l == 3
        assert np.allclose(back.predict_proba(ds.X), ens.predict_proba(ds.X),
                           atol=1e-15)
