"""
Denoising autoencoder and random-subspace ensembles
===================================================

The last two layers of the defense: a denoising autoencoder whose encoder
feeds the classifier (learned on salt-and-pepper plus adversarial
corruptions), and an ensemble of hardened classifiers trained on random
feature subspaces, voting by mean probability.  Also contrasts grey-box
attacks (through a surrogate) with white-box ones, the ordering behind
focusing the defense on the white-box worst case.
"""

import numpy as np

import malrobust as mr
from malrobust.defenses import DefenseConfig, _salt_pepper_batch
from malrobust.evaluation import train_surrogate

dataset, _ = mr.generate_synthetic(dim=120, classes=2, per_class=300,
                                   flip_noise=0.05, seed=19,
                                   class_densities=[0.8, 0.3])
policy = mr.ManipulationPolicy.additions_only(dataset.dim)
train, val, test = mr.split(dataset, (0.6, 0.2, 0.2), seed=19)

# ---- AT+DAE: block coordinate descent over autoencoder and classifier
cfg = DefenseConfig(inner_lr=0.02, inner_steps=15, restarts=1,
                    noise_ratio_max=0.2, epochs=50, batch_size=64, lr=0.01,
                    hidden=(120, 120), seed=19)
at_dae, _ = mr.train_hardened(train, policy, cfg, use_dae=True)
print(f"AT+DAE clean accuracy {np.mean(at_dae.predict(test.X) == test.y):.3f}")

# how well does the learned encoder/decoder undo corruption?
rng = np.random.default_rng(19)
corrupted = _salt_pepper_batch(test.X, 0.10, rng)
recon = at_dae.dae.reconstruct(corrupted)
print(f"reconstruction MSE {np.mean((recon - test.X) ** 2):.4f} "
      f"vs identity {np.mean((corrupted - test.X) ** 2):.4f} "
      f"on 10% salt-and-pepper noise")

# ---- random-subspace ensemble of hardened members
ens_cfg = DefenseConfig(inner_lr=0.02, inner_steps=15, epochs=15,
                        batch_size=128, lr=0.005, hidden=(80, 80),
                        ensemble_size=5, subspace_ratio=0.5,
                        data_fraction=0.8, seed=23)
ensemble, _ = mr.train_ensemble(train, policy, ens_cfg)
print(f"\nensemble of {ensemble.l} members, "
      f"{len(ensemble.members[0].subset)} features each")
print(f"ensemble clean accuracy "
      f"{np.mean(ensemble.predict(test.X) == test.y):.3f}")

# ---- grey box vs white box on both defenses
surrogate = train_surrogate(train, seed=[19, 999])
pool_idx = np.flatnonzero(test.y == 1)[:60]
Xp, yp = test.X[pool_idx], test.y[pool_idx]

print(f"\n{'attack':9s} {'model':9s} {'white':>7s} {'grey':>7s}")
for name in ("bca", "pgd_l1", "pgd_adam"):
    cfg_a = mr.AttackConfig.for_attack(name, seed=19)
    for label, model in (("AT+DAE", at_dae), ("ensemble", ensemble)):
        accs = {}
        for threat, surr in ((mr.WHITE_BOX, None), (mr.GREY_BOX, surrogate)):
            res = mr.run_attack_suite(model, Xp, yp, policy, [cfg_a],
                                      threat_model=threat, surrogate=surr)
            X_adv = np.stack([o.x_adv for o in res[name]])
            accs[threat] = np.mean(model.predict(X_adv) == yp)
        print(f"{name:9s} {label:9s} {accs[mr.WHITE_BOX]:7.3f} "
              f"{accs[mr.GREY_BOX]:7.3f}")

print("\ngrey-box attacks transfer from the surrogate and land softer than "
      "white-box ones, so a defense sized for the white-box case covers both.")
