"""
Attacking a plain classifier
============================

Train an ordinary feed-forward classifier on a synthetic binary-feature
task, then throw all eleven evasion attacks at the malware-class test
examples and watch how little survives.
"""

import numpy as np

import malrobust as mr

# a desk-scale stand-in for a malware dataset: two classes of binary
# vectors built from random prototypes plus 5% bit-flip noise
dataset, policy = mr.generate_synthetic(dim=100, classes=2, per_class=300,
                                        flip_noise=0.05, seed=7)
train, val, test = mr.split(dataset, (0.6, 0.2, 0.2), seed=7)
print(f"dataset: dim={dataset.dim}, train={len(train)}, test={len(test)}")

model = mr.MlpClassifier.init([dataset.dim, 160, 160, 2], seed=[7, 0])
model, trace = mr.train_supervised(model, train, epochs=30, batch_size=128,
                                   lr=0.001, seed=[7, 1])
clean_acc = np.mean(model.predict(test.X) == test.y)
print(f"clean test accuracy: {clean_acc:.3f} "
      f"(loss {trace[0]:.3f} -> {trace[-1]:.4f})")

# the attack pool: malware-class (label 1) test examples
pool_idx = np.flatnonzero(test.y == 1)
Xp, yp = test.X[pool_idx], test.y[pool_idx]
benign_pool = train.X[train.y == 0]
print(f"attacking {len(Xp)} malware examples (white box)\n")

# ead_c=20: with the default penalty the elastic net keeps perturbations
# below the rounding threshold and the attack is a no-op on this model
configs = [mr.AttackConfig.for_attack(name, seed=7,
                                      **({"ead_c": 20.0} if name == "ead" else {}))
           for name in mr.ATTACK_NAMES]
results = mr.run_attack_suite(model, Xp, yp, policy, configs,
                              threat_model=mr.WHITE_BOX, benign_pool=benign_pool)

print(f"{'attack':10s} {'accuracy':>9s} {'evasion':>8s} {'mean flips':>11s}")
for name, outcomes in results.items():
    X_adv = np.stack([o.x_adv for o in outcomes])
    acc = np.mean(model.predict(X_adv) == yp)
    evasion = np.mean([o.success for o in outcomes])
    flips = np.mean([o.flips for o in outcomes])
    print(f"{name:10s} {acc:9.3f} {evasion:8.3f} {flips:11.1f}")

# every adversarial vector stays inside the manipulation set
ok = all(mr.admissible(Xp[i], o.x_adv, policy)
         for outs in results.values() for i, o in enumerate(outs))
print(f"\nall outputs admissible under the policy: {ok}")
