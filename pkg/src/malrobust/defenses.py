"""Hardened-classifier construction.

The training loop follows the min-max recipe: oversample, optionally pick
a random feature subspace, binarize, then per batch (i) search the worst
admissible perturbation with a multi-start Adam ascent, (ii) update a
denoising autoencoder on reconstruction losses, and (iii) update the
classifier head on the sum of clean and adversarial cross-entropy.  The
autoencoder and classifier are updated in alternation (block coordinate
descent); the classifier consumes the encoder output when the DAE is on.

Random-subspace ensembles train several hardened members on seeded
feature / example subsets and vote by mean probability.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, binarize, oversample, project_to_m
from .nn import (CHECKPOINT_VERSION, MAXIMIZE, AdamState, DenseStack,
                 MlpClassifier, _batch_param_gradients, adam_step,
                 child_seed, cross_entropy)


@dataclass
class DefenseConfig:
    inner_lr: float = 0.02
    inner_steps: int = 100
    restarts: int = 0
    noise_ratio_max: float = 0.1
    subspace_ratio: float = 1.0
    ensemble_size: int = 5
    data_fraction: float = 0.8
    oversample_ratio: float = 0.0
    epochs: int = 150
    batch_size: int = 128
    lr: float = 0.001
    hidden: tuple = (160, 160)
    activation: str = "relu"
    latent_dim: int = 160
    seed: object = 0

    def __post_init__(self):
        if self.inner_lr <= 0 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError("rates and batch size must be positive")
        if not 0.0 <= self.noise_ratio_max <= 1.0:
            raise ValueError("noise_ratio_max must be in [0, 1]")
        if not 0.0 < self.subspace_ratio <= 1.0:
            raise ValueError("subspace_ratio must be in (0, 1]")

    @classmethod
    def adversarial_training_profile(cls, **overrides) -> "DefenseConfig":
        """Inner maximizer run with lr 0.02 for 100 steps."""
        return cls(**{"inner_lr": 0.02, "inner_steps": 100, **overrides})

    @classmethod
    def adversarial_regularization_profile(cls, **overrides) -> "DefenseConfig":
        """Inner maximizer run with lr 0.01 for 60 steps, box-only."""
        return cls(**{"inner_lr": 0.01, "inner_steps": 60, **overrides})


@dataclass
class DenoisingAutoencoder:
    encoder: DenseStack
    decoder: DenseStack
    latent_dim: int

    def __post_init__(self):
        if self.encoder.layer_sizes[0] != self.decoder.layer_sizes[-1]:
            raise ValueError("encoder input dim must equal decoder output dim")
        if self.encoder.layer_sizes[-1] != self.decoder.layer_sizes[0]:
            raise ValueError("latent dims of encoder and decoder disagree")

    @classmethod
    def init(cls, dim: int, latent_dim: int, activation="relu", seed=0):
        rng = np.random.default_rng(seed)
        enc = DenseStack.init([dim, latent_dim], activation, seed=rng, activate_last=True)
        dec = DenseStack.init([latent_dim, dim], activation, seed=rng)
        return cls(enc, dec, latent_dim)

    def encode(self, X):
        return self.encoder.forward(X)

    def reconstruct(self, X):
        return self.decoder.forward(self.encoder.forward(X))


def salt_pepper(x, ratio: float, seed=0):
    """Force a uniformly chosen floor(ratio*dim) subset of coordinates to
    0 or 1 with equal probability."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must be in [0, 1]")
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return _salt_pepper_batch(x[None, :], ratio, rng)[0]
    return _salt_pepper_batch(x, ratio, rng)


def _salt_pepper_batch(X, ratio, rng):
    n, d = X.shape
    k = int(math.floor(ratio * d))
    out = X.copy()
    if k == 0:
        return out
    scores = rng.random((n, d))
    idx = np.argpartition(scores, k - 1, axis=1)[:, :k]
    vals = (rng.random((n, k)) < 0.5).astype(float)
    out[np.arange(n)[:, None], idx] = vals
    return out


def _mse(a, b):
    return np.mean((a - b) ** 2, axis=-1)


def dae_loss(ae: DenoisingAutoencoder, x_clean, x_noisy, x_adv):
    """Reconstruction error of the noisy and the adversarial input, both
    measured against the clean vector (mean squared error over features)."""
    r_noisy = ae.reconstruct(x_noisy)
    r_adv = ae.reconstruct(x_adv)
    loss = _mse(x_clean, r_noisy) + _mse(x_clean, r_adv)
    return float(loss) if np.ndim(loss) == 0 else loss


def _dae_param_grads(ae, X_clean, inputs):
    """Mean gradients of the summed reconstruction losses for a batch."""
    n, d = X_clean.shape
    enc_wg = [np.zeros_like(W) for W in ae.encoder.weights]
    enc_bg = [np.zeros_like(b) for b in ae.encoder.biases]
    dec_wg = [np.zeros_like(W) for W in ae.decoder.weights]
    dec_bg = [np.zeros_like(b) for b in ae.decoder.biases]
    loss = 0.0
    for X_in in inputs:
        H, enc_zs = ae.encoder.forward_cached(X_in)
        R, dec_zs = ae.decoder.forward_cached(H)
        diff = R - X_clean
        loss += float(np.mean(diff * diff))
        cot = 2.0 * diff / (n * d)
        dwg, dbg, h_cot = ae.decoder.backward(H, dec_zs, cot)
        ewg, ebg, _ = ae.encoder.backward(X_in, enc_zs, h_cot)
        for i in range(len(enc_wg)):
            enc_wg[i] += ewg[i]
            enc_bg[i] += ebg[i]
        for i in range(len(dec_wg)):
            dec_wg[i] += dwg[i]
            dec_bg[i] += dbg[i]
    return enc_wg, enc_bg, dec_wg, dec_bg, loss


@dataclass
class HardenedClassifier:
    """Classifier head plus the optional transforms in front of it.

    Prediction pipeline: select the feature subset (when set), binarize at
    the thresholds (when set), feed through the DAE encoder (when set),
    then the MLP head.  Input gradients are reported in the full input
    space, zero outside the subset; the binarization step is treated as a
    pass-through for gradients (inputs are binary in this domain, where
    thresholding is the identity).
    """

    mlp: MlpClassifier
    dae: DenoisingAutoencoder | None = None
    subset: np.ndarray | None = None
    thresholds: np.ndarray | None = None

    @property
    def class_count(self) -> int:
        return self.mlp.class_count

    def _view(self, X):
        X2 = np.atleast_2d(np.asarray(X, dtype=float))
        if self.subset is not None:
            X2 = X2[:, self.subset]
        if self.thresholds is not None:
            X2 = binarize(X2, self.thresholds)
        return X2

    def _encode(self, V):
        return self.dae.encoder.forward(V) if self.dae is not None else V

    def predict_proba(self, X):
        p = self.mlp.predict_proba(self._encode(self._view(X)))
        return p if np.ndim(X) == 2 else p[0]

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=-1)

    def logits(self, X):
        z = self.mlp.logits(self._encode(self._view(X)))
        return z if np.ndim(X) == 2 else z[0]

    def loss(self, X, y):
        return cross_entropy(self.predict_proba(X), y)

    def _scatter(self, X, view_grads):
        if self.subset is None:
            out = view_grads
        else:
            X2 = np.atleast_2d(np.asarray(X, dtype=float))
            out = np.zeros_like(X2)
            out[:, self.subset] = view_grads
        return out if np.ndim(X) == 2 else out[0]

    def _view_grads(self, X, head_grad_fn):
        V = self._view(X)
        if self.dae is None:
            return head_grad_fn(V)
        H, enc_zs = self.dae.encoder.forward_cached(V)
        h_cot = head_grad_fn(H)
        _, _, v_cot = self.dae.encoder.backward(V, enc_zs, h_cot)
        return v_cot

    def input_gradients(self, X, y):
        y2 = np.atleast_1d(np.asarray(y, dtype=int))
        vg = self._view_grads(X, lambda H: self.mlp.input_gradients(H, y2))
        return self._scatter(X, vg)

    def logit_cot_input_gradients(self, X, cot):
        cot2 = np.atleast_2d(np.asarray(cot, dtype=float))
        vg = self._view_grads(X, lambda H: self.mlp.logit_cot_input_gradients(H, cot2))
        return self._scatter(X, vg)


def inner_maximize(model, X, y, policy, config: DefenseConfig, rng=None):
    """Multi-start Adam ascent on the loss over a continuous perturbation.

    Runs restarts+1 trials: one from delta = 0 and the rest from
    salt-and-pepper starting points whose noise ratio is drawn uniformly
    in [0, noise_ratio_max].  Every trial takes inner_steps Adam steps in
    maximization mode, clipping x+delta into the unit box after each step.
    Trial endpoints are rounded through the policy (or plain 0.5 rounding
    when policy is None, the box-only mode used by adversarial
    regularization); the trial with the largest rounded-point
    cross-entropy wins, per example.

    Returns (rounded binary batch, continuous delta batch); shapes follow
    the input (a single vector yields single vectors).
    """
    rng = np.random.default_rng(config.seed if rng is None else rng)
    single = np.ndim(X) == 1
    X2 = np.atleast_2d(np.asarray(X, dtype=float))
    y2 = np.atleast_1d(np.asarray(y, dtype=int))

    def rounded_of(delta):
        if policy is None:
            return ((X2 + delta) >= 0.5).astype(float)
        return project_to_m(X2, X2 + delta, policy)

    best_loss = np.full(len(X2), -np.inf)
    best_x = X2.copy()
    best_delta = np.zeros_like(X2)
    for trial in range(config.restarts + 1):
        if trial == 0:
            delta = np.zeros_like(X2)
        else:
            ratio = rng.uniform(0.0, config.noise_ratio_max)
            delta = _salt_pepper_batch(X2, ratio, rng) - X2
        adam = AdamState.zeros(X2.shape, learning_rate=config.inner_lr)
        for _ in range(config.inner_steps):
            g = model.input_gradients(X2 + delta, y2)
            delta = adam_step(adam, delta, g, MAXIMIZE)
            delta = np.clip(X2 + delta, 0.0, 1.0) - X2
        rounded = rounded_of(delta)
        losses = np.atleast_1d(model.loss(rounded, y2))
        better = losses > best_loss
        best_loss = np.where(better, losses, best_loss)
        best_x[better] = rounded[better]
        best_delta[better] = delta[better]
    if single:
        return best_x[0], best_delta[0]
    return best_x, best_delta


def adversarial_training_loss(model, x, y, x_adv):
    """Clean cross-entropy plus adversarial cross-entropy (the min-max
    training objective's per-example value)."""
    return cross_entropy(model.predict_proba(x), y) + \
        cross_entropy(model.predict_proba(x_adv), y)


def train_hardened(dataset: Dataset, policy, config: DefenseConfig, *,
                   use_dae: bool = False, use_binarization: bool = False,
                   known_manipulation_set: bool = True):
    """Train one hardened classifier (the per-member training loop).

    With known_manipulation_set the inner maximizer respects the policy;
    without it the search is box-only (adversarial regularization).  With
    use_dae the encoder feeds the classifier and the autoencoder /
    classifier parameters are updated in alternating steps.  Returns
    (classifier, per-epoch loss trace); deterministic given config.seed.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if known_manipulation_set and policy is None:
        raise ValueError("known_manipulation_set requires a policy")
    rng = np.random.default_rng(config.seed)
    ds = oversample(dataset, config.oversample_ratio, seed=rng) \
        if config.oversample_ratio else dataset

    dim = ds.dim
    subset = None
    if config.subspace_ratio < 1.0:
        k = int(round(config.subspace_ratio * dim))
        if k < 1:
            raise ValueError("subspace_ratio yields an empty feature subset")
        subset = np.sort(rng.choice(dim, size=k, replace=False))
    X = ds.X[:, subset] if subset is not None else np.asarray(ds.X, dtype=float)
    view_dim = X.shape[1]
    thresholds = np.full(view_dim, 0.5)
    if use_binarization:
        X = binarize(X, thresholds)
    y = ds.y
    pol_view = None
    if known_manipulation_set:
        pol_view = policy.restrict(subset) if subset is not None else policy

    o = ds.class_count
    hidden = list(config.hidden)
    if use_dae:
        latent = min(view_dim, config.latent_dim)
        dae = DenoisingAutoencoder.init(view_dim, latent, config.activation, seed=rng)
        head_sizes = [latent] + hidden[1:] + [o]
    else:
        dae = None
        head_sizes = [view_dim] + hidden + [o]
    head = MlpClassifier.init(head_sizes, config.activation, seed=rng)
    view_model = HardenedClassifier(head, dae, None, None)

    head_w = [AdamState.zeros(W.shape, config.lr) for W in head.weights]
    head_b = [AdamState.zeros(b.shape, config.lr) for b in head.biases]
    if use_dae:
        enc_w = [AdamState.zeros(W.shape, config.lr) for W in dae.encoder.weights]
        enc_b = [AdamState.zeros(b.shape, config.lr) for b in dae.encoder.biases]
        dec_w = [AdamState.zeros(W.shape, config.lr) for W in dae.decoder.weights]
        dec_b = [AdamState.zeros(b.shape, config.lr) for b in dae.decoder.biases]

    trace = []
    for _ in range(config.epochs):
        perm = rng.permutation(len(X))
        batch_losses = []
        for start in range(0, len(X), config.batch_size):
            sel = perm[start:start + config.batch_size]
            Xb, yb = X[sel], y[sel]
            X_adv, _ = inner_maximize(view_model, Xb, yb, pol_view, config, rng=rng)

            if use_dae:
                ratio = rng.uniform(0.0, config.noise_ratio_max)
                X_noisy = _salt_pepper_batch(Xb, ratio, rng)
                ewg, ebg, dwg, dbg, _ = _dae_param_grads(dae, Xb, (X_noisy, X_adv))
                for i in range(len(dae.encoder.weights)):
                    dae.encoder.weights[i] = adam_step(enc_w[i], dae.encoder.weights[i], ewg[i])
                    dae.encoder.biases[i] = adam_step(enc_b[i], dae.encoder.biases[i], ebg[i])
                for i in range(len(dae.decoder.weights)):
                    dae.decoder.weights[i] = adam_step(dec_w[i], dae.decoder.weights[i], dwg[i])
                    dae.decoder.biases[i] = adam_step(dec_b[i], dae.decoder.biases[i], dbg[i])

            # classifier step through the (frozen) encoder
            Hb = dae.encoder.forward(Xb) if use_dae else Xb
            Ha = dae.encoder.forward(X_adv) if use_dae else X_adv
            wg1, bg1, l1 = _batch_param_gradients(head, Hb, yb)
            wg2, bg2, l2 = _batch_param_gradients(head, Ha, yb)
            for i in range(len(head.weights)):
                head.weights[i] = adam_step(head_w[i], head.weights[i], wg1[i] + wg2[i])
                head.biases[i] = adam_step(head_b[i], head.biases[i], bg1[i] + bg2[i])
            batch_losses.append(l1 + l2)
        trace.append(float(np.mean(batch_losses)))

    clf = HardenedClassifier(head, dae, subset,
                             thresholds if use_binarization else None)
    return clf, trace


@dataclass
class EnsembleClassifier:
    """Mean-probability vote over hardened members."""

    members: list
    subspace_ratio: float = 1.0

    @property
    def l(self) -> int:
        return len(self.members)

    @property
    def class_count(self) -> int:
        return self.members[0].class_count

    def predict_proba(self, X):
        return sum(m.predict_proba(X) for m in self.members) / self.l

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=-1)

    def loss(self, X, y):
        return cross_entropy(self.predict_proba(X), y)

    def logits(self, X):
        # mean-probability voting has no single pre-softmax layer; the log
        # of the vote is the monotone stand-in used by margin attacks
        p = self.predict_proba(X)
        return np.log(np.maximum(p, 1e-12))

    def _prob_cot_input_gradients(self, X, v):
        """Input gradient of an objective with dObj/d(mean prob) = v."""
        X2 = np.atleast_2d(np.asarray(X, dtype=float))
        v2 = np.atleast_2d(np.asarray(v, dtype=float))
        total = np.zeros_like(X2)
        for m in self.members:
            q = np.atleast_2d(m.predict_proba(X2))
            a = v2 / self.l
            w = q * (a - (q * a).sum(axis=1, keepdims=True))
            total += np.atleast_2d(m.logit_cot_input_gradients(X2, w))
        return total if np.ndim(X) == 2 else total[0]

    def input_gradients(self, X, y):
        X2 = np.atleast_2d(np.asarray(X, dtype=float))
        y2 = np.atleast_1d(np.asarray(y, dtype=int))
        p = np.atleast_2d(self.predict_proba(X2))
        rows = np.arange(len(y2))
        v = np.zeros_like(p)
        py = np.maximum(p[rows, y2], 1e-12)
        v[rows, y2] = -1.0 / py
        v[p[rows, y2] <= 1e-12] = 0.0
        g = self._prob_cot_input_gradients(X2, v)
        return g if np.ndim(X) == 2 else g[0]

    def logit_cot_input_gradients(self, X, cot):
        X2 = np.atleast_2d(np.asarray(X, dtype=float))
        cot2 = np.atleast_2d(np.asarray(cot, dtype=float))
        p = np.atleast_2d(self.predict_proba(X2))
        v = cot2 / np.maximum(p, 1e-12)
        g = self._prob_cot_input_gradients(X2, v)
        return g if np.ndim(X) == 2 else g[0]


def train_ensemble(dataset: Dataset, policy, config: DefenseConfig, *,
                   use_dae: bool = False, use_binarization: bool = False,
                   known_manipulation_set: bool = True):
    """Train config.ensemble_size hardened members on seeded random
    feature subspaces and example subsets, with disjoint seed streams."""
    if config.ensemble_size < 1:
        raise ValueError("ensemble_size must be >= 1")
    members = []
    traces = []
    for i in range(config.ensemble_size):
        member_cfg = replace(config, seed=child_seed(config.seed, 1000 + i))
        sub = dataset
        if config.data_fraction < 1.0:
            d_rng = np.random.default_rng(child_seed(config.seed, 2000 + i))
            n_keep = max(1, int(round(config.data_fraction * len(dataset))))
            keep = np.sort(d_rng.choice(len(dataset), size=n_keep, replace=False))
            sub = Dataset(dataset.X[keep], dataset.y[keep], dataset.class_count)
        member, trace = train_hardened(
            sub, policy, member_cfg, use_dae=use_dae,
            use_binarization=use_binarization,
            known_manipulation_set=known_manipulation_set)
        members.append(member)
        traces.append(trace)
    return EnsembleClassifier(members, config.subspace_ratio), traces


def ensemble_predict(ensemble: EnsembleClassifier, x):
    """Arithmetic mean of the member probability outputs."""
    return ensemble.predict_proba(x)


def _stack_record(stack: DenseStack):
    return {
        "layer_sizes": stack.layer_sizes,
        "activation": stack.activation,
        "activate_last": stack.activate_last,
        "weights": [W.tolist() for W in stack.weights],
        "biases": [b.tolist() for b in stack.biases],
    }


def _stack_from_record(rec) -> DenseStack:
    return DenseStack([np.asarray(W, dtype=float) for W in rec["weights"]],
                      [np.asarray(b, dtype=float) for b in rec["biases"]],
                      rec["activation"], rec["activate_last"])


def save_hardened(path, clf: HardenedClassifier) -> None:
    record = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "hardened",
        "subset": None if clf.subset is None else [int(i) for i in clf.subset],
        "thresholds": None if clf.thresholds is None else clf.thresholds.tolist(),
        "head": {
            "layer_sizes": clf.mlp.layer_sizes,
            "activation": clf.mlp.activation,
            "weights": [W.tolist() for W in clf.mlp.weights],
            "biases": [b.tolist() for b in clf.mlp.biases],
        },
        "encoder": None if clf.dae is None else _stack_record(clf.dae.encoder),
        "decoder": None if clf.dae is None else _stack_record(clf.dae.decoder),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, sort_keys=True)


def load_hardened(path) -> HardenedClassifier:
    with open(path, "r", encoding="utf-8") as fh:
        record = json.load(fh)
    if record.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {record.get('format_version')!r}")
    if record.get("kind") != "hardened":
        raise ValueError(f"not a hardened checkpoint: kind={record.get('kind')!r}")
    head = MlpClassifier([np.asarray(W, dtype=float) for W in record["head"]["weights"]],
                         [np.asarray(b, dtype=float) for b in record["head"]["biases"]],
                         record["head"]["activation"])
    dae = None
    if record["encoder"] is not None:
        enc = _stack_from_record(record["encoder"])
        dec = _stack_from_record(record["decoder"])
        dae = DenoisingAutoencoder(enc, dec, enc.layer_sizes[-1])
    subset = None if record["subset"] is None else np.asarray(record["subset"], dtype=int)
    thresholds = None if record["thresholds"] is None \
        else np.asarray(record["thresholds"], dtype=float)
    return HardenedClassifier(head, dae, subset, thresholds)


def save_ensemble(dir_path, ensemble: EnsembleClassifier) -> str:
    """Write a manifest plus one checkpoint per member; returns the
    manifest path."""
    os.makedirs(dir_path, exist_ok=True)
    member_files = []
    for i, member in enumerate(ensemble.members):
        name = f"member_{i}.json"
        save_hardened(os.path.join(dir_path, name), member)
        member_files.append(name)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "ensemble",
        "l": ensemble.l,
        "subspace_ratio": ensemble.subspace_ratio,
        "subsets": [None if m.subset is None else [int(j) for j in m.subset]
                    for m in ensemble.members],
        "members": member_files,
    }
    manifest_path = os.path.join(dir_path, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True)
    return manifest_path


def load_ensemble(manifest_path) -> EnsembleClassifier:
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')!r}")
    if manifest.get("kind") != "ensemble":
        raise ValueError(f"not an ensemble manifest: kind={manifest.get('kind')!r}")
    base = os.path.dirname(manifest_path)
    members = [load_hardened(os.path.join(base, name)) for name in manifest["members"]]
    if len(members) != manifest["l"]:
        raise ValueError("manifest member count mismatch")
    return EnsembleClassifier(members, manifest.get("subspace_ratio", 1.0))
