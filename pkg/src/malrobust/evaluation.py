"""Metrics and the threat-model experiment runner.

The evaluation report is a plain dict tree: per-defense blocks holding
clean-test metrics, no-attack metrics on the attacked example pool, and
one block per attack with metrics plus the harmonic mean pairing the
clean macro F1 with the under-attack macro F1.  Everything is derived
from the experiment seed, so a report replays exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attacks import GREY_BOX, WHITE_BOX, run_attack_suite
from .data import Dataset
from .defenses import DefenseConfig, train_ensemble, train_hardened
from .nn import MlpClassifier, child_seed, train_supervised

# surrogate used by the grey-box threat model
SURROGATE_PROFILE = {"hidden": (200, 200), "activation": "relu",
                     "epochs": 30, "batch_size": 128, "lr": 0.001}


def binary_metrics(y_true, y_pred, positive_class=1):
    """(FNR, FPR, accuracy) with the given class treated as positive.

    Empty denominators yield 0 with a warning.
    """
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.shape != y_pred.shape:
        raise ValueError("label vector lengths differ")
    pos = y_true == positive_class
    tp = int(np.sum(pos & (y_pred == positive_class)))
    fn = int(np.sum(pos & (y_pred != positive_class)))
    fp = int(np.sum(~pos & (y_pred == positive_class)))
    tn = int(np.sum(~pos & (y_pred != positive_class)))
    if fn + tp == 0:
        warnings.warn("no positive examples; FNR set to 0", RuntimeWarning)
        fnr = 0.0
    else:
        fnr = fn / (fn + tp)
    if fp + tn == 0:
        warnings.warn("no negative examples; FPR set to 0", RuntimeWarning)
        fpr = 0.0
    else:
        fpr = fp / (fp + tn)
    accuracy = float(np.mean(y_true == y_pred)) if len(y_true) else 0.0
    return float(fnr), float(fpr), accuracy


def macro_f1(y_true, y_pred, class_count: int) -> float:
    """Unweighted mean of the per-class F1 scores.

    A class with precision + recall = 0 (including classes absent from
    both vectors) contributes F1 = 0.
    """
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.shape != y_pred.shape:
        raise ValueError("label vector lengths differ")
    if len(y_true) and (y_true.min() < 0 or y_true.max() >= class_count
                        or y_pred.min() < 0 or y_pred.max() >= class_count):
        raise ValueError("labels out of range")
    f1s = []
    for c in range(class_count):
        tp = int(np.sum((y_true == c) & (y_pred == c)))
        fp = int(np.sum((y_true != c) & (y_pred == c)))
        fn = int(np.sum((y_true == c) & (y_pred != c)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        if precision + recall == 0.0:
            f1s.append(0.0)
        else:
            f1s.append(2.0 * precision * recall / (precision + recall))
    return float(np.mean(f1s))


def harmonic_mean(a1: float, a2: float) -> float:
    """2*a1*a2 / (a1 + a2); 0 when both terms are 0."""
    if a1 + a2 == 0.0:
        return 0.0
    return 2.0 * a1 * a2 / (a1 + a2)


@dataclass
class DefenseSpec:
    """One defense to train and evaluate."""

    label: str
    kind: str = "plain"  # plain | hardened | ensemble
    config: DefenseConfig = field(default_factory=DefenseConfig)
    use_dae: bool = False
    use_binarization: bool = False
    known_manipulation_set: bool = True

    def __post_init__(self):
        if self.kind not in ("plain", "hardened", "ensemble"):
            raise ValueError(f"unknown defense kind {self.kind!r}")


def train_defense(spec: DefenseSpec, train_set: Dataset, policy, seed=None):
    """Train one defense; returns (classifier, training trace)."""
    cfg = spec.config if seed is None else replace(spec.config, seed=seed)
    if spec.kind == "plain":
        sizes = [train_set.dim] + list(cfg.hidden) + [train_set.class_count]
        model = MlpClassifier.init(sizes, cfg.activation, seed=child_seed(cfg.seed, 0))
        model, trace = train_supervised(model, train_set, cfg.epochs,
                                        cfg.batch_size, cfg.lr,
                                        seed=child_seed(cfg.seed, 1))
        return model, trace
    flags = dict(use_dae=spec.use_dae, use_binarization=spec.use_binarization,
                 known_manipulation_set=spec.known_manipulation_set)
    if spec.kind == "hardened":
        return train_hardened(train_set, policy, cfg, **flags)
    return train_ensemble(train_set, policy, cfg, **flags)


def train_surrogate(train_set: Dataset, seed, profile=None) -> MlpClassifier:
    """Plain classifier standing in for the grey-box attacker's model."""
    prof = dict(SURROGATE_PROFILE)
    if profile:
        prof.update(profile)
    sizes = [train_set.dim] + list(prof["hidden"]) + [train_set.class_count]
    model = MlpClassifier.init(sizes, prof["activation"], seed=child_seed(seed, 0))
    model, _ = train_supervised(model, train_set, prof["epochs"],
                                prof["batch_size"], prof["lr"],
                                seed=child_seed(seed, 1))
    return model


def select_attack_pool(test_set: Dataset, positive_class: int, cap: int, seed):
    """Seeded choice of up to `cap` positive-class test examples."""
    positives = np.flatnonzero(test_set.y == positive_class)
    if len(positives) == 0:
        raise ValueError("no positive-class examples to attack")
    rng = np.random.default_rng(seed)
    take = min(cap, len(positives))
    chosen = np.sort(rng.choice(positives, size=take, replace=False))
    return chosen


def _metric_block(y_true, y_pred, class_count, positive_class):
    block = {
        "accuracy": float(np.mean(np.asarray(y_true) == np.asarray(y_pred))),
        "macro_f1": macro_f1(y_true, y_pred, class_count),
    }
    if class_count == 2:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fnr, fpr, _ = binary_metrics(y_true, y_pred, positive_class)
        block["fnr"] = fnr
        block["fpr"] = fpr
    return block


def evaluate_models(models: dict, train_set: Dataset, test_set: Dataset, policy,
                    attack_configs, threat_model=WHITE_BOX, seed=0,
                    surrogate=None, attack_pool=800, positive_class=1,
                    workers=1) -> dict:
    """Attack every model and compute clean and per-attack metrics.

    Attack metrics are measured on the attacked pool only; the clean-test
    block covers the full test set and supplies the clean macro F1 that
    each attack's harmonic mean pairs with.
    """
    if threat_model == GREY_BOX and surrogate is None:
        raise ValueError("grey-box evaluation needs a surrogate model")
    names = [c.name for c in attack_configs]
    if len(set(names)) != len(names):
        raise ValueError("duplicate attack names in one suite")
    pool_idx = select_attack_pool(test_set, positive_class, attack_pool,
                                  child_seed(seed, 777))
    Xp, yp = test_set.X[pool_idx], test_set.y[pool_idx]
    benign_pool = train_set.X[train_set.y != positive_class]
    o = test_set.class_count

    defenses_block = {}
    for label, clf in models.items():
        clean_pred = clf.predict(test_set.X)
        clean_test = _metric_block(test_set.y, clean_pred, o, positive_class)
        no_attack = _metric_block(yp, clf.predict(Xp), o, positive_class)
        results = run_attack_suite(clf, Xp, yp, policy, attack_configs,
                                   threat_model=threat_model, surrogate=surrogate,
                                   benign_pool=benign_pool, workers=workers)
        attack_blocks = {}
        for name in names:
            outs = results[name]
            X_adv = np.stack([out.x_adv for out in outs])
            y_pred = np.atleast_1d(clf.predict(X_adv))
            block = _metric_block(yp, y_pred, o, positive_class)
            block["harmonic_mean"] = harmonic_mean(clean_test["macro_f1"],
                                                   block["macro_f1"])
            block["success_rate"] = float(np.mean([out.success for out in outs]))
            block["mean_flips"] = float(np.mean([out.flips for out in outs]))
            block["mean_steps"] = float(np.mean([out.steps_used for out in outs]))
            attack_blocks[name] = block
        defenses_block[label] = {
            "clean_test": clean_test,
            "no_attack": no_attack,
            "attacks": attack_blocks,
        }

    report = {
        "metadata": {
            "seed": seed if isinstance(seed, int) else list(seed),
            "threat_model": threat_model,
            "positive_class": int(positive_class),
            "pool_size": int(len(pool_idx)),
            "train_size": int(len(train_set)),
            "test_size": int(len(test_set)),
            "class_count": int(o),
            "attacks": [_jsonable(asdict(c)) for c in attack_configs],
        },
        "defenses": defenses_block,
    }
    return report


def run_experiment(train_set: Dataset, test_set: Dataset, policy,
                   defense_specs, attack_configs, threat_model=WHITE_BOX,
                   seed=0, surrogate_profile=None, attack_pool=800,
                   positive_class=1, workers=1) -> dict:
    """Train the requested defenses (and the surrogate under grey-box),
    then evaluate them; fully determined by the seed."""
    models = {}
    for k, spec in enumerate(defense_specs):
        clf, _ = train_defense(spec, train_set, policy, seed=child_seed(seed, k))
        models[spec.label] = clf
    surrogate = None
    if threat_model == GREY_BOX:
        surrogate = train_surrogate(train_set, child_seed(seed, 999),
                                    surrogate_profile)
    report = evaluate_models(models, train_set, test_set, policy,
                             attack_configs, threat_model=threat_model,
                             seed=seed, surrogate=surrogate,
                             attack_pool=attack_pool,
                             positive_class=positive_class, workers=workers)
    report["metadata"]["defenses"] = [
        {"label": s.label, "kind": s.kind, "use_dae": s.use_dae,
         "use_binarization": s.use_binarization,
         "known_manipulation_set": s.known_manipulation_set,
         "config": _jsonable(asdict(s.config))} for s in defense_specs]
    if surrogate_profile is not None:
        report["metadata"]["surrogate_profile"] = _jsonable(dict(surrogate_profile))
    return report


def _jsonable(obj):
    """Recursively convert numpy scalars/arrays and tuples for JSON."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def report_table(report: dict) -> str:
    """Flat accuracy table: rows are attacks, columns are defenses."""
    labels = list(report["defenses"].keys())
    attack_names = []
    for label in labels:
        for name in report["defenses"][label]["attacks"]:
            if name not in attack_names:
                attack_names.append(name)
    rows = [("clean_test", "clean_test"), ("no_attack", "no_attack")] + \
        [(name, name) for name in attack_names]
    width = max([len(r[0]) for r in rows] + [10])
    header = "attack".ljust(width) + "".join(f"{lab:>14}" for lab in labels)
    lines = [header]
    for key, name in rows:
        cells = []
        for label in labels:
            block = report["defenses"][label]
            if key in ("clean_test", "no_attack"):
                acc = block[key]["accuracy"]
            else:
                acc = block["attacks"].get(name, {}).get("accuracy")
            cells.append(f"{100.0 * acc:>13.2f}" if acc is not None else
                         f"{'-':>13}")
        lines.append(name.ljust(width) + " ".join(cells))
    return "\n".join(lines)
