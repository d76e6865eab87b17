"""Evasion attacks over binary feature vectors.

Eleven attacks, all constrained to the discrete manipulation domain:
random, mimicry, fgsm, grosse, bga, bca, four PGD variants (l1 / l2 /
linf steepest-ascent steps and an Adam-driven variant), and ead (elastic
net with iterative shrinkage).  Gradient-based attacks maximize the
victim's cross-entropy loss (ead minimizes a logit-margin objective);
every attack emits a binary vector admissible under the policy.

An attack succeeds when the model it runs against no longer predicts the
true label.  Under the grey-box threat model the suite runs each attack
against a surrogate model and then judges success on the real victim.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .data import ManipulationPolicy, admissible, project_to_m
from .nn import MAXIMIZE, AdamState, adam_step

WHITE_BOX = "white_box"
GREY_BOX = "grey_box"

ATTACK_NAMES = ("random", "mimicry", "fgsm", "grosse", "bga", "bca",
                "pgd_l1", "pgd_l2", "pgd_linf", "pgd_adam", "ead")

# step sizes from the evaluation protocol; max_steps defaults to 100 everywhere
_DEFAULT_STEP = {
    "fgsm": 1.0,
    "pgd_l1": 1.0,
    "pgd_l2": 1.0,
    "pgd_linf": 0.01,
    "pgd_adam": 0.01,
    "ead": 0.01,
}


@dataclass
class AttackConfig:
    name: str
    max_steps: int = 100
    step_size: float = 0.01
    epsilon_ball: Optional[float] = None  # None = unconstrained
    ead_beta: float = 0.1
    ead_kappa: float = 64.0
    ead_c: float = 1.0
    mimicry_candidates: int = 10
    mimicry_selection: str = "nearest"  # or "random"
    seed: int = 0

    def __post_init__(self):
        if self.name not in ATTACK_NAMES:
            raise ValueError(f"unknown attack {self.name!r}")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")

    @classmethod
    def for_attack(cls, name: str, **overrides) -> "AttackConfig":
        """Config with the per-attack default step size filled in."""
        cfg = cls(name=name, **overrides)
        if "step_size" not in overrides and name in _DEFAULT_STEP:
            cfg = replace(cfg, step_size=_DEFAULT_STEP[name])
        return cfg


@dataclass
class AttackOutcome:
    x_adv: np.ndarray
    success: bool
    flips: int
    l1: float
    l2: float
    linf: float
    steps_used: int


def _outcome(x, x_adv, success, steps) -> AttackOutcome:
    delta = x_adv - x
    return AttackOutcome(
        x_adv=x_adv,
        success=bool(success),
        flips=int(np.count_nonzero(delta)),
        l1=float(np.abs(delta).sum()),
        l2=float(np.sqrt((delta * delta).sum())),
        linf=float(np.max(np.abs(delta))) if delta.size else 0.0,
        steps_used=int(steps),
    )


def _misclassified(model, x, y) -> bool:
    return int(model.predict(x)) != int(y)


def random_attack(model, x, y, policy: ManipulationPolicy,
                  config: AttackConfig, rng=None) -> AttackOutcome:
    """Flip one uniformly chosen admissible feature per step.

    Each feature is flipped at most once; stops at the step budget, at
    success, or when no admissible flip remains.
    """
    rng = np.random.default_rng(config.seed if rng is None else rng)
    x = np.asarray(x, dtype=float)
    cur = x.copy()
    allowed = np.where(x == 0.0, policy.addition_allowed, policy.removal_allowed)
    candidates = list(np.flatnonzero(allowed))
    steps = 0
    success = _misclassified(model, cur, y)
    while steps < config.max_steps and candidates and not success:
        pick = int(rng.integers(len(candidates)))
        j = candidates.pop(pick)
        cur[j] = 1.0 - cur[j]
        steps += 1
        success = _misclassified(model, cur, y)
    return _outcome(x, cur, success, steps)


def mimicry_attack(model, x, y, benign_pool, policy: ManipulationPolicy,
                   config: AttackConfig, rng=None) -> AttackOutcome:
    """Copy the admissible coordinates of guide examples onto x.

    Guides are the `mimicry_candidates` pool vectors nearest to x in l1
    distance (or a uniform random subset when `mimicry_selection` is
    "random").  Among candidates that evade the model the one with the
    smallest l1 perturbation is returned; otherwise the overall
    minimum-perturbation candidate with success False.
    """
    pool = np.atleast_2d(np.asarray(benign_pool, dtype=float))
    if len(pool) == 0:
        raise ValueError("empty benign pool")
    rng = np.random.default_rng(config.seed if rng is None else rng)
    x = np.asarray(x, dtype=float)
    k = min(config.mimicry_candidates, len(pool))
    if config.mimicry_selection == "random":
        guide_idx = rng.choice(len(pool), size=k, replace=False)
    else:
        dists = np.abs(pool - x).sum(axis=1)
        guide_idx = np.argsort(dists, kind="stable")[:k]
    flip_ok = np.where(x == 0.0, policy.addition_allowed, policy.removal_allowed)
    best = None  # (success_rank, l1, order, candidate)
    for order, gi in enumerate(guide_idx):
        cand = np.where(flip_ok, pool[gi], x)
        l1 = float(np.abs(cand - x).sum())
        succ = _misclassified(model, cand, y)
        key = (0 if succ else 1, l1, order)
        if best is None or key < best[0]:
            best = (key, cand, succ)
    key, cand, succ = best
    return _outcome(x, cand, succ, len(guide_idx))


def fgsm(model, x, y, policy: ManipulationPolicy, config: AttackConfig) -> AttackOutcome:
    """Single signed-gradient step of size step_size, then projection."""
    x = np.asarray(x, dtype=float)
    g = model.input_gradients(x, y)
    x_cont = np.clip(x + config.step_size * np.sign(g), 0.0, 1.0)
    x_adv = project_to_m(x, x_cont, policy)
    return _outcome(x, x_adv, _misclassified(model, x_adv, y), 1)


def _addition_candidates(cur, grads, policy):
    return (cur == 0.0) & policy.addition_allowed & (grads > 0.0)


def grosse(model, x, y, policy: ManipulationPolicy, config: AttackConfig) -> AttackOutcome:
    """Per step, set the zero feature with the largest positive loss
    gradient to 1 (addition only)."""
    x = np.asarray(x, dtype=float)
    cur = x.copy()
    steps = 0
    success = _misclassified(model, cur, y)
    while steps < config.max_steps and not success:
        g = model.input_gradients(cur, y)
        mask = _addition_candidates(cur, g, policy)
        if not mask.any():
            break
        scores = np.where(mask, g, -np.inf)
        j = int(np.argmax(scores))  # lowest index wins ties
        cur[j] = 1.0
        steps += 1
        success = _misclassified(model, cur, y)
    return _outcome(x, cur, success, steps)


def bga(model, x, y, policy: ManipulationPolicy, config: AttackConfig) -> AttackOutcome:
    """Per step, set to 1 every addition-allowed zero feature whose
    positive partial derivative reaches ||grad||_2 / sqrt(dim)."""
    x = np.asarray(x, dtype=float)
    dim = x.shape[0]
    cur = x.copy()
    steps = 0
    success = _misclassified(model, cur, y)
    while steps < config.max_steps and not success:
        g = model.input_gradients(cur, y)
        threshold = float(np.linalg.norm(g)) / np.sqrt(dim)
        mask = (cur == 0.0) & policy.addition_allowed & (g > 0.0) & (g >= threshold)
        if not mask.any():
            break
        cur[mask] = 1.0
        steps += 1
        success = _misclassified(model, cur, y)
    return _outcome(x, cur, success, steps)


def bca(model, x, y, policy: ManipulationPolicy, config: AttackConfig) -> AttackOutcome:
    """Per step, flip the single addition-allowed zero feature with the
    maximum positive gradient."""
    x = np.asarray(x, dtype=float)
    cur = x.copy()
    steps = 0
    success = _misclassified(model, cur, y)
    while steps < config.max_steps and not success:
        g = model.input_gradients(cur, y)
        mask = _addition_candidates(cur, g, policy)
        if not mask.any():
            break
        j = int(np.argmax(np.where(mask, g, -np.inf)))
        cur[j] = 1.0
        steps += 1
        success = _misclassified(model, cur, y)
    return _outcome(x, cur, success, steps)


def _project_l1_ball(v: np.ndarray, radius: float) -> np.ndarray:
    if np.abs(v).sum() <= radius:
        return v
    u = np.sort(np.abs(v))[::-1]
    css = np.cumsum(u)
    ks = np.arange(1, len(u) + 1)
    cond = u - (css - radius) / ks > 0
    rho = ks[cond][-1]
    tau = (css[rho - 1] - radius) / rho
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


def _ball_project(delta: np.ndarray, variant: str, radius) -> np.ndarray:
    if radius is None:
        return delta
    if variant == "linf":
        return np.clip(delta, -radius, radius)
    if variant == "l2":
        n = float(np.linalg.norm(delta))
        return delta if n <= radius else delta * (radius / n)
    if variant == "l1":
        return _project_l1_ball(delta, radius)
    return delta


def pgd(model, x, y, policy: ManipulationPolicy, config: AttackConfig) -> AttackOutcome:
    """Projected gradient ascent on a continuous perturbation.

    Variant picks the per-step direction: linf uses the gradient sign, l2
    the normalized gradient, l1 touches only the coordinate with the
    largest absolute gradient, and adam runs an Adam update in
    maximization mode with no normalization.  Each step clips x + delta
    into the unit box; a finite epsilon_ball additionally projects delta
    into the corresponding norm ball (l1/l2/linf only).  The running
    iterate is rounded through the policy each step so the attack can stop
    at the first admissible success.
    """
    variant = config.name.split("_", 1)[1]  # "l1" | "l2" | "linf" | "adam"
    x = np.asarray(x, dtype=float)
    delta = np.zeros_like(x)
    adam = AdamState.zeros(x.shape, learning_rate=config.step_size)
    best = project_to_m(x, x + delta, policy)
    if _misclassified(model, best, y):
        return _outcome(x, best, True, 0)
    steps = 0
    for _ in range(config.max_steps):
        g = model.input_gradients(x + delta, y)
        if variant == "adam":
            delta = adam_step(adam, delta, g, MAXIMIZE)
        elif variant == "linf":
            delta = delta + config.step_size * np.sign(g)
        elif variant == "l2":
            n = float(np.linalg.norm(g))
            if n > 0.0:
                delta = delta + config.step_size * g / n
        else:  # l1: steepest coordinate whose move is not clipped away
            cur = x + delta
            feasible = ((g > 0.0) & (cur < 1.0)) | ((g < 0.0) & (cur > 0.0))
            if feasible.any():
                j = int(np.argmax(np.where(feasible, np.abs(g), -np.inf)))
                step = np.zeros_like(delta)
                step[j] = config.step_size * np.sign(g[j])
                delta = delta + step
        if variant != "adam":
            delta = _ball_project(delta, variant, config.epsilon_ball)
        delta = np.clip(x + delta, 0.0, 1.0) - x
        steps += 1
        rounded = project_to_m(x, x + delta, policy)
        if _misclassified(model, rounded, y):
            return _outcome(x, rounded, True, steps)
    x_adv = project_to_m(x, x + delta, policy)
    return _outcome(x, x_adv, _misclassified(model, x_adv, y), steps)


def _ead_margin_cotangent(model, x, y, kappa):
    """Gradient seed for g = max(Z_y - max_{j != y} Z_j, -kappa)."""
    z = model.logits(x)
    z_other = z.copy()
    z_other[y] = -np.inf
    j_star = int(np.argmax(z_other))
    margin = float(z[y] - z[j_star])
    cot = np.zeros_like(z)
    if margin > -kappa:
        cot[y] = 1.0
        cot[j_star] = -1.0
    return cot, margin


def ead(model, x, y, policy: ManipulationPolicy, config: AttackConfig) -> AttackOutcome:
    """Elastic-net attack: gradient steps on c*g + ||delta||_2^2 followed
    by an l1 proximal shrink of beta * step_size per iteration."""
    x = np.asarray(x, dtype=float)
    lr = config.step_size
    delta = np.zeros_like(x)
    rounded = project_to_m(x, x + delta, policy)
    if _misclassified(model, rounded, y):
        return _outcome(x, rounded, True, 0)
    steps = 0
    for _ in range(config.max_steps):
        cot, _ = _ead_margin_cotangent(model, x + delta, y, config.ead_kappa)
        g = config.ead_c * model.logit_cot_input_gradients(x + delta, cot) + 2.0 * delta
        z = delta - lr * g
        delta = np.sign(z) * np.maximum(np.abs(z) - config.ead_beta * lr, 0.0)
        delta = np.clip(x + delta, 0.0, 1.0) - x
        steps += 1
        rounded = project_to_m(x, x + delta, policy)
        if _misclassified(model, rounded, y):
            return _outcome(x, rounded, True, steps)
    x_adv = project_to_m(x, x + delta, policy)
    return _outcome(x, x_adv, _misclassified(model, x_adv, y), steps)


def run_single(model, x, y, policy, config: AttackConfig,
               benign_pool=None, rng=None) -> AttackOutcome:
    """Dispatch one attack invocation against one example."""
    name = config.name
    if name == "random":
        return random_attack(model, x, y, policy, config, rng=rng)
    if name == "mimicry":
        if benign_pool is None:
            raise ValueError("mimicry requires a benign pool")
        return mimicry_attack(model, x, y, benign_pool, policy, config, rng=rng)
    if name == "fgsm":
        return fgsm(model, x, y, policy, config)
    if name == "grosse":
        return grosse(model, x, y, policy, config)
    if name == "bga":
        return bga(model, x, y, policy, config)
    if name == "bca":
        return bca(model, x, y, policy, config)
    if name in ("pgd_l1", "pgd_l2", "pgd_linf", "pgd_adam"):
        return pgd(model, x, y, policy, config)
    if name == "ead":
        return ead(model, x, y, policy, config)
    raise ValueError(f"unknown attack {name!r}")


def run_attack_suite(victim, X, y, policy, configs, threat_model=WHITE_BOX,
                     surrogate=None, benign_pool=None, workers=1):
    """Run every configured attack against every example.

    White-box attacks search on the victim itself; grey-box attacks search
    on the surrogate and success is then judged on the victim.  Returns
    {attack name: [AttackOutcome per example]} in example order.
    """
    if threat_model not in (WHITE_BOX, GREY_BOX):
        raise ValueError(f"unknown threat model {threat_model!r}")
    if threat_model == GREY_BOX and surrogate is None:
        raise ValueError("grey-box attacks need a surrogate model")
    attack_model = victim if threat_model == WHITE_BOX else surrogate
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=int))

    def one(config, i):
        rng = np.random.default_rng([config.seed, i])
        out = run_single(attack_model, X[i], y[i], policy, config,
                         benign_pool=benign_pool, rng=rng)
        if attack_model is not victim:
            out = _outcome(X[i], out.x_adv,
                           _misclassified(victim, out.x_adv, y[i]), out.steps_used)
        return out

    results = {}
    for config in configs:
        if workers > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outs = list(pool.map(lambda i: one(config, i), range(len(X))))
        else:
            outs = [one(config, i) for i in range(len(X))]
        results[config.name] = outs
    return results


def outcomes_to_rows(results) -> list[dict]:
    """Flatten suite results into one row per example x attack."""
    rows = []
    for name in results:
        for i, out in enumerate(results[name]):
            rows.append({
                "attack": name,
                "example_id": i,
                "success": int(out.success),
                "flips": out.flips,
                "l1": out.l1,
                "l2": out.l2,
                "linf": out.linf,
                "steps_used": out.steps_used,
            })
    return rows
