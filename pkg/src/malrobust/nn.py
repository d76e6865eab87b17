"""Dense feed-forward classifier with exact backpropagation, plus Adam.

Everything is plain numpy.  The classifier applies its activation between
layers and a softmax on the last layer's output; gradients are computed
analytically for every parameter and for the input, which is what the
attack and hardening code consumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12  # inside log, so a saturated softmax never yields -inf
MINIMIZE = "minimize"
MAXIMIZE = "maximize"
CHECKPOINT_VERSION = 1


def child_seed(seed, k: int) -> list:
    """Derive a disjoint child seed from a seed int or seed list."""
    if isinstance(seed, (list, tuple)):
        return list(seed) + [int(k)]
    return [int(seed), int(k)]


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "elu":
        return np.where(z > 0.0, z, np.expm1(z))  # alpha = 1
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(float)
    if name == "elu":
        return np.where(z > 0.0, 1.0, np.exp(z))
    raise ValueError(f"unknown activation {name!r}")


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _stack_forward(weights, biases, activation, X, activate_last):
    """Run X through dense layers, caching pre-activations for backprop.

    Returns (output, zs) where zs[i] is layer i's pre-activation and the
    cached input of layer i is X for i=0 else the activation of zs[i-1].
    """
    zs = []
    a = X
    last = len(weights) - 1
    for i, (W, b) in enumerate(zip(weights, biases)):
        z = a @ W + b
        zs.append(z)
        if i < last or activate_last:
            a = _act(activation, z)
        else:
            a = z
    return a, zs


def _stack_backward(weights, biases, activation, X, zs, out_cot, activate_last):
    """Backpropagate a cotangent on the stack output.

    Returns (weight_grads, bias_grads, input_cot); parameter gradients are
    summed over the batch, the input cotangent stays per-example.
    """
    last = len(weights) - 1
    # reconstruct layer inputs from the cache
    inputs = [X]
    for i in range(last):
        inputs.append(_act(activation, zs[i]))
    delta = out_cot
    if activate_last:
        delta = delta * _act_grad(activation, zs[last])
    w_grads = [None] * len(weights)
    b_grads = [None] * len(weights)
    for i in range(last, -1, -1):
        w_grads[i] = inputs[i].T @ delta
        b_grads[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ weights[i].T) * _act_grad(activation, zs[i - 1])
        else:
            delta = delta @ weights[i].T
    return w_grads, b_grads, delta


def _init_params(layer_sizes, rng):
    # symmetric fan-based init, biases zero
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return weights, biases


@dataclass
class DenseStack:
    """Plain dense stack (used for autoencoder halves)."""

    weights: list
    biases: list
    activation: str = "relu"
    activate_last: bool = False

    @classmethod
    def init(cls, layer_sizes, activation="relu", seed=0, activate_last=False):
        rng = np.random.default_rng(seed)
        w, b = _init_params(list(layer_sizes), rng)
        return cls(w, b, activation, activate_last)

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    def forward(self, X):
        X2 = np.atleast_2d(np.asarray(X, dtype=float))
        out, _ = _stack_forward(self.weights, self.biases, self.activation,
                                X2, self.activate_last)
        return out if np.ndim(X) == 2 else out[0]

    def forward_cached(self, X2):
        return _stack_forward(self.weights, self.biases, self.activation,
                              X2, self.activate_last)

    def backward(self, X2, zs, out_cot):
        return _stack_backward(self.weights, self.biases, self.activation,
                               X2, zs, out_cot, self.activate_last)


@dataclass
class MlpClassifier:
    """Feed-forward softmax classifier.

    weights[i] has shape (layer_sizes[i], layer_sizes[i+1]); the last
    layer produces logits and the activation is applied between layers.
    """

    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        sizes = self.layer_sizes
        if sizes[-1] < 2:
            raise ValueError("output dimension must be >= 2")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise ValueError("inconsistent layer shapes")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError("non-finite parameters")

    @classmethod
    def init(cls, layer_sizes, activation="relu", seed=0):
        rng = np.random.default_rng(seed)
        w, b = _init_params(list(layer_sizes), rng)
        return cls(w, b, activation)

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def class_count(self) -> int:
        return self.weights[-1].shape[1]

    def _check_input(self, X) -> np.ndarray:
        X2 = np.atleast_2d(np.asarray(X, dtype=float))
        if X2.shape[1] != self.input_dim:
            raise ValueError(
                f"input dimension {X2.shape[1]} != model dimension {self.input_dim}")
        if not np.all(np.isfinite(X2)):
            raise ValueError("non-finite input")
        return X2

    def logits(self, X):
        X2 = self._check_input(X)
        out, _ = _stack_forward(self.weights, self.biases, self.activation, X2, False)
        return out if np.ndim(X) == 2 else out[0]

    def predict_proba(self, X):
        return softmax(self.logits(X))

    def predict(self, X):
        p = self.predict_proba(X)
        return np.argmax(p, axis=-1)

    def loss(self, X, y):
        return cross_entropy(self.predict_proba(X), y)

    def input_gradients(self, X, y):
        """Per-example gradient of the cross-entropy loss w.r.t. the input."""
        X2 = self._check_input(X)
        y2 = np.atleast_1d(np.asarray(y, dtype=int))
        logits, zs = _stack_forward(self.weights, self.biases, self.activation, X2, False)
        p = softmax(logits)
        delta = _ce_logit_cotangent(p, y2)
        _, _, xg = _stack_backward(self.weights, self.biases, self.activation,
                                   X2, zs, delta, False)
        return xg if np.ndim(X) == 2 else xg[0]

    def logit_cot_input_gradients(self, X, cot):
        """Per-example input gradient of sum(cot * logits)."""
        X2 = self._check_input(X)
        cot2 = np.atleast_2d(np.asarray(cot, dtype=float))
        _, zs = _stack_forward(self.weights, self.biases, self.activation, X2, False)
        _, _, xg = _stack_backward(self.weights, self.biases, self.activation,
                                   X2, zs, cot2, False)
        return xg if np.ndim(X) == 2 else xg[0]

    def copy(self) -> "MlpClassifier":
        return MlpClassifier([W.copy() for W in self.weights],
                             [b.copy() for b in self.biases], self.activation)


def _ce_logit_cotangent(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    # dL/dlogits for L = -log(max(p_y, floor)); zero where the floor is active
    delta = p.copy()
    rows = np.arange(len(y))
    delta[rows, y] -= 1.0
    floored = p[rows, y] <= PROB_FLOOR
    if np.any(floored):
        delta[floored] = 0.0
    return delta


@dataclass
class GradientBundle:
    """Exact gradients of the per-example loss."""

    weight_grads: list
    bias_grads: list
    input_grad: np.ndarray


def forward(model: MlpClassifier, x) -> np.ndarray:
    """Class-probability vector (softmax over the output layer)."""
    return model.predict_proba(x)


def logits(model: MlpClassifier, x) -> np.ndarray:
    """Pre-softmax output; softmax(logits) equals forward."""
    return model.logits(x)


def cross_entropy(probs, y):
    """-log p_y with a 1e-12 probability floor.

    Accepts a single distribution with an int label or a batch with a
    label vector (returns a vector then).
    """
    p = np.asarray(probs, dtype=float)
    if p.ndim == 1:
        yi = int(y)
        if yi < 0 or yi >= p.shape[0]:
            raise ValueError("label out of range")
        return float(-np.log(max(p[yi], PROB_FLOOR)))
    yv = np.asarray(y, dtype=int)
    if np.any(yv < 0) or np.any(yv >= p.shape[1]):
        raise ValueError("label out of range")
    picked = p[np.arange(len(yv)), yv]
    return -np.log(np.maximum(picked, PROB_FLOOR))


def backward(model: MlpClassifier, x, y: int) -> GradientBundle:
    """Gradients of cross_entropy(forward(x), y) w.r.t. parameters and x."""
    X2 = model._check_input(x)
    if X2.shape[0] != 1:
        raise ValueError("backward takes a single example")
    y2 = np.array([int(y)])
    if y2[0] < 0 or y2[0] >= model.class_count:
        raise ValueError("label out of range")
    logits_, zs = _stack_forward(model.weights, model.biases, model.activation, X2, False)
    p = softmax(logits_)
    delta = _ce_logit_cotangent(p, y2)
    wg, bg, xg = _stack_backward(model.weights, model.biases, model.activation,
                                 X2, zs, delta, False)
    return GradientBundle(wg, bg, xg[0])


def _batch_param_gradients(model: MlpClassifier, X2, y2):
    """Mean parameter gradients over a batch, plus the mean loss."""
    logits_, zs = _stack_forward(model.weights, model.biases, model.activation, X2, False)
    p = softmax(logits_)
    n = len(y2)
    delta = _ce_logit_cotangent(p, y2) / n
    wg, bg, _ = _stack_backward(model.weights, model.biases, model.activation,
                                X2, zs, delta, False)
    loss = float(np.mean(cross_entropy(p, y2)))
    return wg, bg, loss


@dataclass
class AdamState:
    """Adam moments for one variable array."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_stab: float = 1e-8
    step: int = 0

    @classmethod
    def zeros(cls, shape, learning_rate=0.001, beta1=0.9, beta2=0.999,
              epsilon_stab=1e-8):
        return cls(np.zeros(shape), np.zeros(shape), learning_rate,
                   beta1, beta2, epsilon_stab)


def adam_step(state: AdamState, variables: np.ndarray, grads: np.ndarray,
              direction: str = MINIMIZE) -> np.ndarray:
    """One bias-corrected Adam update; MAXIMIZE negates the gradient.

    Mutates ``state`` and returns the updated variables.
    """
    g = np.asarray(grads, dtype=float)
    if g.shape != np.shape(variables):
        raise ValueError("gradient shape mismatch")
    if direction == MAXIMIZE:
        g = -g
    elif direction != MINIMIZE:
        raise ValueError(f"unknown direction {direction!r}")
    state.step += 1
    state.first_moment = state.beta1 * state.first_moment + (1 - state.beta1) * g
    state.second_moment = state.beta2 * state.second_moment + (1 - state.beta2) * g * g
    m_hat = state.first_moment / (1 - state.beta1 ** state.step)
    v_hat = state.second_moment / (1 - state.beta2 ** state.step)
    return variables - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon_stab)


def train_supervised(model: MlpClassifier, dataset, epochs: int,
                     batch_size: int = 128, lr: float = 0.001, seed=0):
    """Mini-batch Adam training on the cross-entropy loss.

    Deterministic given the seed: the batch order is reshuffled each epoch
    from the seed stream and the last short batch is kept.  Returns
    (model, per-epoch mean loss trace); the model is updated in place.
    """
    X = np.asarray(dataset.X, dtype=float)
    y = np.asarray(dataset.y, dtype=int)
    if len(X) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    w_states = [AdamState.zeros(W.shape, lr) for W in model.weights]
    b_states = [AdamState.zeros(b.shape, lr) for b in model.biases]
    trace = []
    for _ in range(epochs):
        perm = rng.permutation(len(X))
        losses = []
        for start in range(0, len(X), batch_size):
            sel = perm[start:start + batch_size]
            wg, bg, loss = _batch_param_gradients(model, X[sel], y[sel])
            for i in range(len(model.weights)):
                model.weights[i] = adam_step(w_states[i], model.weights[i], wg[i])
                model.biases[i] = adam_step(b_states[i], model.biases[i], bg[i])
            losses.append(loss)
        trace.append(float(np.mean(losses)))
    return model, trace


def save_model(path, model: MlpClassifier) -> None:
    """Write a self-describing JSON checkpoint."""
    record = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "mlp",
        "layer_sizes": model.layer_sizes,
        "activation": model.activation,
        "weights": [W.tolist() for W in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, sort_keys=True)


def _model_from_record(record) -> MlpClassifier:
    weights = [np.asarray(W, dtype=float) for W in record["weights"]]
    biases = [np.asarray(b, dtype=float) for b in record["biases"]]
    model = MlpClassifier(weights, biases, record["activation"])
    if model.layer_sizes != list(record["layer_sizes"]):
        raise ValueError("checkpoint layer_sizes disagree with parameter shapes")
    return model


def load_model(path) -> MlpClassifier:
    with open(path, "r", encoding="utf-8") as fh:
        record = json.load(fh)
    if record.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {record.get('format_version')!r}")
    if record.get("kind") != "mlp":
        raise ValueError(f"not an mlp checkpoint: kind={record.get('kind')!r}")
    return _model_from_record(record)
