"""Small deterministic MLP trained on labeled loss plus weighted knowledge losses.

The classifier outputs one independent logistic probability per class (the
Bernoulli reading that the product-form knowledge losses require), so the
labeled-data term is per-class binary cross-entropy against one-hot targets.
Training is a pure function of (dataset, coalition, config): every random
choice comes from the config seed, and the batch stream does not depend on
which knowledge is active, so coalition runs differ only through the loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .coalitions import Coalition
from .semantics import CLAMP_EPS, KnowledgeSpec, _exactly_one_masked


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class MlpParams:
    """Weight matrices and bias vectors of a fully-connected net."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up")
        if not self.weights:
            raise ValueError("need at least one layer")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ValueError("layer shape mismatch")
        for prev, nxt in zip(self.weights, self.weights[1:]):
            if prev.shape[1] != nxt.shape[0]:
                raise ValueError("layer chain mismatch")
        if not all(np.isfinite(w).all() for w in self.weights):
            raise ValueError("non-finite weights")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_mlp(layer_sizes: Sequence[int], seed) -> MlpParams:
    """Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ValueError(f"invalid layer sizes {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_trace(params: MlpParams, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Activations of every layer; tanh hiddens, per-class sigmoid output."""
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        h = _sigmoid(z) if i == last else np.tanh(z)
        acts.append(h)
    return acts, h


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Per-class probabilities for one sample (1-D) or a batch (2-D)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != params.weights[0].shape[0]:
        raise ValueError(
            f"input dim {x.shape[1]} does not match network input {params.weights[0].shape[0]}"
        )
    _, probs = _forward_trace(params, x)
    return probs[0] if single else probs


def _backprop(
    params: MlpParams, acts: list[np.ndarray], delta_out: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gradients from d(loss)/d(output preactivation), summed over the batch."""
    grads_w = [np.zeros_like(w) for w in params.weights]
    grads_b = [np.zeros_like(b) for b in params.biases]
    delta = delta_out
    for i in range(len(params.weights) - 1, -1, -1):
        grads_w[i] = acts[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i].T) * (1.0 - acts[i] * acts[i])
    return grads_w, grads_b


def _zero_grads(params: MlpParams) -> tuple[list[np.ndarray], list[np.ndarray]]:
    return [np.zeros_like(w) for w in params.weights], [np.zeros_like(b) for b in params.biases]


def bce_loss(probs: np.ndarray, labels: np.ndarray, n_classes: int) -> float:
    """Summed per-class binary cross-entropy against one-hot targets."""
    pc = np.clip(probs, CLAMP_EPS, 1.0 - CLAMP_EPS)
    onehot = np.eye(n_classes)[labels]
    return float(-(onehot * np.log(pc) + (1.0 - onehot) * np.log1p(-pc)).sum())


def _knowledge_member_mask(
    spec: KnowledgeSpec, bits: np.ndarray | None, batch: int, n_classes: int
) -> np.ndarray:
    if spec.family == "one_hot":
        return np.ones((batch, n_classes), dtype=bool)
    inside = np.zeros(n_classes, dtype=bool)
    inside[sorted(spec.subset)] = True
    if bits is None:
        raise ValueError(f"knowledge {spec.name!r} needs per-sample truth bits")
    if inside.all() or not inside.any():
        raise ValueError("subset must be a proper subset of the label space")
    return np.where(np.asarray(bits, dtype=bool)[:, None], inside[None, :], ~inside[None, :])


def combined_loss(
    params: MlpParams,
    x_labeled: np.ndarray,
    y_labeled: np.ndarray,
    x_unlabeled: np.ndarray,
    knowledge_terms: Sequence[tuple[KnowledgeSpec, np.ndarray | None]],
) -> tuple[float, tuple[list[np.ndarray], list[np.ndarray]]]:
    """Labeled BCE plus weighted knowledge losses on the unlabeled batch.

    knowledge_terms lists the active coalition members with the truth bits
    for this batch (None for one-hot knowledge). Returns the summed loss and
    exact backprop gradients in the shape of the parameters.
    """
    if len(x_labeled) == 0:
        raise ValueError("labeled batch must be nonempty")
    n_classes = params.weights[-1].shape[1]

    acts, probs = _forward_trace(params, np.asarray(x_labeled, dtype=np.float64))
    onehot = np.eye(n_classes)[np.asarray(y_labeled)]
    loss = bce_loss(probs, np.asarray(y_labeled), n_classes)
    grads_w, grads_b = _backprop(params, acts, probs - onehot)

    if knowledge_terms and len(x_unlabeled):
        acts_u, probs_u = _forward_trace(params, np.asarray(x_unlabeled, dtype=np.float64))
        pc = np.clip(probs_u, CLAMP_EPS, 1.0 - CLAMP_EPS)
        grad_p = np.zeros_like(probs_u)
        for spec, bits in knowledge_terms:
            mask = _knowledge_member_mask(spec, bits, len(x_unlabeled), n_classes)
            term_loss, term_grad = _exactly_one_masked(pc, mask)
            loss += spec.weight * float(term_loss.sum())
            grad_p += spec.weight * term_grad
        delta_u = grad_p * probs_u * (1.0 - probs_u)  # chain through the sigmoid
        gu_w, gu_b = _backprop(params, acts_u, delta_u)
        for i in range(len(grads_w)):
            grads_w[i] += gu_w[i]
            grads_b[i] += gu_b[i]

    return loss, (grads_w, grads_b)


@dataclass(frozen=True)
class TrainConfig:
    """Deterministic training recipe: Adam plus a step-down tuning schedule.

    ``epochs`` is the main phase at ``lr``; each tuning phase then runs at
    its own rate. One epoch is one pass over the unlabeled pool (the labeled
    set is far smaller and cycles with reuse so every step sees both kinds).
    """

    epochs: int = 10
    batch_labeled: int = 16
    batch_unlabeled: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tuning_phases: tuple[tuple[float, int], ...] = (
        (5e-4, 2),
        (1e-4, 2),
        (5e-5, 2),
        (1e-5, 2),
    )
    hidden: tuple[int, ...] = (64, 32)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ValueError("epochs and batch sizes must be positive")
        if self.lr <= 0 or any(lr <= 0 or ep < 1 for lr, ep in self.tuning_phases):
            raise ValueError("learning rates must be positive and phase epochs >= 1")

    def phases(self) -> tuple[tuple[float, int], ...]:
        return ((self.lr, self.epochs),) + tuple(self.tuning_phases)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_labeled": self.batch_labeled,
            "batch_unlabeled": self.batch_unlabeled,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "tuning_phases": [list(p) for p in self.tuning_phases],
            "hidden": list(self.hidden),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        kwargs = dict(payload)
        if "tuning_phases" in kwargs:
            kwargs["tuning_phases"] = tuple(
                (float(lr), int(ep)) for lr, ep in kwargs["tuning_phases"]
            )
        if "hidden" in kwargs:
            kwargs["hidden"] = tuple(int(h) for h in kwargs["hidden"])
        return cls(**kwargs)


@dataclass
class Dataset:
    """Labeled, unlabeled (with per-knowledge truth bits), and test splits.

    ``y_unlabeled_true`` exists only between generation and
    attach_knowledge_truth; training never reads it.
    """

    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    knowledge: tuple[KnowledgeSpec, ...] = ()
    truth_bits: dict[int, np.ndarray] = field(default_factory=dict)
    y_unlabeled_true: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        for arr in (self.y_labeled, self.y_test):
            if len(arr) and (arr.min() < 0 or arr.max() >= self.n_classes):
                raise ValueError("labels outside [0, n_classes)")
        for player, bits in self.truth_bits.items():
            if len(bits) != len(self.x_unlabeled):
                raise ValueError(f"truth bits for player {player} misaligned with unlabeled set")

    @property
    def input_dim(self) -> int:
        return self.x_labeled.shape[1]


@dataclass
class Metrics:
    """Test accuracy plus the final objective decomposition over full splits."""

    test_accuracy: float
    data_loss: float
    knowledge_losses: dict[int, float]


class _Adam:
    """Adam with bias correction; one state slot per parameter array."""

    def __init__(self, params: MlpParams, beta1: float, beta2: float, eps: float):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(a) for a in params.weights + params.biases]
        self.v = [np.zeros_like(a) for a in params.weights + params.biases]

    def step(self, params: MlpParams, grads_w, grads_b, lr: float) -> None:
        self.t += 1
        corr1 = 1.0 - self.beta1**self.t
        corr2 = 1.0 - self.beta2**self.t
        arrays = params.weights + params.biases
        grads = grads_w + grads_b
        for i, (a, g) in enumerate(zip(arrays, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            a -= lr * (self.m[i] / corr1) / (np.sqrt(self.v[i] / corr2) + self.eps)


class _LabeledCycler:
    """Reshuffled pass over the labeled set, reused indefinitely."""

    def __init__(self, count: int, rng: np.random.Generator):
        self._count = count
        self._rng = rng
        self._order = rng.permutation(count)
        self._at = 0

    def take(self, k: int) -> np.ndarray:
        out = np.empty(k, dtype=np.int64)
        filled = 0
        while filled < k:
            if self._at == self._count:
                self._order = self._rng.permutation(self._count)
                self._at = 0
            grab = min(k - filled, self._count - self._at)
            out[filled : filled + grab] = self._order[self._at : self._at + grab]
            self._at += grab
            filled += grab
        return out


def _coalition_terms(dataset: Dataset, coalition: Coalition) -> list[tuple[KnowledgeSpec, np.ndarray | None]]:
    terms = []
    for player in coalition.members():
        if player >= len(dataset.knowledge):
            raise ValueError(f"coalition member {player} has no configured knowledge")
        spec = dataset.knowledge[player]
        bits = dataset.truth_bits.get(player)
        if spec.family == "subset" and bits is None:
            raise ValueError(f"knowledge {spec.name!r} has no attached truth bits")
        terms.append((spec, bits))
    return terms


def train(dataset: Dataset, coalition: Coalition, config: TrainConfig) -> tuple[MlpParams, Metrics]:
    """Run the full schedule and return trained parameters and metrics.

    Deterministic: parameter init and the batch streams are derived from
    config.seed only, so two runs (and runs with different active knowledge)
    consume identical randomness.
    """
    if len(dataset.x_labeled) == 0:
        raise ValueError("dataset has no labeled samples")
    terms = _coalition_terms(dataset, coalition)
    layer_sizes = (dataset.input_dim, *config.hidden, dataset.n_classes)
    params = init_mlp(layer_sizes, seed=np.random.SeedSequence([config.seed, 0x1717]))
    batch_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x2929]))

    n_unl = len(dataset.x_unlabeled)
    n_lab = len(dataset.x_labeled)
    steps_per_epoch = max(1, math.ceil(max(n_unl, 1) / config.batch_unlabeled))
    labeled = _LabeledCycler(n_lab, batch_rng)
    adam = _Adam(params, config.beta1, config.beta2, config.eps)

    step = 0
    for lr, epochs in config.phases():
        for _ in range(epochs):
            unl_order = batch_rng.permutation(n_unl) if n_unl else np.empty(0, dtype=np.int64)
            for s in range(steps_per_epoch):
                lab_idx = labeled.take(config.batch_labeled)
                unl_idx = unl_order[s * config.batch_unlabeled : (s + 1) * config.batch_unlabeled]
                batch_terms = [
                    (spec, bits[unl_idx] if bits is not None else None) for spec, bits in terms
                ]
                loss, (gw, gb) = combined_loss(
                    params,
                    dataset.x_labeled[lab_idx],
                    dataset.y_labeled[lab_idx],
                    dataset.x_unlabeled[unl_idx],
                    batch_terms,
                )
                if not math.isfinite(loss):
                    raise TrainingDivergedError(step, loss)
                adam.step(params, gw, gb, lr)
                step += 1

    accuracy = evaluate_accuracy(params, dataset.x_test, dataset.y_test)
    data_loss, knowledge_losses = loss_decomposition(params, dataset, coalition)
    return params, Metrics(accuracy, data_loss, knowledge_losses)


def loss_decomposition(
    params: MlpParams, dataset: Dataset, coalition: Coalition
) -> tuple[float, dict[int, float]]:
    """Objective terms over the full labeled/unlabeled splits at these params."""
    probs = forward(params, dataset.x_labeled)
    data_loss = bce_loss(probs, dataset.y_labeled, dataset.n_classes)
    knowledge_losses: dict[int, float] = {}
    if len(dataset.x_unlabeled):
        probs_u = forward(params, dataset.x_unlabeled)
        pc = np.clip(probs_u, CLAMP_EPS, 1.0 - CLAMP_EPS)
        for spec, bits in _coalition_terms(dataset, coalition):
            mask = _knowledge_member_mask(spec, bits, len(pc), dataset.n_classes)
            term_loss, _ = _exactly_one_masked(pc, mask)
            knowledge_losses[spec.player] = spec.weight * float(term_loss.sum())
    return data_loss, knowledge_losses


def evaluate_accuracy(params: MlpParams, x_test: np.ndarray, y_test: np.ndarray) -> float:
    """Fraction of test samples whose argmax class (lowest index wins ties)
    equals the label."""
    if len(x_test) == 0:
        raise ValueError("test set must be nonempty")
    predicted = np.argmax(forward(params, x_test), axis=1)
    return float(np.mean(predicted == np.asarray(y_test)))
