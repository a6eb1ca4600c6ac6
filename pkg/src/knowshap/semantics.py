"""Symbolic label knowledge: logical sentences, their losses, and corruption.

A sentence constrains the vector of per-label indicators. Its loss on a
probability vector p is the negative log of the probability mass the model
puts on satisfying states, treating labels as independent Bernoulli
indicators: state S has probability prod_j p_j^{S_j} (1-p_j)^{1-S_j}.
Everything is computed in log space, with p clamped away from 0 and 1, so
losses stay finite for degenerate inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy.special import logsumexp

CLAMP_EPS = 1e-12
MAX_DNF_LABELS = 20  # 2^J state-space guard for explicit-state sentences


class UnsatisfiableSentenceError(ValueError):
    """Sentence admits no satisfying state."""


@dataclass(frozen=True)
class ExactlyOne:
    """Exactly one label indicator is on."""


@dataclass(frozen=True)
class SubsetMembership:
    """The single correct label lies inside ``labels`` (or outside it).

    Evaluated under exactly-one semantics: satisfying states are the one-hot
    states whose hot index is in the effective set.
    """

    labels: frozenset[int]
    inside: bool = True

    def __post_init__(self) -> None:
        labels = frozenset(int(i) for i in self.labels)
        if not labels:
            raise ValueError("subset must be nonempty")
        if any(i < 0 for i in labels):
            raise ValueError("label indices must be nonnegative")
        object.__setattr__(self, "labels", labels)

    def effective_labels(self, n_classes: int) -> tuple[int, ...]:
        if max(self.labels) >= n_classes:
            raise ValueError(f"subset {sorted(self.labels)} exceeds label space of {n_classes}")
        if len(self.labels) == n_classes:
            raise ValueError("subset must be a proper subset of the label space")
        if self.inside:
            return tuple(sorted(self.labels))
        return tuple(i for i in range(n_classes) if i not in self.labels)


@dataclass(frozen=True)
class GeneralDnf:
    """Explicit list of satisfying states over {0,1}^J."""

    states: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        states = tuple(tuple(int(b) for b in s) for s in self.states)
        if not states:
            raise UnsatisfiableSentenceError("no satisfying states listed")
        width = len(states[0])
        if width > MAX_DNF_LABELS:
            raise ValueError(f"state width {width} exceeds guard of {MAX_DNF_LABELS}")
        for s in states:
            if len(s) != width:
                raise ValueError("all states must have the same length")
            if any(b not in (0, 1) for b in s):
                raise ValueError("states must be 0/1 vectors")
        if len(set(states)) != len(states):
            raise ValueError("duplicate satisfying states")
        object.__setattr__(self, "states", states)


LogicalSentence = Union[ExactlyOne, SubsetMembership, GeneralDnf]


def satisfying_states(sentence: LogicalSentence, n_classes: int) -> tuple[tuple[int, ...], ...]:
    """The states in {0,1}^J satisfying the sentence, in deterministic order."""
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if isinstance(sentence, ExactlyOne):
        return tuple(_one_hot_state(j, n_classes) for j in range(n_classes))
    if isinstance(sentence, SubsetMembership):
        hot = sentence.effective_labels(n_classes)
        if not hot:
            raise UnsatisfiableSentenceError("effective subset is empty")
        return tuple(_one_hot_state(j, n_classes) for j in hot)
    if isinstance(sentence, GeneralDnf):
        if len(sentence.states[0]) != n_classes:
            raise ValueError("state width does not match label space")
        return sentence.states
    raise TypeError(f"unknown sentence type {type(sentence)!r}")


def _one_hot_state(hot: int, n_classes: int) -> tuple[int, ...]:
    return tuple(1 if j == hot else 0 for j in range(n_classes))


def _clamp(p: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=np.float64), CLAMP_EPS, 1.0 - CLAMP_EPS)


def semantic_loss(sentence: LogicalSentence, p: Sequence[float]) -> float:
    """Negative log probability that the sentence is satisfied under p.

    Summed over satisfying states in log space; nonnegative because the
    states are disjoint, so their Bernoulli mass never exceeds one.
    """
    pc = _clamp(p)
    states = np.asarray(satisfying_states(sentence, len(pc)), dtype=np.float64)
    log_like = states @ np.log(pc) + (1.0 - states) @ np.log1p(-pc)
    return max(0.0, float(-logsumexp(log_like)))


def semantic_loss_grad(sentence: LogicalSentence, p: Sequence[float]) -> np.ndarray:
    """Exact partial derivatives of :func:`semantic_loss` w.r.t. each p_j."""
    pc = _clamp(p)
    states = np.asarray(satisfying_states(sentence, len(pc)), dtype=np.float64)
    log_like = states @ np.log(pc) + (1.0 - states) @ np.log1p(-pc)
    weights = np.exp(log_like - logsumexp(log_like))  # per-state posterior mass
    return (1.0 - states).T @ weights / (1.0 - pc) - states.T @ weights / pc


def one_hot_loss(p: Sequence[float]) -> float:
    """Closed form of the exactly-one sentence loss."""
    pc = _clamp(p)
    loss, _ = _exactly_one_masked(pc[None, :], np.ones((1, len(pc)), dtype=bool))
    return float(loss[0])


def subset_loss(p: Sequence[float], subset: Sequence[int], inside: bool = True) -> float:
    """Closed form of the subset-membership sentence loss."""
    pc = _clamp(p)
    sentence = SubsetMembership(frozenset(subset), inside=inside)
    hot = sentence.effective_labels(len(pc))
    if not hot:
        raise UnsatisfiableSentenceError("effective subset is empty")
    mask = np.zeros((1, len(pc)), dtype=bool)
    mask[0, list(hot)] = True
    loss, _ = _exactly_one_masked(pc[None, :], mask)
    return float(loss[0])


def _exactly_one_masked(pc: np.ndarray, member_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Loss and d(loss)/dp for 'exactly one label, drawn from mask', rowwise.

    pc: (B, J) clamped probabilities; member_mask: (B, J) allowed hot labels.
    The satisfying mass of row b is sum_{j in mask} p_j prod_{i != j} (1-p_i),
    rewritten as exp(T) * sum exp(q_j) with T = sum log(1-p) and q the
    per-label log-odds, so a single logsumexp covers every row.
    """
    if not member_mask.any(axis=1).all():
        raise UnsatisfiableSentenceError("a row has an empty set of allowed labels")
    log1mp = np.log1p(-pc)
    t = log1mp.sum(axis=1)
    q = np.log(pc) - log1mp
    q_masked = np.where(member_mask, q, -np.inf)
    lse = logsumexp(q_masked, axis=1)
    loss = np.maximum(0.0, -(t + lse))
    weights = np.exp(q_masked - lse[:, None])
    grad = 1.0 / (1.0 - pc) - weights / (pc * (1.0 - pc))
    return loss, grad


def corrupt_truth_bits(
    bits: Sequence[bool], rate: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Flip a deterministic count round(rate*M) of bits chosen from seed.

    Returns (corrupted bits, sorted indices that were flipped). rate 0 leaves
    the input untouched, rate 1 flips everything; the flip count is exact, so
    a 10% rate on 1000 samples flips exactly 100 of them.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must be in [0, 1]")
    bits = np.asarray(bits, dtype=bool).copy()
    n_flips = int(round(rate * len(bits)))
    rng = np.random.default_rng(seed)
    flipped = np.sort(rng.choice(len(bits), size=n_flips, replace=False))
    bits[flipped] = ~bits[flipped]
    return bits, flipped


KNOWLEDGE_FAMILIES = ("one_hot", "subset")


@dataclass(frozen=True)
class KnowledgeSpec:
    """One injectable knowledge item: semantics, weight, and corruption.

    Subset knowledge is per-sample: each unlabeled sample carries a truth bit
    saying whether its label lies inside ``subset``; corruption flips a
    deterministic fraction of those bits. One-hot knowledge holds for every
    sample and has no bits to corrupt.
    """

    player: int
    name: str
    family: str
    subset: frozenset[int] | None = None
    weight: float = 0.1
    corruption_rate: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.player < 0:
            raise ValueError("player index must be nonnegative")
        if self.family not in KNOWLEDGE_FAMILIES:
            raise ValueError(f"family must be one of {KNOWLEDGE_FAMILIES}")
        if self.weight < 0:
            raise ValueError("weight must be nonnegative")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ValueError("corruption_rate must be in [0, 1]")
        if self.family == "subset":
            if not self.subset:
                raise ValueError("subset family needs a nonempty subset")
            object.__setattr__(self, "subset", frozenset(int(i) for i in self.subset))
        elif self.subset is not None:
            raise ValueError("one_hot knowledge takes no subset")

    def sentence(self, bit: bool = True) -> LogicalSentence:
        """The sentence this knowledge asserts for a sample with truth ``bit``."""
        if self.family == "one_hot":
            return ExactlyOne()
        return SubsetMembership(self.subset, inside=bool(bit))

    def to_dict(self) -> dict:
        payload = {
            "name": self.name,
            "family": self.family,
            "lambda": self.weight,
            "corruption_rate": self.corruption_rate,
            "seed": self.seed,
        }
        if self.subset is not None:
            payload["subset"] = sorted(self.subset)
        return payload

    @classmethod
    def from_dict(cls, payload: dict, player: int) -> "KnowledgeSpec":
        return cls(
            player=player,
            name=str(payload["name"]),
            family=str(payload["family"]),
            subset=frozenset(payload["subset"]) if "subset" in payload else None,
            weight=float(payload.get("lambda", 0.1)),
            corruption_rate=float(payload.get("corruption_rate", 0.0)),
            seed=int(payload.get("seed", 0)),
        )


def knowledge_set_from_json(text: str) -> tuple[KnowledgeSpec, ...]:
    """Parse a JSON list of knowledge-spec entries; player index by position."""
    payload = json.loads(text)
    specs = tuple(KnowledgeSpec.from_dict(entry, player=i) for i, entry in enumerate(payload))
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("knowledge names must be unique")
    return specs
