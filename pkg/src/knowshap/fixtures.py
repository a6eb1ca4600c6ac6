"""Embedded benchmark accuracy tables for the replay command and tests.

Raw test accuracies of a semi-supervised classifier under every combination
of three knowledge items, stored verbatim; tables are normalized to
improvement-over-baseline form when materialized.
"""

from __future__ import annotations

from .coalitions import Coalition, ValueTable

MNIST_PLAYERS = ("one_hot", "digit_in_0_3", "digit_in_0_6")

# players: 0 = one_hot, 1 = digit in [0,3], 2 = digit in [0,6]
MNIST_ACCURACY = {
    (): 0.8372,
    (0,): 0.8725,
    (1,): 0.9224,
    (2,): 0.9654,
    (0, 1): 0.9396,
    (0, 2): 0.9686,
    (1, 2): 0.9733,
    (0, 1, 2): 0.9775,
}

# same task, but 10% of the unlabeled samples carry a wrong digit_in_0_6 bit
MNIST_IMPERFECT_ACCURACY = {
    (): 0.8372,
    (0,): 0.8725,
    (1,): 0.9224,
    (2,): 0.9425,
    (0, 1): 0.9396,
    (0, 2): 0.9590,
    (1, 2): 0.9678,
    (0, 1, 2): 0.9687,
}

CIFAR10_PLAYERS = ("one_hot", "animal", "mammal")

CIFAR10_ACCURACY = {
    (): 0.7558,
    (0,): 0.7716,
    (1,): 0.7948,
    (2,): 0.8024,
    (0, 1): 0.7983,
    (0, 2): 0.8105,
    (1, 2): 0.8177,
    (0, 1, 2): 0.8208,
}

_TABLES = {
    "mnist": (MNIST_ACCURACY, MNIST_PLAYERS),
    "mnist-imperfect": (MNIST_IMPERFECT_ACCURACY, MNIST_PLAYERS),
    "cifar10": (CIFAR10_ACCURACY, CIFAR10_PLAYERS),
}

BENCHMARK_NAMES = tuple(_TABLES)


def benchmark_table(name: str) -> ValueTable:
    """A bundled benchmark as a normalized improvement table."""
    if name not in _TABLES:
        raise KeyError(f"unknown benchmark {name!r}; choose from {BENCHMARK_NAMES}")
    accuracies, players = _TABLES[name]
    raw = {Coalition.from_members(m, 3): v for m, v in accuracies.items()}
    return ValueTable.from_raw(3, raw, players=players)
