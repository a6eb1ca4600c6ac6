"""Shapley attribution of a coalition game: exact, permutation, and Monte-Carlo.

All three solvers agree on the same game: the exact solver averages weighted
marginal contributions over all subsets, the permutation solver averages
marginals over all N! orderings (an identity, used as a cross-check), and the
Monte-Carlo solver samples orderings uniformly with replacement. Sampling is
counter-based: the permutation of iteration i depends only on (seed, i), so
results never depend on scheduling or worker count.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Union

import numpy as np

from .coalitions import (
    Coalition,
    EnumerationTooLargeError,
    EvaluationCache,
    ValueTable,
)

MAX_PERMUTATION_PLAYERS = 10  # N! guard
_STOP_CHECK_EVERY = 64  # early-stop cadence, iterations

ValueFunction = Union[ValueTable, Mapping[Coalition, float], Callable[[Coalition], float]]


class FactorialTooLargeError(ValueError):
    """Raised when an N! permutation enumeration would be too large."""


class EvaluationFailedError(RuntimeError):
    """A coalition evaluation failed; carries partial diagnostics if any."""

    def __init__(self, message: str, diagnostics: "McDiagnostics | None" = None):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class Attribution:
    """Per-player Shapley values plus how they were computed."""

    phi: np.ndarray
    method: str  # "exact" | "permutation" | "monte_carlo"
    evaluations_used: int
    stderr: np.ndarray | None = None

    @property
    def n_players(self) -> int:
        return len(self.phi)

    def ranking(self) -> list[int]:
        """Player indices sorted by descending value; ties break ascending."""
        return sorted(range(len(self.phi)), key=lambda n: (-self.phi[n], n))


@dataclass(frozen=True)
class McConfig:
    """Monte-Carlo sampling budget: permutations drawn, seed, optional stop."""

    max_iter: int
    seed: int
    target_stderr: float | None = None

    def __post_init__(self) -> None:
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.target_stderr is not None and self.target_stderr <= 0:
            raise ValueError("target_stderr must be positive")


@dataclass
class McDiagnostics:
    iterations_run: int
    mean: np.ndarray
    variance: np.ndarray
    evaluations: int


class _ValueOracle:
    """Uniform front door to a value function: vectorized lookups by mask.

    Wraps a complete ValueTable (dense array fast path), a mapping, or a
    plain callable. Each distinct coalition is evaluated at most once;
    ``evaluations`` counts those distinct evaluations (cache misses when an
    EvaluationCache is attached).
    """

    def __init__(self, vf: ValueFunction, n_players: int, cache: EvaluationCache | None = None):
        self.n_players = n_players
        self._cache = cache
        self._memo: dict[int, float] = {}
        self._dense: np.ndarray | None = None
        self._touched: np.ndarray | None = None
        if isinstance(vf, ValueTable):
            if vf.n_players != n_players:
                raise ValueError("value table n_players mismatch")
            if vf.is_complete:
                self._dense = np.asarray(vf.dense_values(), dtype=np.float64)
                self._touched = np.zeros(len(self._dense), dtype=bool)
                self._call = None
            else:
                self._call = vf.value_function()
        elif isinstance(vf, Mapping):
            table = dict(vf)

            def from_mapping(coalition: Coalition) -> float:
                return table[coalition]

            self._call = from_mapping
        elif callable(vf):
            self._call = vf
        else:
            raise TypeError(f"unsupported value function type {type(vf)!r}")

    @property
    def evaluations(self) -> int:
        if self._touched is not None:
            return int(self._touched.sum())
        return len(self._memo)

    def _evaluate(self, mask: int) -> float:
        value = self._memo.get(mask)
        if value is None:
            coalition = Coalition(self.n_players, mask)
            if self._cache is not None:
                value = self._cache.get_or_compute(coalition, self._call)
            else:
                value = float(self._call(coalition))
            self._memo[mask] = value
        return value

    def values(self, masks: np.ndarray) -> np.ndarray:
        """Values for an array of bitmasks, evaluating misses in array order."""
        if self._dense is not None:
            self._touched[masks.ravel()] = True
            return self._dense[masks]
        flat = masks.ravel()
        out = np.empty(flat.shape, dtype=np.float64)
        for i, mask in enumerate(flat):
            out[i] = self._evaluate(int(mask))
        return out.reshape(masks.shape)


def improvement_value_function(
    metric: Callable[[Coalition], float], orientation: str = "higher_is_better"
) -> Callable[[Coalition], float]:
    """Turn a raw performance metric into an improvement game with V(empty)=0.

    higher_is_better: V(S) = metric(S) - metric(empty); lower_is_better
    flips the sign so that reducing a cost still counts as positive value.
    The empty coalition is pinned to exactly 0.0.
    """
    if orientation not in ("higher_is_better", "lower_is_better"):
        raise ValueError(f"unknown orientation {orientation!r}")
    sign = 1.0 if orientation == "higher_is_better" else -1.0
    state: dict[str, float] = {}

    def vf(coalition: Coalition) -> float:
        if "base" not in state:
            state["base"] = float(metric(Coalition.empty(coalition.n_players)))
        if coalition.mask == 0:
            return 0.0
        return sign * (float(metric(coalition)) - state["base"])

    return vf


def _check_exact_size(n_players: int) -> None:
    if n_players < 1:
        raise ValueError("need at least one player")
    if n_players > 30:
        raise EnumerationTooLargeError(
            f"exact Shapley over {n_players} players needs 2^{n_players} evaluations"
        )


def exact_shapley(
    vf: ValueFunction, n_players: int, cache: EvaluationCache | None = None
) -> Attribution:
    """Average weighted marginal contributions over every subset.

    phi[n] = (1/N) * sum over subsets S not containing n of
             (V(S + n) - V(S)) / C(N-1, |S|),
    using exactly 2^N distinct evaluations through the cache.
    """
    _check_exact_size(n_players)
    oracle = _ValueOracle(vf, n_players, cache)
    all_masks = np.arange(1 << n_players, dtype=np.int64)
    values = oracle.values(all_masks)
    sizes = np.bitwise_count(all_masks.astype(np.uint64)).astype(np.int64)
    inv_binom = np.array(
        [1.0 / math.comb(n_players - 1, k) for k in range(n_players)], dtype=np.float64
    )
    phi = np.empty(n_players, dtype=np.float64)
    for n in range(n_players):
        bit = 1 << n
        without = (all_masks & bit) == 0
        masks = all_masks[without]
        marginals = values[masks | bit] - values[masks]
        phi[n] = np.sum(marginals * inv_binom[sizes[without]]) / n_players
    return Attribution(phi=phi, method="exact", evaluations_used=oracle.evaluations)


def permutation_shapley(
    vf: ValueFunction, n_players: int, cache: EvaluationCache | None = None
) -> Attribution:
    """Average each player's marginal over all N! orderings (identity check).

    Equivalent to :func:`exact_shapley`; enumerating orderings is only
    feasible for small N, hence the factorial guard.
    """
    _check_exact_size(n_players)
    if n_players > MAX_PERMUTATION_PLAYERS:
        raise FactorialTooLargeError(
            f"refusing to enumerate {n_players}! permutations (cap {MAX_PERMUTATION_PLAYERS})"
        )
    oracle = _ValueOracle(vf, n_players, cache)
    oracle.values(np.arange(1 << n_players, dtype=np.int64))  # all 2^N, once

    phi_sum = np.zeros(n_players, dtype=np.float64)
    perm_iter = itertools.permutations(range(n_players))
    chunk_size = 40320  # stream permutations; keeps N=10 under control
    while True:
        chunk = list(itertools.islice(perm_iter, chunk_size))
        if not chunk:
            break
        perms = np.asarray(chunk, dtype=np.int64)
        marginals = _permutation_marginals(oracle, perms)
        phi_sum += np.bincount(
            perms.ravel(), weights=marginals.ravel(), minlength=n_players
        )
    phi = phi_sum / math.factorial(n_players)
    return Attribution(phi=phi, method="permutation", evaluations_used=oracle.evaluations)


def _permutation_marginals(oracle: _ValueOracle, perms: np.ndarray) -> np.ndarray:
    """Marginal contributions in permutation-position order, shape like perms.

    Bits of one permutation are disjoint, so a cumulative sum of 1<<player
    equals the cumulative union of predecessors plus the player itself.
    """
    bits = np.left_shift(np.int64(1), perms)
    with_player = np.cumsum(bits, axis=1)
    without_player = with_player - bits
    return oracle.values(with_player) - oracle.values(without_player)


# SplitMix64 mixing constants; arrays stay uint64 so arithmetic wraps mod 2^64.
_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_MUL2 = np.uint64(0x94D049BB133111EB)


def _mix64(x: np.ndarray) -> np.ndarray:
    z = (x + _SM_GAMMA).astype(np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _SM_MUL1
    z = (z ^ (z >> np.uint64(27))) * _SM_MUL2
    return z ^ (z >> np.uint64(31))


def _sample_permutations(seed: int, start: int, count: int, n_players: int) -> np.ndarray:
    """Uniform permutations for iterations [start, start+count).

    Iteration i's permutation is a pure function of (seed, i): rank N
    SplitMix64 keys derived from the per-iteration stream key. Collisions in
    64-bit keys are negligible; stable argsort keeps even that case
    deterministic.
    """
    seed_u = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    iters = np.arange(start, start + count, dtype=np.uint64)
    stream = _mix64(seed_u ^ _mix64(iters))
    lanes = np.arange(1, n_players + 1, dtype=np.uint64)
    keys = _mix64(stream[:, None] + lanes[None, :])
    return np.argsort(keys, axis=1, kind="stable").astype(np.int64)


def mc_shapley(
    vf: ValueFunction, n_players: int, cfg: McConfig, cache: EvaluationCache | None = None
) -> tuple[Attribution, McDiagnostics]:
    """Estimate Shapley values by sampling permutations with replacement.

    Each iteration draws one uniform permutation, accumulates every player's
    marginal contribution along it, and the estimate is the accumulator
    divided by the number of iterations. Reported standard error per player
    is the sample standard deviation of its marginals over sqrt(iterations).
    With target_stderr set, sampling stops early once every player's standard
    error is at or below the target, checked every 64 iterations.
    """
    _check_exact_size(n_players)
    oracle = _ValueOracle(vf, n_players, cache)
    total = np.zeros(n_players, dtype=np.float64)
    total_sq = np.zeros(n_players, dtype=np.float64)
    done = 0
    rows = None
    try:
        while done < cfg.max_iter:
            count = min(_STOP_CHECK_EVERY, cfg.max_iter - done)
            perms = _sample_permutations(cfg.seed, done, count, n_players)
            marginals = _permutation_marginals(oracle, perms)
            if rows is None or len(rows) != count:
                rows = np.arange(count)[:, None]
            by_player = np.empty_like(marginals)
            by_player[rows, perms] = marginals
            total += by_player.sum(axis=0)
            total_sq += (by_player * by_player).sum(axis=0)
            done += count
            if cfg.target_stderr is not None and done >= 2:
                if np.all(_stderr(total, total_sq, done) <= cfg.target_stderr):
                    break
    except Exception as exc:
        partial = _diagnostics(total, total_sq, done, oracle.evaluations)
        raise EvaluationFailedError(
            f"coalition evaluation failed after {done} iterations: {exc}", partial
        ) from exc

    diagnostics = _diagnostics(total, total_sq, done, oracle.evaluations)
    stderr = _stderr(total, total_sq, done)
    attribution = Attribution(
        phi=total / done,
        method="monte_carlo",
        evaluations_used=oracle.evaluations,
        stderr=stderr,
    )
    return attribution, diagnostics


def _variance(total: np.ndarray, total_sq: np.ndarray, count: int) -> np.ndarray:
    if count < 2:
        return np.zeros_like(total)
    mean = total / count
    return np.maximum(0.0, (total_sq - count * mean * mean) / (count - 1))


def _stderr(total: np.ndarray, total_sq: np.ndarray, count: int) -> np.ndarray:
    return np.sqrt(_variance(total, total_sq, count) / max(count, 1))


def _diagnostics(
    total: np.ndarray, total_sq: np.ndarray, count: int, evaluations: int
) -> McDiagnostics:
    mean = total / count if count else np.zeros_like(total)
    return McDiagnostics(
        iterations_run=count,
        mean=mean,
        variance=_variance(total, total_sq, count),
        evaluations=evaluations,
    )


@dataclass
class AxiomCheck:
    name: str
    checked: bool
    ok: bool
    detail: str

    def to_dict(self) -> dict:
        return {"name": self.name, "checked": self.checked, "ok": self.ok, "detail": self.detail}


@dataclass
class AxiomReport:
    """Efficiency, symmetry, and null-player diagnostics for an attribution.

    Checks that cannot hold for a sampled attribution (efficiency and
    symmetry under monte_carlo) are reported but not counted as violations.
    """

    efficiency_gap: float
    checks: list[AxiomCheck]
    symmetric_pairs: list[tuple[int, int]]
    null_players: list[int]

    @property
    def violations(self) -> list[str]:
        return [c.detail for c in self.checks if c.checked and not c.ok]

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "efficiency_gap": self.efficiency_gap,
            "symmetric_pairs": [list(p) for p in self.symmetric_pairs],
            "null_players": self.null_players,
            "checks": [c.to_dict() for c in self.checks],
            "violations": self.violations,
        }


EFFICIENCY_RTOL = 1e-9
SYMMETRY_ATOL = 1e-9
NULL_PLAYER_ATOL = 1e-12


def axiom_report(table: ValueTable, attribution: Attribution) -> AxiomReport:
    """Check the fairness axioms of an attribution against its complete game."""
    table.require_complete()
    n = table.n_players
    if attribution.n_players != n:
        raise ValueError("attribution size does not match table")
    values = np.asarray(table.dense_values())
    phi = attribution.phi
    exact_method = attribution.method in ("exact", "permutation")
    checks: list[AxiomCheck] = []

    grand = values[-1]
    gap = float(np.sum(phi) - grand)
    eff_ok = math.isclose(float(np.sum(phi)), float(grand), rel_tol=EFFICIENCY_RTOL, abs_tol=1e-12)
    checks.append(
        AxiomCheck(
            name="efficiency",
            checked=exact_method,
            ok=eff_ok,
            detail=f"sum(phi) - V(grand) = {gap:.3e}",
        )
    )

    masks = np.arange(1 << n, dtype=np.int64)
    symmetric_pairs: list[tuple[int, int]] = []
    for m in range(n):
        for k in range(m + 1, n):
            both = (1 << m) | (1 << k)
            rest = masks[(masks & both) == 0]
            if np.array_equal(values[rest | (1 << m)], values[rest | (1 << k)]):
                symmetric_pairs.append((m, k))
                pair_ok = abs(phi[m] - phi[k]) <= SYMMETRY_ATOL
                checks.append(
                    AxiomCheck(
                        name="symmetry",
                        checked=exact_method,
                        ok=pair_ok,
                        detail=f"players {m},{k}: |phi diff| = {abs(phi[m] - phi[k]):.3e}",
                    )
                )

    null_players: list[int] = []
    for m in range(n):
        bit = 1 << m
        rest = masks[(masks & bit) == 0]
        if np.array_equal(values[rest | bit], values[rest]):
            null_players.append(m)
            checks.append(
                AxiomCheck(
                    name="null_player",
                    checked=True,
                    ok=abs(phi[m]) <= NULL_PLAYER_ATOL,
                    detail=f"player {m}: |phi| = {abs(phi[m]):.3e}",
                )
            )

    return AxiomReport(
        efficiency_gap=gap,
        checks=checks,
        symmetric_pairs=symmetric_pairs,
        null_players=null_players,
    )
