"""Canonical coalitions of knowledge players, subset enumeration, and value caching.

A coalition is a subset of the N knowledge players, encoded as a bitmask so
that equal member sets are equal objects (and equal cache keys). A value
table maps coalitions to the performance improvement they bought; the empty
coalition is always present and worth exactly 0 (tables built from raw
metric numbers are normalized by subtracting the no-knowledge row).
"""

from __future__ import annotations

import csv
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Callable, Iterator, Mapping, Sequence

MAX_EXACT_PLAYERS = 30  # 2^N enumeration guard


class EnumerationTooLargeError(ValueError):
    """Raised when a 2^N enumeration would exceed the player cap."""


class TableFormatError(ValueError):
    """Raised when a value-table file violates the documented schema."""


@dataclass(frozen=True, order=True)
class Coalition:
    """An immutable subset of players 0..n_players-1, stored as a bitmask.

    Ordering (and therefore the deterministic enumeration order used
    everywhere) is ascending by canonical bitmask encoding.
    """

    n_players: int
    mask: int = 0

    def __post_init__(self) -> None:
        if self.n_players < 0:
            raise ValueError("n_players must be nonnegative")
        if not 0 <= self.mask < (1 << self.n_players):
            raise ValueError(
                f"coalition mask {self.mask:#x} out of range for {self.n_players} players"
            )

    @classmethod
    def from_members(cls, members: Sequence[int], n_players: int) -> "Coalition":
        """Build the canonical coalition containing ``members``.

        Order and duplicates in the input are irrelevant; any index outside
        [0, n_players) is rejected.
        """
        mask = 0
        for idx in members:
            if not 0 <= idx < n_players:
                raise ValueError(f"player index {idx} out of range [0, {n_players})")
            mask |= 1 << idx
        return cls(n_players, mask)

    @classmethod
    def empty(cls, n_players: int) -> "Coalition":
        return cls(n_players, 0)

    @classmethod
    def grand(cls, n_players: int) -> "Coalition":
        return cls(n_players, (1 << n_players) - 1)

    def members(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n_players) if self.mask >> i & 1)

    @property
    def size(self) -> int:
        return bin(self.mask).count("1")

    def __contains__(self, player: int) -> bool:
        return 0 <= player < self.n_players and bool(self.mask >> player & 1)

    def __iter__(self) -> Iterator[int]:
        return iter(self.members())

    def with_player(self, player: int) -> "Coalition":
        if not 0 <= player < self.n_players:
            raise ValueError(f"player index {player} out of range [0, {self.n_players})")
        return Coalition(self.n_players, self.mask | (1 << player))

    def without_player(self, player: int) -> "Coalition":
        return Coalition(self.n_players, self.mask & ~(1 << player))

    def __repr__(self) -> str:
        return f"Coalition({{{','.join(map(str, self.members()))}}}, n={self.n_players})"


def coalition_from_members(members: Sequence[int], n_players: int) -> Coalition:
    """Module-level alias for :meth:`Coalition.from_members`."""
    return Coalition.from_members(members, n_players)


def enumerate_all(n_players: int) -> Iterator[Coalition]:
    """All 2^N coalitions in ascending canonical order."""
    if n_players > MAX_EXACT_PLAYERS:
        raise EnumerationTooLargeError(
            f"refusing to enumerate 2^{n_players} subsets (cap {MAX_EXACT_PLAYERS})"
        )
    for mask in range(1 << n_players):
        yield Coalition(n_players, mask)


def enumerate_subsets_excluding(n_players: int, excluded: int) -> Iterator[Coalition]:
    """All 2^(N-1) subsets of the players other than ``excluded``, ascending.

    The compressed counter below preserves ascending mask order because the
    bit positions are expanded monotonically around the excluded bit.
    """
    if n_players > MAX_EXACT_PLAYERS:
        raise EnumerationTooLargeError(
            f"refusing to enumerate 2^{n_players - 1} subsets (cap {MAX_EXACT_PLAYERS})"
        )
    if not 0 <= excluded < n_players:
        raise ValueError(f"player index {excluded} out of range [0, {n_players})")
    low_mask = (1 << excluded) - 1
    for packed in range(1 << (n_players - 1)):
        low = packed & low_mask
        high = (packed >> excluded) << (excluded + 1)
        yield Coalition(n_players, low | high)


class EvaluationCache:
    """Memoizes coalition values with hit/miss counters and JSON persistence.

    Lookups are lock-protected; computing a value happens outside the lock,
    so two threads may compute the same coalition concurrently, but only one
    (identical, by the determinism contract) result is stored. Failed
    evaluations are never cached.
    """

    def __init__(self, path: str | Path | None = None):
        self._store: dict[Coalition, float] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.path = Path(path) if path is not None else None
        if self.path is not None and self.path.exists():
            self._load(self.path)

    def __len__(self) -> int:
        return len(self._store)

    def __contains__(self, coalition: Coalition) -> bool:
        with self._lock:
            return coalition in self._store

    def lookup(self, coalition: Coalition) -> float | None:
        with self._lock:
            if coalition in self._store:
                self.hits += 1
                return self._store[coalition]
            self.misses += 1
            return None

    def store(self, coalition: Coalition, value: float) -> float:
        with self._lock:
            return self._store.setdefault(coalition, float(value))

    def get_or_compute(self, coalition: Coalition, vf: Callable[[Coalition], float]) -> float:
        cached = self.lookup(coalition)
        if cached is not None:
            return cached
        value = float(vf(coalition))
        return self.store(coalition, value)

    def stats(self) -> dict[str, int]:
        with self._lock:
            return {"entries": len(self._store), "hits": self.hits, "misses": self.misses}

    def save(self, path: str | Path | None = None) -> Path:
        target = Path(path) if path is not None else self.path
        if target is None:
            raise ValueError("no persistence path configured")
        with self._lock:
            entries = [
                {"n_players": c.n_players, "mask": c.mask, "value": v}
                for c, v in sorted(self._store.items())
            ]
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = target.with_suffix(target.suffix + ".tmp")
        tmp.write_text(json.dumps({"entries": entries}, indent=2) + "\n")
        tmp.replace(target)
        return target

    def _load(self, path: Path) -> None:
        payload = json.loads(path.read_text())
        for row in payload["entries"]:
            coalition = Coalition(int(row["n_players"]), int(row["mask"]))
            self._store[coalition] = float(row["value"])


def cached_evaluate(
    vf: Callable[[Coalition], float], coalition: Coalition, cache: EvaluationCache
) -> float:
    """Evaluate ``vf`` through ``cache``: compute once, replay afterwards."""
    return cache.get_or_compute(coalition, vf)


@dataclass(frozen=True)
class ValueTable:
    """A (complete or partial) coalition game: coalition -> improvement value.

    Entries are normalized so the empty coalition is worth exactly 0; the raw
    no-knowledge metric that was subtracted is kept in ``baseline`` when the
    table came from raw numbers.
    """

    n_players: int
    entries: Mapping[Coalition, float]
    players: tuple[str, ...] | None = None
    baseline: float = 0.0

    def __post_init__(self) -> None:
        entries = dict(self.entries)
        empty = Coalition.empty(self.n_players)
        for coalition in entries:
            if coalition.n_players != self.n_players:
                raise ValueError("entry coalition does not match table n_players")
        if empty not in entries:
            raise ValueError("value table must contain the empty coalition")
        if entries[empty] != 0.0:
            raise ValueError(
                "empty coalition must be worth exactly 0; build raw tables via ValueTable.from_raw"
            )
        if self.players is not None and len(self.players) != self.n_players:
            raise ValueError("player name count does not match n_players")
        object.__setattr__(self, "entries", MappingProxyType(entries))

    @classmethod
    def from_raw(
        cls,
        n_players: int,
        raw: Mapping[Coalition, float],
        players: tuple[str, ...] | None = None,
        orientation: str = "higher_is_better",
    ) -> "ValueTable":
        """Normalize a raw metric table into an improvement table.

        higher_is_better: V(S) = raw(S) - raw(empty). lower_is_better flips
        the sign, so positive values always mean improvement.
        """
        if orientation not in ("higher_is_better", "lower_is_better"):
            raise ValueError(f"unknown orientation {orientation!r}")
        empty = Coalition.empty(n_players)
        if empty not in raw:
            raise ValueError("raw table must contain the empty coalition")
        base = float(raw[empty])
        sign = 1.0 if orientation == "higher_is_better" else -1.0
        entries = {c: (0.0 if c.mask == 0 else sign * (float(v) - base)) for c, v in raw.items()}
        return cls(n_players, entries, players=players, baseline=base)

    @property
    def is_complete(self) -> bool:
        return len(self.entries) == 1 << self.n_players

    def require_complete(self) -> None:
        if not self.is_complete:
            raise ValueError(
                f"value table is partial: {len(self.entries)} of {1 << self.n_players} entries"
            )

    def value(self, coalition: Coalition) -> float:
        return self.entries[coalition]

    @property
    def grand_value(self) -> float:
        return self.entries[Coalition.grand(self.n_players)]

    def value_function(self) -> Callable[[Coalition], float]:
        entries = self.entries

        def vf(coalition: Coalition) -> float:
            return entries[coalition]

        return vf

    def dense_values(self) -> "list[float]":
        """Values indexed by mask; only valid for complete tables."""
        self.require_complete()
        return [self.entries[Coalition(self.n_players, m)] for m in range(1 << self.n_players)]


def store_value_table(table: ValueTable, path: str | Path) -> Path:
    """Write a table as the documented JSON object (or CSV if path ends .csv)."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        lines = ["members,value"]
        for coalition in sorted(table.entries):
            members = ";".join(str(i) for i in coalition.members())
            lines.append(f"{members},{table.entries[coalition]!r}")
        path.write_text("\n".join(lines) + "\n")
        return path
    payload = {
        "n_players": table.n_players,
        "players": list(table.players) if table.players is not None else None,
        "entries": [
            {"members": list(c.members()), "value": table.entries[c]}
            for c in sorted(table.entries)
        ],
    }
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def load_value_table(path: str | Path) -> ValueTable:
    """Load a JSON or CSV value table, normalizing the empty-coalition row to 0.

    Raises TableFormatError for malformed files, duplicate coalition rows, or
    a missing empty-coalition entry.
    """
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _load_csv(path)
    return _load_json(path)


def _load_json(path: Path) -> ValueTable:
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise TableFormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(payload, dict) or "n_players" not in payload or "entries" not in payload:
        raise TableFormatError(f"{path}: expected object with n_players and entries")
    n_players = payload["n_players"]
    if not isinstance(n_players, int) or n_players < 1:
        raise TableFormatError(f"{path}: n_players must be a positive integer")
    players = payload.get("players")
    if players is not None:
        players = tuple(str(p) for p in players)
        if len(players) != n_players:
            raise TableFormatError(f"{path}: players list does not match n_players")
    raw: dict[Coalition, float] = {}
    for row in payload["entries"]:
        try:
            coalition = Coalition.from_members([int(i) for i in row["members"]], n_players)
            value = float(row["value"])
        except (KeyError, TypeError, ValueError) as exc:
            raise TableFormatError(f"{path}: bad entry {row!r} ({exc})") from exc
        if coalition in raw:
            raise TableFormatError(f"{path}: duplicate coalition {coalition!r}")
        raw[coalition] = value
    return _finish_load(path, n_players, raw, players)


def _load_csv(path: Path) -> ValueTable:
    with path.open(newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise TableFormatError(f"{path}: empty file") from None
        if [h.strip().lower() for h in header] != ["members", "value"]:
            raise TableFormatError(f"{path}: expected header 'members,value'")
        rows: list[tuple[tuple[int, ...], float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise TableFormatError(f"{path}:{lineno}: expected two columns")
            members_field, value_field = row
            try:
                members = tuple(
                    int(tok) for tok in members_field.split(";") if tok.strip() != ""
                )
                value = float(value_field)
            except ValueError as exc:
                raise TableFormatError(f"{path}:{lineno}: bad row ({exc})") from exc
            rows.append((members, value))
    if not rows:
        raise TableFormatError(f"{path}: no data rows")
    n_players = max((max(m) + 1 for m, _ in rows if m), default=0)
    if n_players < 1:
        raise TableFormatError(f"{path}: no player indices found")
    raw: dict[Coalition, float] = {}
    for members, value in rows:
        try:
            coalition = Coalition.from_members(members, n_players)
        except ValueError as exc:
            raise TableFormatError(f"{path}: bad members {members!r} ({exc})") from exc
        if coalition in raw:
            raise TableFormatError(f"{path}: duplicate coalition {coalition!r}")
        raw[coalition] = value
    return _finish_load(path, n_players, raw, None)


def _finish_load(
    path: Path,
    n_players: int,
    raw: dict[Coalition, float],
    players: tuple[str, ...] | None,
) -> ValueTable:
    empty = Coalition.empty(n_players)
    if empty not in raw:
        raise TableFormatError(f"{path}: missing empty-coalition entry")
    return ValueTable.from_raw(n_players, raw, players=players)
