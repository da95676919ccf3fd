"""The factor library: correlation-constrained admission, one-for-one
replacement, a pairwise correlation cache and TSV persistence.

Mutation follows a decide-then-apply protocol. ``check_admission`` is a pure
function of the candidate and a library snapshot and stamps its decision
with the library version; ``apply`` refuses a decision whose stamp is stale.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Optional, Union

from .dsl import Expr, format_expr, parse
from .errors import ConflictError, DataError, IntegrityError, ParseError
from .metrics import FactorStats, factor_corr, factor_stats
from .panel import Panel, SignalMatrix, forward_return


@dataclass(frozen=True)
class AdmissionThresholds:
    """IC floor, redundancy ceiling and the replacement rule constants."""

    tau_ic: float = 0.04
    theta: float = 0.5
    repl_ic_floor: float = 0.10
    repl_ratio: float = 1.3

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ValueError(f"theta must lie in (0, 1), got {self.theta}")
        if not self.tau_ic > 0.0:
            raise ValueError(f"tau_ic must be positive, got {self.tau_ic}")
        if not self.repl_ratio > 1.0:
            raise ValueError(f"repl_ratio must exceed 1, got {self.repl_ratio}")


@dataclass(frozen=True, eq=False)
class Candidate:
    """An evaluated expression awaiting a library decision.

    ``correlations`` optionally carries precomputed signed correlations keyed
    by library id, so a decision does not need to recompute them.
    """

    name: str
    expr: Expr
    stats: FactorStats
    signal: SignalMatrix
    correlations: Optional[Mapping[int, float]] = None

    @property
    def formula(self) -> str:
        return format_expr(self.expr)

    @property
    def fitness(self) -> float:
        return self.stats.fitness


@dataclass(frozen=True, eq=False)
class LibraryEntry:
    id: int
    name: str
    expr: Expr
    stats: FactorStats
    signal: SignalMatrix

    @property
    def formula(self) -> str:
        return format_expr(self.expr)

    @property
    def fitness(self) -> float:
        return self.stats.fitness


class DecisionKind(str, enum.Enum):
    ADMIT = "admit"
    REPLACE = "replace"
    REJECT_IC = "reject_ic"
    REJECT_CORR = "reject_corr"


@dataclass(frozen=True)
class Decision:
    kind: DecisionKind
    version: int
    max_corr: float = 0.0
    max_corr_id: Optional[int] = None
    victim: Optional[int] = None
    blocking: tuple[int, ...] = ()

    @property
    def accepted(self) -> bool:
        return self.kind in (DecisionKind.ADMIT, DecisionKind.REPLACE)


class FactorLibrary:
    """Ordered admitted factors with cached signals and pairwise correlations.

    Invariant: every pairwise |correlation| is below ``thresholds.theta``.
    Ids increase monotonically and are never reused.
    """

    def __init__(self, thresholds: AdmissionThresholds | None = None):
        self.thresholds = thresholds or AdmissionThresholds()
        self._entries: dict[int, LibraryEntry] = {}
        self._corr: dict[tuple[int, int], float] = {}
        self.next_id = 1
        self.version = 0

    # ---- read access
    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[LibraryEntry]:
        return iter(self._entries.values())

    def __contains__(self, entry_id: object) -> bool:
        return entry_id in self._entries

    def __getitem__(self, entry_id: int) -> LibraryEntry:
        return self._entries[entry_id]

    @property
    def ids(self) -> list[int]:
        return list(self._entries)

    @property
    def entries(self) -> list[LibraryEntry]:
        return list(self._entries.values())

    def total_fitness(self) -> float:
        return float(sum(e.fitness for e in self._entries.values()))

    def pair_corr(self, a: int, b: int) -> float:
        return self._corr[(a, b) if a < b else (b, a)]

    def pair_correlations(self) -> dict[tuple[int, int], float]:
        return dict(self._corr)

    # ---- correlation against the library
    def correlations(self, signal: SignalMatrix) -> dict[int, float]:
        """Signed correlation of ``signal`` with every entry, by id."""
        return {i: self._corr_with(signal, e) for i, e in self._entries.items()}

    def max_corr(self, signal: SignalMatrix) -> tuple[Optional[int], float]:
        return _argmax_abs(self.correlations(signal))

    def _corr_with(self, signal: SignalMatrix, entry: LibraryEntry) -> float:
        if entry.signal.shape != signal.shape:
            raise ValueError(f"signal shape {signal.shape} does not match library shape {entry.signal.shape}")
        try:
            return factor_corr(signal, entry.signal)
        except DataError:
            return 0.0

    def _candidate_corrs(self, cand: Candidate) -> dict[int, float]:
        """Precomputed correlations where supplied, fresh ones for the rest."""
        known = cand.correlations or {}
        return {
            i: float(known[i]) if i in known else self._corr_with(cand.signal, e)
            for i, e in self._entries.items()
        }

    # ---- decisions
    def check_admission(self, cand: Candidate, th: AdmissionThresholds | None = None) -> Decision:
        th = th or self.thresholds
        fit = cand.fitness
        corrs = self._candidate_corrs(cand)
        best_id, best = _argmax_abs(corrs)
        if not fit >= th.tau_ic:
            return Decision(DecisionKind.REJECT_IC, self.version, best, best_id)
        violators = tuple(sorted(i for i, r in corrs.items() if abs(r) >= th.theta))
        if not violators:
            return Decision(DecisionKind.ADMIT, self.version, best, best_id)
        if len(violators) == 1:
            g = self._entries[violators[0]]
            if fit >= th.repl_ic_floor and fit >= th.repl_ratio * g.fitness:
                return Decision(DecisionKind.REPLACE, self.version, best, best_id, victim=g.id, blocking=violators)
        return Decision(DecisionKind.REJECT_CORR, self.version, best, best_id, blocking=violators)

    def apply(self, decision: Decision, cand: Candidate) -> Optional[int]:
        """Carry out ``decision``; returns the new entry id, or None on reject."""
        if decision.version != self.version:
            raise ConflictError(
                f"decision made at library version {decision.version}, library is now at {self.version}"
            )
        if not decision.accepted:
            return None
        corrs = self._candidate_corrs(cand)
        if decision.kind is DecisionKind.REPLACE:
            self._remove(decision.victim)
            corrs.pop(decision.victim, None)
        new_id = self._append(cand.name, cand.expr, cand.stats, cand.signal, corrs)
        self.verify(recompute=False)
        return new_id

    # ---- mutation internals
    def _append(self, name, expr, stats, signal, corrs: Mapping[int, float]) -> int:
        new_id = self.next_id
        self.next_id += 1
        for other in self._entries:
            self._corr[(other, new_id)] = float(corrs[other])
        self._entries[new_id] = LibraryEntry(new_id, name, expr, stats, signal)
        self.version += 1
        return new_id

    def _remove(self, entry_id: int) -> None:
        del self._entries[entry_id]
        self._corr = {k: v for k, v in self._corr.items() if entry_id not in k}
        self.version += 1

    def verify(self, recompute: bool = True) -> None:
        """Raise IntegrityError if any pair violates the redundancy ceiling.

        With ``recompute`` the correlations are rebuilt from cached signals
        rather than read from the cache.
        """
        ids = self.ids
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                if recompute:
                    try:
                        r = factor_corr(self._entries[a].signal, self._entries[b].signal)
                    except DataError:
                        r = 0.0
                else:
                    r = self._corr[(a, b)]
                if abs(r) >= self.thresholds.theta:
                    raise IntegrityError(
                        f"entries {a} and {b} have |corr| {abs(r):.6f} >= theta {self.thresholds.theta}"
                    )

    # ---- persistence
    def save(self, path: Union[str, Path]) -> None:
        save(self, path)


def _argmax_abs(corrs: Mapping[int, float]) -> tuple[Optional[int], float]:
    best_id, best = None, 0.0
    for i, r in corrs.items():
        if best_id is None or abs(r) > best:
            best_id, best = i, abs(r)
    return best_id, float(best)


def max_corr(signal: SignalMatrix, lib: FactorLibrary) -> tuple[Optional[int], float]:
    """The entry with largest |correlation| to ``signal`` and that value."""
    return lib.max_corr(signal)


def check_admission(cand: Candidate, lib: FactorLibrary, th: AdmissionThresholds | None = None) -> Decision:
    return lib.check_admission(cand, th)


def apply(decision: Decision, cand: Candidate, lib: FactorLibrary) -> FactorLibrary:
    lib.apply(decision, cand)
    return lib


# ---------------------------------------------------------------- TSV files

NEXT_ID_TAG = "# next_id"


def save(lib: FactorLibrary, path: Union[str, Path]) -> None:
    """Write ``id<TAB>name<TAB>formula`` per entry plus a next-id comment."""
    lines = [f"{NEXT_ID_TAG}\t{lib.next_id}"]
    for e in lib:
        if "\t" in e.name or "\n" in e.name:
            raise ValueError(f"entry name {e.name!r} contains a tab or newline")
        lines.append(f"{e.id:03d}\t{e.name}\t{e.formula}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load(
    path: Union[str, Path],
    panel: Panel,
    target: SignalMatrix | None = None,
    thresholds: AdmissionThresholds | None = None,
    backend: str = "optimized",
) -> FactorLibrary:
    """Read a TSV library, re-evaluate every formula on ``panel`` and verify
    the pairwise constraint from the fresh signals."""
    from .kernels import evaluate

    target = forward_return(panel) if target is None else target
    lib = FactorLibrary(thresholds)
    rows = []
    next_id = None
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        if raw.startswith("#"):
            parts = raw.split("\t")
            if parts[0] == NEXT_ID_TAG and len(parts) == 2:
                next_id = int(parts[1])
            continue
        parts = raw.split("\t")
        if len(parts) != 3:
            raise ParseError(f"line {lineno}: expected 3 tab-separated columns, found {len(parts)}", 0, raw)
        try:
            entry_id = int(parts[0])
        except ValueError:
            raise ParseError(f"line {lineno}: bad id {parts[0]!r}", 0, raw) from None
        try:
            expr = parse(parts[2])
        except ParseError as exc:
            raise ParseError(f"line {lineno}: {exc.args[0]}", exc.offset, parts[2]) from None
        rows.append((lineno, entry_id, parts[1], expr))
    seen = set()
    for lineno, entry_id, name, expr in rows:
        if entry_id in seen:
            raise IntegrityError(f"line {lineno}: duplicate id {entry_id}")
        seen.add(entry_id)
        signal = evaluate(expr, panel, backend)
        stats = factor_stats(signal, target)
        corrs = lib.correlations(signal)
        entry = LibraryEntry(entry_id, name, expr, stats, signal)
        for other, r in corrs.items():
            if abs(r) >= lib.thresholds.theta:
                raise IntegrityError(
                    f"line {lineno}: entries {other} and {entry_id} have |corr| {abs(r):.6f} >= theta {lib.thresholds.theta}"
                )
            lib._corr[(other, entry_id) if other < entry_id else (entry_id, other)] = r
        lib._entries[entry_id] = entry
    top = max(seen, default=0) + 1
    lib.next_id = max(top, next_id or 0)
    return lib

