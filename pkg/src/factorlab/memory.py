"""Experience memory: per-signature evidence distilled from mining runs, split
into recommended patterns (sampling bias) and forbidden patterns (hard
filters).

The update cycle is ``evolve(memory, form(records))``. ``form`` turns a
batch of trajectory records into a count delta; ``evolve`` merges it and
reclassifies signatures by fixed threshold rules; ``retrieve`` exports the
weights and filters that steer the next batch.
"""

from __future__ import annotations

import copy
import enum
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Mapping, Optional, Sequence, Union

from .dsl import PatternSignature, parse, signature
from .errors import DataError

if TYPE_CHECKING:
    from .library import FactorLibrary


class Outcome(str, enum.Enum):
    ADMITTED = "admitted"
    REPLACED_IN = "replaced_in"
    REJECTED_IC = "rejected_ic"
    REJECTED_CORR = "rejected_corr"
    REJECTED_DUP = "rejected_dup"

    @property
    def success(self) -> bool:
        return self in (Outcome.ADMITTED, Outcome.REPLACED_IN)


@dataclass(frozen=True)
class TrajectoryRecord:
    """One candidate's path through the screening stages."""

    formula: str
    signature: PatternSignature
    fitness: float
    icir: float
    max_corr: float
    blocking_ids: tuple[int, ...]
    outcome: Outcome
    batch: int
    stage: str
    name: str = ""
    entry_id: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "outcome", Outcome(self.outcome))
        object.__setattr__(self, "blocking_ids", tuple(int(i) for i in self.blocking_ids))
        if self.outcome is Outcome.REJECTED_CORR and not self.blocking_ids:
            raise ValueError("a correlation rejection must name its blocking ids")

    def to_dict(self) -> dict:
        return {
            "batch": self.batch,
            "name": self.name,
            "formula": self.formula,
            "signature": self.signature.key,
            "fitness": self.fitness,
            "icir": self.icir,
            "max_corr": self.max_corr,
            "blocking_ids": list(self.blocking_ids),
            "outcome": self.outcome.value,
            "stage": self.stage,
            "entry_id": self.entry_id,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrajectoryRecord":
        return cls(
            formula=d["formula"],
            signature=PatternSignature.from_key(d["signature"]),
            fitness=float(d["fitness"]),
            icir=float(d["icir"]),
            max_corr=float(d["max_corr"]),
            blocking_ids=tuple(d.get("blocking_ids", ())),
            outcome=Outcome(d["outcome"]),
            batch=int(d["batch"]),
            stage=str(d["stage"]),
            name=d.get("name", ""),
            entry_id=d.get("entry_id"),
        )


# ------------------------------------------------------------------ content


@dataclass
class SignatureTally:
    attempts: int = 0
    successes: int = 0
    corr_rejections: int = 0
    ic_rejections: int = 0

    @property
    def success_rate(self) -> float:
        return self.successes / self.attempts if self.attempts else 0.0


@dataclass
class RecommendedEntry:
    signature: PatternSignature
    description: str = ""
    successes: int = 0
    attempts: int = 0
    name: str = ""
    example: str = ""


@dataclass
class ForbiddenEntry:
    signature: PatternSignature
    correlated_ids: tuple[int, ...] = ()
    rho: float = 0.0
    rejections: int = 0
    name: str = ""
    example: str = ""


@dataclass
class MemoryState:
    library_size: int = 0
    batches_run: int = 0
    signatures: dict[str, SignatureTally] = field(default_factory=dict)
    recent_blocks: list[tuple[str, tuple[int, ...], float]] = field(default_factory=list)


@dataclass
class ExperienceMemory:
    state: MemoryState = field(default_factory=MemoryState)
    recommended: list[RecommendedEntry] = field(default_factory=list)
    forbidden: list[ForbiddenEntry] = field(default_factory=list)
    insights: list[str] = field(default_factory=list)

    def recommended_keys(self) -> list[str]:
        return [e.signature.key for e in self.recommended]

    def forbidden_keys(self) -> list[str]:
        return [e.signature.key for e in self.forbidden]

    def check(self) -> None:
        """Raise DataError if an invariant is broken."""
        rec = self.recommended_keys()
        forb = self.forbidden_keys()
        if len(set(rec)) != len(rec) or len(set(forb)) != len(forb):
            raise DataError("memory lists a signature twice in the same section")
        both = set(rec) & set(forb)
        if both:
            raise DataError(f"signature both recommended and forbidden: {sorted(both)[0]}")
        for e in self.recommended:
            if e.successes < 0 or e.attempts < 0 or e.successes > e.attempts:
                raise DataError(f"bad counts for recommended {e.signature.key}")
        for e in self.forbidden:
            if e.rejections < 0:
                raise DataError(f"bad counts for forbidden {e.signature.key}")


@dataclass(frozen=True)
class MemoryPolicy:
    """Thresholds of the evolution rules."""

    f_min: int = 3
    forbid_max_rate: float = 0.10
    prune_min_attempts: int = 10
    prune_max_rate: float = 0.05
    recent_blocks: int = 20


# -------------------------------------------------------------------- deltas


@dataclass
class SignatureDelta:
    attempts: int = 0
    successes: int = 0
    corr_rejections: int = 0
    ic_rejections: int = 0
    blocking_ids: set = field(default_factory=set)
    rho: float = 0.0
    example: str = ""


@dataclass
class MemoryDelta:
    signatures: dict[str, SignatureDelta] = field(default_factory=dict)
    blocks: list[tuple[str, tuple[int, ...], float]] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.signatures)


def form(trajectory: Iterable[TrajectoryRecord]) -> MemoryDelta:
    """Count successes, correlation rejections and attempts per signature."""
    delta = MemoryDelta()
    for rec in trajectory:
        key = rec.signature.key
        d = delta.signatures.setdefault(key, SignatureDelta(example=rec.formula))
        d.attempts += 1
        if rec.outcome.success:
            d.successes += 1
        elif rec.outcome is Outcome.REJECTED_CORR:
            d.corr_rejections += 1
            d.blocking_ids.update(rec.blocking_ids)
            d.rho = max(d.rho, float(rec.max_corr))
            delta.blocks.append((key, rec.blocking_ids, float(rec.max_corr)))
        elif rec.outcome is Outcome.REJECTED_IC:
            d.ic_rejections += 1
    return delta


def evolve(
    memory: ExperienceMemory,
    delta: MemoryDelta,
    policy: MemoryPolicy | None = None,
    library_size: Optional[int] = None,
) -> ExperienceMemory:
    """Merge ``delta`` into a copy of ``memory`` and reclassify signatures.

    Rules, applied per touched signature in sorted key order:
    a success moves it out of forbidden and into recommended; otherwise
    ``f_min`` or more correlation rejections with an admission rate below
    ``forbid_max_rate`` move it to forbidden. Recommended entries with at
    least ``prune_min_attempts`` attempts and a success rate below
    ``prune_max_rate`` are dropped.
    """
    policy = policy or MemoryPolicy()
    mem = copy.deepcopy(memory)
    st = mem.state
    rec_by_key = {e.signature.key: e for e in mem.recommended}
    forb_by_key = {e.signature.key: e for e in mem.forbidden}

    for key in sorted(delta.signatures):
        d = delta.signatures[key]
        tally = st.signatures.get(key)
        if tally is None:
            seed = rec_by_key.get(key)
            tally = SignatureTally(seed.attempts, seed.successes) if seed else SignatureTally()
            st.signatures[key] = tally
        tally.attempts += d.attempts
        tally.successes += d.successes
        tally.corr_rejections += d.corr_rejections
        tally.ic_rejections += d.ic_rejections
        sig = PatternSignature.from_key(key)

        if key in rec_by_key:
            rec_by_key[key].attempts += d.attempts
            rec_by_key[key].successes += d.successes
        if d.successes > 0:
            old = forb_by_key.pop(key, None)
            if key not in rec_by_key:
                rec_by_key[key] = RecommendedEntry(
                    sig, successes=tally.successes, attempts=tally.attempts,
                    name=old.name if old else "", example=d.example,
                )
            continue
        if key in forb_by_key:
            f = forb_by_key[key]
            f.rejections += d.corr_rejections
            f.correlated_ids = tuple(sorted(set(f.correlated_ids) | d.blocking_ids))
            f.rho = max(f.rho, d.rho)
            continue
        if tally.corr_rejections >= policy.f_min and tally.success_rate < policy.forbid_max_rate:
            old = rec_by_key.pop(key, None)
            forb_by_key[key] = ForbiddenEntry(
                sig,
                correlated_ids=tuple(sorted(d.blocking_ids)),
                rho=d.rho,
                rejections=tally.corr_rejections,
                name=old.name if old else "",
                example=d.example,
            )

    for key in list(rec_by_key):
        e = rec_by_key[key]
        if e.attempts >= policy.prune_min_attempts and e.successes / e.attempts < policy.prune_max_rate:
            del rec_by_key[key]

    # keep prior ordering, append newcomers in key order
    mem.recommended = _ordered(memory.recommended, rec_by_key)
    mem.forbidden = _ordered(memory.forbidden, forb_by_key)
    st.batches_run += 1
    if library_size is not None:
        st.library_size = int(library_size)
    st.recent_blocks = (st.recent_blocks + list(delta.blocks))[-policy.recent_blocks:] if policy.recent_blocks else []
    mem.check()
    return mem


def _ordered(previous: Sequence, by_key: Mapping[str, Any]) -> list:
    prev_keys = [e.signature.key for e in previous]
    kept = [by_key[k] for k in prev_keys if k in by_key]
    fresh = [by_key[k] for k in sorted(by_key) if k not in set(prev_keys)]
    return kept + fresh


# ----------------------------------------------------------------- retrieval


@dataclass(frozen=True)
class WeightedSignature:
    signature: PatternSignature
    weight: float
    description: str = ""


@dataclass(frozen=True)
class ForbiddenFilter:
    signature: PatternSignature
    reason: str = ""


@dataclass(frozen=True)
class MemorySignal:
    """What the samplers see: weighted recommendations, hard filters and a
    summary of the library."""

    recommended: tuple[WeightedSignature, ...] = ()
    forbidden: tuple[ForbiddenFilter, ...] = ()
    library_size: int = 0
    saturation: tuple[tuple[str, int], ...] = ()
    recent_blocks: tuple[tuple[str, tuple[int, ...], float], ...] = ()
    insights: tuple[str, ...] = ()

    def __post_init__(self):
        for w in self.recommended:
            if not (w.weight > 0 and w.weight < float("inf")):
                raise ValueError(f"weight for {w.signature.key} must be positive and finite")

    @property
    def is_empty(self) -> bool:
        return not self.recommended and not self.forbidden

    def forbidden_keys(self) -> frozenset[str]:
        return frozenset(f.signature.key for f in self.forbidden)

    def forbids(self, sig: PatternSignature) -> bool:
        return sig.key in self.forbidden_keys()

    def to_wire(self) -> dict:
        return {
            "recommended": [
                {"signature": w.signature.key, "weight": w.weight, "description": w.description}
                for w in self.recommended
            ],
            "forbidden": [{"signature": f.signature.key, "reason": f.reason} for f in self.forbidden],
            "library": {"size": self.library_size, "saturation": dict(self.saturation)},
        }


EMPTY_SIGNAL = MemorySignal()


def retrieval_weight(successes: int, attempts: int) -> float:
    return (successes + 1.0) / (attempts + 2.0)


def retrieve(memory: ExperienceMemory, lib: Optional["FactorLibrary"] = None) -> MemorySignal:
    """Weighted recommendations, forbidden filters and library saturation."""
    rec = tuple(
        WeightedSignature(e.signature, retrieval_weight(e.successes, e.attempts), e.description or e.name)
        for e in memory.recommended
    )
    forb = tuple(
        ForbiddenFilter(
            e.signature,
            f"{e.name + ': ' if e.name else ''}|corr| {e.rho:.2f} with {', '.join(f'{i:03d}' for i in e.correlated_ids) or 'library'}",
        )
        for e in memory.forbidden
    )
    sat: dict[str, int] = {}
    size = 0
    if lib is not None:
        for entry in lib:
            k = signature(entry.expr).key
            sat[k] = sat.get(k, 0) + 1
            size += 1
    return MemorySignal(
        recommended=rec,
        forbidden=forb,
        library_size=size,
        saturation=tuple(sorted(sat.items())),
        recent_blocks=tuple(memory.state.recent_blocks),
        insights=tuple(memory.insights),
    )


# --------------------------------------------------------------- persistence


def to_json(memory: ExperienceMemory) -> dict:
    st = memory.state
    return {
        "state": {
            "library_size": st.library_size,
            "batches_run": st.batches_run,
            "signatures": {
                k: {
                    "attempts": t.attempts,
                    "successes": t.successes,
                    "corr_rejections": t.corr_rejections,
                    "ic_rejections": t.ic_rejections,
                }
                for k, t in sorted(st.signatures.items())
            },
            "recent_blocks": [
                {"signature": k, "blocking_ids": list(ids), "rho": rho} for k, ids, rho in st.recent_blocks
            ],
        },
        "recommended": [
            {
                "signature": e.signature.key,
                "name": e.name,
                "description": e.description,
                "example": e.example,
                "successes": e.successes,
                "attempts": e.attempts,
            }
            for e in memory.recommended
        ],
        "forbidden": [
            {
                "signature": e.signature.key,
                "name": e.name,
                "example": e.example,
                "correlated_ids": list(e.correlated_ids),
                "rho": e.rho,
                "rejections": e.rejections,
            }
            for e in memory.forbidden
        ],
        "insights": list(memory.insights),
    }


def _get(d: Any, key: str, kind, path: str, default: Any = ...):
    if not isinstance(d, dict):
        raise DataError(f"{path}: expected an object")
    if key not in d:
        if default is ...:
            raise DataError(f"{path}.{key}: missing")
        return default
    v = d[key]
    ok = isinstance(v, kind) and not (kind in (int, (int, float)) and isinstance(v, bool))
    if not ok:
        raise DataError(f"{path}.{key}: expected {getattr(kind, '__name__', 'number')}, got {type(v).__name__}")
    return v


def _sig(text: Any, path: str) -> PatternSignature:
    if not isinstance(text, str):
        raise DataError(f"{path}: expected a signature string")
    try:
        return PatternSignature.from_key(text)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def from_json(doc: Any) -> ExperienceMemory:
    """Build memory from a parsed document; errors name the offending key."""
    num = (int, float)
    st_doc = _get(doc, "state", dict, "$")
    sigs = {}
    for k, t in _get(st_doc, "signatures", dict, "$.state", {}).items():
        p = f"$.state.signatures[{k!r}]"
        _sig(k, p)
        sigs[k] = SignatureTally(
            _get(t, "attempts", int, p), _get(t, "successes", int, p),
            _get(t, "corr_rejections", int, p, 0), _get(t, "ic_rejections", int, p, 0),
        )
    blocks = []
    for i, b in enumerate(_get(st_doc, "recent_blocks", list, "$.state", [])):
        p = f"$.state.recent_blocks[{i}]"
        _sig(_get(b, "signature", str, p), p + ".signature")
        blocks.append((b["signature"], tuple(_get(b, "blocking_ids", list, p)), float(_get(b, "rho", num, p))))
    state = MemoryState(
        library_size=_get(st_doc, "library_size", int, "$.state", 0),
        batches_run=_get(st_doc, "batches_run", int, "$.state", 0),
        signatures=sigs,
        recent_blocks=blocks,
    )
    rec = []
    for i, e in enumerate(_get(doc, "recommended", list, "$")):
        p = f"$.recommended[{i}]"
        rec.append(RecommendedEntry(
            _sig(_get(e, "signature", str, p), p + ".signature"),
            description=_get(e, "description", str, p, ""),
            successes=_get(e, "successes", int, p),
            attempts=_get(e, "attempts", int, p),
            name=_get(e, "name", str, p, ""),
            example=_get(e, "example", str, p, ""),
        ))
    forb = []
    for i, e in enumerate(_get(doc, "forbidden", list, "$")):
        p = f"$.forbidden[{i}]"
        ids = _get(e, "correlated_ids", list, p, [])
        if not all(isinstance(x, int) and not isinstance(x, bool) for x in ids):
            raise DataError(f"{p}.correlated_ids: expected integers")
        forb.append(ForbiddenEntry(
            _sig(_get(e, "signature", str, p), p + ".signature"),
            correlated_ids=tuple(ids),
            rho=float(_get(e, "rho", num, p, 0.0)),
            rejections=_get(e, "rejections", int, p, 0),
            name=_get(e, "name", str, p, ""),
            example=_get(e, "example", str, p, ""),
        ))
    insights = _get(doc, "insights", list, "$", [])
    if not all(isinstance(s, str) for s in insights):
        raise DataError("$.insights: expected a list of strings")
    mem = ExperienceMemory(state, rec, forb, list(insights))
    mem.check()
    return mem


def dumps(memory: ExperienceMemory) -> str:
    return json.dumps(to_json(memory), indent=2, sort_keys=False) + "\n"


def save(memory: ExperienceMemory, path: Union[str, Path]) -> None:
    Path(path).write_text(dumps(memory), encoding="utf-8")


def load(path: Union[str, Path]) -> ExperienceMemory:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from None
    return from_json(doc)


def load_seed() -> ExperienceMemory:
    """The bundled starter memory of known productive and redundant patterns."""
    text = resources.files("factorlab.data").joinpath("seed_memory.json").read_text(encoding="utf-8")
    return from_json(json.loads(text))


def signature_of(formula: str) -> PatternSignature:
    return signature(parse(formula))
