"""Candidate samplers: typed random expression trees, memory-guided trees and
an external process speaking a line-delimited JSON protocol.

Random trees grow top-down. A numeric slot at level ``L`` (root is level 1)
becomes a leaf with probability ``min(1, ramp * (L - 1))`` and always once no
operator fits in the remaining depth. Operators are drawn uniformly among
those of the required output kind whose shallowest valid subtree still fits.
Constants only appear as the second argument of a binary elementwise operator.
"""

from __future__ import annotations

import json
import logging
import queue
import subprocess
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .dsl import Call, Const, Expr, Field, PatternSignature, depth, format_expr, node_count, parse, signature
from .errors import GenerationError, ParseError
from .memory import EMPTY_SIGNAL, MemorySignal
from .panel import ALL_FIELDS
from .registry import BOOL, INT, NUM, REGISTRY, OperatorRegistry, OpSpec

log = logging.getLogger(__name__)

POWER_CHOICES = (0.5, 2.0, 3.0)


@dataclass(frozen=True)
class GenConfig:
    """Shape of the random tree distribution."""

    max_depth: int = 5
    max_nodes: int = 25
    leaf_probability_ramp: float = 0.25
    window_choices: tuple[int, ...] = (3, 6, 12, 24, 48)
    constant_range: tuple[float, float] = (-2.0, 2.0)
    constant_probability: float = 0.2
    fields: tuple[str, ...] = ALL_FIELDS
    seed: int = 0
    dedup: bool = True
    max_retries: int = 200
    explore_weight: float = 0.5
    skeleton_attempts: int = 64

    def __post_init__(self):
        object.__setattr__(self, "window_choices", tuple(int(w) for w in self.window_choices))
        object.__setattr__(self, "constant_range", tuple(float(c) for c in self.constant_range))
        object.__setattr__(self, "fields", tuple(self.fields))
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.max_nodes < 1:
            raise ValueError("max_nodes must be >= 1")
        if not self.window_choices or min(self.window_choices) < 2:
            raise ValueError("window_choices must be non-empty with every window >= 2")
        lo, hi = self.constant_range
        if not lo <= hi:
            raise ValueError("constant_range must be an ordered interval")
        if not self.fields or any(f not in ALL_FIELDS for f in self.fields):
            raise ValueError(f"fields must be drawn from {ALL_FIELDS}")
        if self.leaf_probability_ramp < 0:
            raise ValueError("leaf_probability_ramp must be >= 0")
        if self.explore_weight < 0:
            raise ValueError("explore_weight must be >= 0")


def min_height(spec: OpSpec) -> int:
    """Shallowest subtree rooted at ``spec``: one level plus its tallest
    required child (a numeric child can be a leaf; a logical one cannot)."""
    return 3 if BOOL in spec.inputs else 2


def _const_slot(spec: OpSpec, index: int) -> bool:
    return spec.arity == 2 and index == 1 and not spec.params


class TreeSampler:
    """Stateful draw of typed trees from one random generator."""

    def __init__(self, cfg: GenConfig, registry: OperatorRegistry = REGISTRY, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.registry = registry
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self._by_kind = {k: [op for op in registry if op.output == k] for k in (NUM, BOOL)}

    # ---- pieces
    def ops_fitting(self, kind: str, height: int) -> list[OpSpec]:
        return [op for op in self._by_kind[kind] if min_height(op) <= height]

    def leaf_probability(self, level: int) -> float:
        return min(1.0, self.cfg.leaf_probability_ramp * (level - 1))

    def _param(self, kind: str, minimum: float):
        if kind == INT:
            choices = [w for w in self.cfg.window_choices if w >= minimum]
            return int(choices[self.rng.integers(len(choices))]) if choices else int(max(minimum, 2))
        return float(POWER_CHOICES[self.rng.integers(len(POWER_CHOICES))])

    def _const(self) -> Const:
        lo, hi = self.cfg.constant_range
        return Const(round(float(self.rng.uniform(lo, hi)), 2))

    def _field(self, pool: Sequence[str]) -> Field:
        return Field(pool[self.rng.integers(len(pool))])

    # ---- recursive draw
    def node(self, kind: str, level: int, pool: Sequence[str], const_ok: bool = False) -> Expr:
        height = self.cfg.max_depth - level + 1
        if kind == NUM:
            ops = self.ops_fitting(NUM, height)
            if not ops or self.rng.random() < self.leaf_probability(level):
                if const_ok and self.rng.random() < self.cfg.constant_probability:
                    return self._const()
                return self._field(pool)
        else:
            ops = self.ops_fitting(BOOL, height)
            if not ops:
                raise GenerationError("no logical operator fits the remaining depth")
        spec = ops[self.rng.integers(len(ops))]
        return self.call(spec, level, pool)

    def call(self, spec: OpSpec, level: int, pool: Sequence[str]) -> Call:
        args = [self.node(k, level + 1, pool, const_ok=_const_slot(spec, i)) for i, k in enumerate(spec.inputs)]
        # f(x, x) is constant or trivial for every binary operator; redraw once
        if spec.arity == 2 and args[0] == args[1]:
            args[1] = self.node(spec.inputs[1], level + 1, pool, const_ok=_const_slot(spec, 1))
        args = tuple(args)
        params = tuple(self._param(k, m) for k, m in spec.params)
        return Call(spec.name, args, params)

    def tree(self, pool: Sequence[str] | None = None) -> Expr:
        """One tree within the depth bound (node bound not enforced here)."""
        return self.node(NUM, 1, tuple(pool or self.cfg.fields))

    def bounded_tree(self) -> Expr:
        for _ in range(self.cfg.max_retries):
            t = self.tree()
            if node_count(t) <= self.cfg.max_nodes:
                return t
        raise GenerationError(
            f"no tree within max_nodes={self.cfg.max_nodes} after {self.cfg.max_retries} draws"
        )

    # ---- signature-directed draw
    def matching_tree(self, target: PatternSignature) -> Optional[Expr]:
        """A tree whose signature equals ``target``, or None if the draw
        budget runs out. The top two levels are fixed by the signature;
        deeper levels are random over the signature's fields."""
        pool = tuple(target.fields)
        if not pool:
            return None
        for _ in range(self.cfg.skeleton_attempts):
            t = self._skeleton(target, pool)
            if t is None:
                continue
            if depth(t) <= self.cfg.max_depth and node_count(t) <= self.cfg.max_nodes and signature(t, self.registry) == target:
                return t
        return None

    def _skeleton(self, target: PatternSignature, pool: Sequence[str]) -> Optional[Expr]:
        root = target.root
        if root.startswith("$"):
            return Field(root[1:])
        if root not in self.registry:
            return None
        spec = self.registry[root]
        rest = [name for _, name in target.ops]
        if root not in rest:
            return None
        rest.remove(root)
        if len(rest) > spec.arity:
            return None
        slots: list[Optional[str]] = [None] * spec.arity
        for name in [rest[i] for i in self.rng.permutation(len(rest))]:
            if name not in self.registry:
                return None
            out = self.registry[name].output
            free = [i for i in self.rng.permutation(spec.arity) if slots[i] is None and spec.inputs[i] == out]
            if not free:
                return None
            slots[free[0]] = name
        args = []
        for i, kind in enumerate(spec.inputs):
            if slots[i] is None:
                if kind != NUM:
                    return None
                if _const_slot(spec, i) and self.rng.random() < self.cfg.constant_probability:
                    args.append(self._const())
                else:
                    args.append(self._field(pool))
            else:
                child = self.registry[slots[i]]
                if min_height(child) > self.cfg.max_depth - 1:
                    return None
                args.append(self.call(child, 2, pool))
        params = tuple(self._param(k, m) for k, m in spec.params)
        return Call(spec.name, tuple(args), params)


def _rng(cfg: GenConfig, rng: np.random.Generator | None) -> np.random.Generator:
    return rng if rng is not None else np.random.default_rng(cfg.seed)


def random_candidates(
    n: int,
    registry: OperatorRegistry = REGISTRY,
    cfg: GenConfig | None = None,
    rng: np.random.Generator | None = None,
    exclude: Iterable[str] = (),
) -> list[Expr]:
    """``n`` type-correct trees, distinct by canonical text when ``cfg.dedup``."""
    cfg = cfg or GenConfig()
    if n < 1:
        raise ValueError("n must be >= 1")
    sampler = TreeSampler(cfg, registry, _rng(cfg, rng))
    seen = set(exclude)
    out: list[Expr] = []
    misses = 0
    while len(out) < n:
        t = sampler.bounded_tree()
        text = format_expr(t)
        if cfg.dedup and text in seen:
            misses += 1
            if misses > cfg.max_retries * n:
                raise GenerationError(f"could not find {n} distinct trees; the bounds admit too few")
            continue
        seen.add(text)
        out.append(t)
    return out


def guided_candidates(
    n: int,
    signal: MemorySignal = EMPTY_SIGNAL,
    registry: OperatorRegistry = REGISTRY,
    cfg: GenConfig | None = None,
    rng: np.random.Generator | None = None,
    exclude: Iterable[str] = (),
) -> list[Expr]:
    """Draw from a mixture of the random sampler (weight ``explore_weight``)
    and signature-directed samplers (each recommendation's weight); trees
    matching a forbidden signature are discarded and redrawn.

    An empty signal reproduces ``random_candidates`` exactly.
    """
    cfg = cfg or GenConfig()
    if n < 1:
        raise ValueError("n must be >= 1")
    if signal.is_empty:
        return random_candidates(n, registry, cfg, rng, exclude)
    sampler = TreeSampler(cfg, registry, _rng(cfg, rng))
    forbidden = signal.forbidden_keys()
    recs = [w for w in signal.recommended if w.signature.key not in forbidden]
    cum = np.cumsum([cfg.explore_weight] + [w.weight for w in recs])
    total = float(cum[-1])
    if total <= 0:
        names = ", ".join(sorted(forbidden)) or "none"
        raise GenerationError(
            f"mixture has no mass: explore_weight is 0 and every recommendation is forbidden (filters: {names})"
        )
    seen = set(exclude)
    out: list[Expr] = []
    draws = 0
    blocked = 0
    while len(out) < n:
        draws += 1
        if draws > cfg.max_retries * n:
            names = ", ".join(sorted(forbidden)) or "none"
            raise GenerationError(
                f"only {len(out)} of {n} candidates after {draws - 1} draws "
                f"({blocked} blocked by forbidden filters: {names})"
            )
        pick = int(np.searchsorted(cum, sampler.rng.random() * total, side="right"))
        if pick == 0:
            try:
                t = sampler.bounded_tree()
            except GenerationError:
                continue
        else:
            t = sampler.matching_tree(recs[pick - 1].signature)
            if t is None:
                continue
        if signature(t, registry).key in forbidden:
            blocked += 1
            continue
        text = format_expr(t)
        if cfg.dedup and text in seen:
            continue
        seen.add(text)
        out.append(t)
    return out


# ------------------------------------------------------------ external process


@dataclass(frozen=True)
class ExternalEndpoint:
    """How to launch the external generator process."""

    command: tuple[str, ...]
    timeout: float = 120.0
    cwd: Optional[str] = None
    env: Optional[dict] = None

    def __post_init__(self):
        object.__setattr__(self, "command", tuple(self.command))
        if not self.command:
            raise ValueError("command must be non-empty")
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")


@dataclass
class ExternalResult:
    candidates: list[Expr] = field(default_factory=list)
    rejected: list[tuple[str, str]] = field(default_factory=list)


def _pump(stream, q: "queue.Queue") -> None:
    try:
        for line in stream:
            q.put(line)
    finally:
        q.put(None)


def request_message(n: int, signal: MemorySignal) -> dict:
    return {"type": "generate", "count": int(n), "signal": signal.to_wire()}


def external_candidates(
    n: int,
    signal: MemorySignal,
    endpoint: ExternalEndpoint,
    registry: OperatorRegistry = REGISTRY,
    result: ExternalResult | None = None,
) -> list[Expr]:
    """Ask an external process for ``n`` formulas.

    Invalid, duplicate and forbidden formulas are dropped and recorded in
    ``result.rejected`` with a reason. Raises GenerationError on launch
    failure, early exit, timeout or when nothing valid comes back.
    """
    result = result if result is not None else ExternalResult()
    try:
        proc = subprocess.Popen(
            list(endpoint.command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            encoding="utf-8",
            cwd=endpoint.cwd,
            env=endpoint.env,
        )
    except OSError as exc:
        raise GenerationError(f"cannot launch generator {endpoint.command[0]!r}: {exc}") from None
    lines: "queue.Queue" = queue.Queue()
    reader = threading.Thread(target=_pump, args=(proc.stdout, lines), daemon=True)
    reader.start()
    forbidden = signal.forbidden_keys()
    seen: set[str] = set()
    deadline = time.monotonic() + endpoint.timeout
    done = False
    try:
        try:
            proc.stdin.write(json.dumps(request_message(n, signal)) + "\n")
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise GenerationError(f"generator closed its input: {exc}") from None
        while not done:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise GenerationError(f"generator timed out after {endpoint.timeout:g} s")
            try:
                line = lines.get(timeout=remaining)
            except queue.Empty:
                raise GenerationError(f"generator timed out after {endpoint.timeout:g} s") from None
            if line is None:
                code = proc.wait()
                raise GenerationError(f"generator exited (code {code}) before sending done")
            line = line.strip()
            if not line:
                continue
            try:
                msg = json.loads(line)
            except json.JSONDecodeError:
                result.rejected.append((line, "not a JSON object"))
                log.warning("generator sent non-JSON line: %s", line)
                continue
            if not isinstance(msg, dict):
                result.rejected.append((line, "not a JSON object"))
                continue
            if msg.get("type") == "done":
                done = True
                continue
            text = msg.get("formula")
            if not isinstance(text, str):
                result.rejected.append((line, "missing formula"))
                continue
            reason = _screen(text, registry, forbidden, seen, result)
            if reason:
                result.rejected.append((text, reason))
                log.warning("dropped generated formula %r: %s", text, reason)
    finally:
        try:
            proc.stdin.close()
        except OSError:
            pass
        try:
            proc.wait(timeout=1.0)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()
    if not result.candidates:
        raise GenerationError("generator returned no valid formulas")
    return list(result.candidates)


def _screen(text, registry, forbidden, seen, result) -> str:
    try:
        expr = parse(text, registry)
    except ParseError as exc:
        return f"invalid: {exc}"
    key = signature(expr, registry).key
    if key in forbidden:
        return f"forbidden signature {key}"
    canon = format_expr(expr)
    if canon in seen:
        return "duplicate"
    seen.add(canon)
    result.candidates.append(expr)
    return ""
