"""A small lazy dataflow engine in the style of Spark RDD transformations.

Plans are immutable DAGs built with the ``plan_*`` constructors. Nothing runs
until :func:`execute`, which splits the plan into stages at shuffle
boundaries (``reduce_by_key`` and ``join``), fuses each stage's chain of
narrow operations (map / flat_map / filter) into one pass per partition, and
runs partition tasks on a bounded thread pool.

User functions must be pure; ``reduce_by_key`` functions must also be
associative and commutative, since partial results are combined in
partition order.
"""

from __future__ import annotations

import itertools
import pickle
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Iterator

_NARROW = ("map", "flat_map", "filter")
_ARITY = {"source": 0, "map": 1, "flat_map": 1, "filter": 1, "reduce_by_key": 1, "join": 2}
_ids = itertools.count()


class PlanError(ValueError):
    """Raised when a plan is constructed with the wrong shape."""


class ExecutionError(RuntimeError):
    """A user function failed; ``node`` names the plan node."""

    def __init__(self, node: str, cause: BaseException):
        super().__init__(f"task failed in {node}: {type(cause).__name__}: {cause}")
        self.node = node
        self.cause = cause


@dataclass(frozen=True, eq=False)
class Plan:
    kind: str
    children: tuple["Plan", ...] = ()
    fn: Callable | None = None
    records: tuple = ()
    name: str = ""

    def __post_init__(self):
        if self.kind not in _ARITY:
            raise PlanError(f"unknown node kind {self.kind!r}")
        if len(self.children) != _ARITY[self.kind]:
            raise PlanError(
                f"{self.kind} takes {_ARITY[self.kind]} child plan(s), got {len(self.children)}"
            )
        if any(not isinstance(c, Plan) for c in self.children):
            raise PlanError("children must be Plan instances")
        if self.kind in _NARROW + ("reduce_by_key",) and not callable(self.fn):
            raise PlanError(f"{self.kind} requires a callable")
        if not self.name:
            label = getattr(self.fn, "__name__", "") if self.fn is not None else ""
            object.__setattr__(self, "name", f"{self.kind}#{next(_ids)}" + (f"({label})" if label else ""))

    # chaining sugar
    def map(self, fn, name=""):
        return plan_map(self, fn, name)

    def flat_map(self, fn, name=""):
        return plan_flat_map(self, fn, name)

    def filter(self, fn, name=""):
        return plan_filter(self, fn, name)

    def reduce_by_key(self, fn, name=""):
        return plan_reduce_by_key(self, fn, name)

    def join(self, other, name=""):
        return plan_join(self, other, name)


def plan_source(records: Iterable, name: str = "") -> Plan:
    return Plan("source", records=tuple(records), name=name)


def plan_map(child: Plan, fn: Callable, name: str = "") -> Plan:
    return Plan("map", (child,), fn, name=name)


def plan_flat_map(child: Plan, fn: Callable, name: str = "") -> Plan:
    return Plan("flat_map", (child,), fn, name=name)


def plan_filter(child: Plan, fn: Callable, name: str = "") -> Plan:
    return Plan("filter", (child,), fn, name=name)


def plan_reduce_by_key(child: Plan, fn: Callable, name: str = "") -> Plan:
    return Plan("reduce_by_key", (child,), fn, name=name)


def plan_join(left: Plan, right: Plan, name: str = "") -> Plan:
    return Plan("join", (left, right), name=name)


# ---------------------------------------------------------------- reference

def sequential_eval(plan: Plan) -> list:
    """Direct recursive evaluation, one node at a time. The reference semantics."""
    if plan.kind == "source":
        return list(plan.records)
    if plan.kind == "join":
        left = sequential_eval(plan.children[0])
        right = sequential_eval(plan.children[1])
        by_key: dict = {}
        for k, w in right:
            by_key.setdefault(k, []).append(w)
        return [(k, (v, w)) for k, v in left for w in by_key.get(k, ())]
    data = sequential_eval(plan.children[0])
    fn = plan.fn
    try:
        if plan.kind == "map":
            return [fn(x) for x in data]
        if plan.kind == "flat_map":
            return [y for x in data for y in fn(x)]
        if plan.kind == "filter":
            return [x for x in data if fn(x)]
        acc: dict = {}
        for k, v in data:
            acc[k] = fn(acc[k], v) if k in acc else v
        return list(acc.items())
    except Exception as exc:
        raise ExecutionError(plan.name, exc) from exc


def canonical_sort(items: Iterable) -> list:
    """Sort into a deterministic order; falls back to ``repr`` for unorderable items."""
    items = list(items)
    try:
        return sorted(items)
    except TypeError:
        return sorted(items, key=repr)


# ---------------------------------------------------------------- execution

@dataclass
class ExecStats:
    stages: int = 0
    tasks: int = 0
    shuffles: int = 0
    # per-partition lists built at stage outputs; a fused chain of narrow ops adds none
    materializations: int = 0


def stable_hash(key) -> int:
    """Process-independent hash used for shuffle partitioning.

    Equal keys hash equally (1, 1.0 and True included), as dict grouping requires.
    """
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8", "surrogatepass"))
    if isinstance(key, bytes):
        return zlib.crc32(key)
    if isinstance(key, (int, float)):
        return hash(key) & 0xFFFFFFFF
    if isinstance(key, tuple):
        h = 0x345678
        for item in key:
            h = (h * 1000003 ^ stable_hash(item)) & 0xFFFFFFFF
        return h
    try:
        return zlib.crc32(pickle.dumps(key, protocol=4))
    except Exception:
        return zlib.crc32(repr(key).encode())


def _chain(ops: list[Plan], part: list) -> list:
    # one generator pipeline per partition: elements flow through every op before the next starts
    it: Iterator = iter(part)
    for op in ops:
        it = _wrap(op, it)
    return list(it)


def _wrap(op: Plan, it: Iterator) -> Iterator:
    fn, name = op.fn, op.name
    try:
        if op.kind == "map":
            for x in it:
                yield fn(x)
        elif op.kind == "flat_map":
            for x in it:
                yield from fn(x)
        else:
            for x in it:
                if fn(x):
                    yield x
    except ExecutionError:
        raise
    except Exception as exc:
        raise ExecutionError(name, exc) from exc


class _Executor:
    def __init__(self, pool: ThreadPoolExecutor | None, partitions: int, stats: ExecStats):
        self.pool = pool
        self.partitions = partitions
        self.stats = stats

    def run_tasks(self, fn, args_list):
        self.stats.tasks += len(args_list)
        if self.pool is None:
            return [fn(*a) for a in args_list]
        futures = [self.pool.submit(fn, *a) for a in args_list]
        return [f.result() for f in futures]

    def evaluate(self, plan: Plan) -> list[list]:
        """Return the partitions of ``plan``."""
        ops: list[Plan] = []
        node = plan
        while node.kind in _NARROW:
            ops.append(node)
            node = node.children[0]
        ops.reverse()
        if node.kind == "source":
            parts = [list(node.records[i :: self.partitions]) for i in range(self.partitions)]
        elif node.kind == "reduce_by_key":
            parts = self.shuffle_reduce(node)
        else:
            parts = self.shuffle_join(node)
        self.stats.stages += 1
        if ops:
            parts = self.run_tasks(_chain, [(ops, p) for p in parts])
        self.stats.materializations += len(parts)
        return parts

    def _bucket(self, parts: list[list], name: str) -> list[list[list]]:
        # buckets[target][source] keeps a fixed combination order
        n = self.partitions
        buckets = [[[] for _ in parts] for _ in range(n)]
        try:
            for src, part in enumerate(parts):
                for k, v in part:
                    buckets[stable_hash(k) % n][src].append((k, v))
        except (TypeError, ValueError) as exc:
            raise ExecutionError(name, exc) from exc
        self.stats.shuffles += 1
        return buckets

    def shuffle_reduce(self, node: Plan) -> list[list]:
        parts = self.evaluate(node.children[0])
        fn, name = node.fn, node.name

        def combine(part):
            acc: dict = {}
            try:
                for k, v in part:
                    acc[k] = fn(acc[k], v) if k in acc else v
            except Exception as exc:
                raise ExecutionError(name, exc) from exc
            return list(acc.items())

        # map-side combine, then shuffle, then reduce
        partial = self.run_tasks(combine, [(p,) for p in parts])
        buckets = self._bucket(partial, name)
        return self.run_tasks(combine, [(list(itertools.chain.from_iterable(b)),) for b in buckets])

    def shuffle_join(self, node: Plan) -> list[list]:
        left = self._bucket(self.evaluate(node.children[0]), node.name)
        right = self._bucket(self.evaluate(node.children[1]), node.name)

        def join_part(lb, rb):
            by_key: dict = {}
            for k, w in itertools.chain.from_iterable(rb):
                by_key.setdefault(k, []).append(w)
            return [(k, (v, w)) for k, v in itertools.chain.from_iterable(lb) for w in by_key.get(k, ())]

        return self.run_tasks(join_part, list(zip(left, right)))


def execute(plan: Plan, workers: int = 1, partitions: int = 1, stats: ExecStats | None = None) -> list:
    """Run ``plan`` and collect its output in canonical order."""
    if not isinstance(workers, int) or workers < 1:
        raise ValueError(f"workers must be a positive integer, got {workers!r}")
    if not isinstance(partitions, int) or partitions < 1:
        raise ValueError(f"partitions must be a positive integer, got {partitions!r}")
    stats = stats if stats is not None else ExecStats()
    if workers == 1:
        parts = _Executor(None, partitions, stats).evaluate(plan)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = _Executor(pool, partitions, stats).evaluate(plan)
    return canonical_sort(itertools.chain.from_iterable(parts))
