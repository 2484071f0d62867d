"""Workload generation, grouping, skewed train/test splits and sub-condition sampling."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .oracle import exact_cardinality
from .queries import InFilter, RangeFilter, Selection, SPJQuery
from .relational import Database, SchemaError, Table

log = logging.getLogger(__name__)

BY_SELECTION_COUNT = "by-selection-count"
BY_JOIN_COUNT = "by-join-count"
BY_TEMPLATE = "by-template"
GROUP_RULES = (BY_SELECTION_COUNT, BY_JOIN_COUNT, BY_TEMPLATE)


class WorkloadError(ValueError):
    pass


# --------------------------------------------------------------------------
# Predicate sampling


def _sample_selection(table: Table, attr_name: str, row: int, rng: np.random.Generator) -> Selection:
    attr = table.attribute(attr_name)
    qualified = f"{table.name}.{attr_name}"
    v = table.columns[attr_name][row]
    if attr.is_numerical:
        span = attr.hi - attr.lo
        width = span - rng.uniform(0.0, span)  # (0, span]
        lb = max(attr.lo, v - width / 2)
        ub = min(attr.hi, v + width / 2)
        return RangeFilter(qualified, float(lb), float(ub))
    domain = list(attr.domain)
    size = int(rng.integers(1, len(domain) + 1))
    others = [c for c in domain if c != v]
    extra = rng.choice(len(others), size=size - 1, replace=False) if size > 1 else []
    return InFilter(qualified, frozenset([v, *(others[i] for i in extra)]))


def _sample_selections(table: Table, candidates: Sequence[str], d: int,
                       rng: np.random.Generator) -> list[Selection]:
    if d == 0:
        return []
    picked = rng.choice(len(candidates), size=d, replace=False)
    row = int(rng.integers(len(table)))
    return [_sample_selection(table, candidates[i], row, rng) for i in sorted(picked)]


def generate_single_table_query(table: Table, d: int, seed: int | np.random.Generator,
                                exclude: Iterable[str] = ()) -> SPJQuery:
    """Query with ``d`` selections centred on one uniformly drawn row.

    Numerical ranges take that row's value as centre and a width uniform over
    (0, domain width], clipped to the domain; categorical IN sets have a size
    uniform in [1, |domain|] and always contain the row's value. Attributes in
    ``exclude`` (bare names) are never selected.
    """
    rng = np.random.default_rng(seed)
    candidates = [a.name for a in table.attributes if a.name not in set(exclude)]
    if not 2 <= d <= len(candidates):
        raise WorkloadError(f"d={d} outside [2, {len(candidates)}] for table {table.name!r}")
    return SPJQuery((table.name,), tuple(_sample_selections(table, candidates, d, rng)),
                    template=f"sel{d}")


def generate_join_query(db: Database, t: int, seed: int | np.random.Generator,
                        selections_per_relation: tuple[int, int] = (1, 2)) -> SPJQuery:
    """Random walk of ``t`` join steps over the join graph plus per-relation selections.

    Join attributes are never selected on. Each relation independently gets
    a selection count uniform in ``selections_per_relation`` (capped by its
    number of selectable attributes).
    """
    rng = np.random.default_rng(seed)
    if not 0 <= t <= len(db.tables) - 1:
        raise WorkloadError(f"t={t} outside [0, {len(db.tables) - 1}]")
    names = sorted(db.tables)
    start = names[int(rng.integers(len(names)))]
    rels, joins = [start], []
    for _ in range(t):
        frontier = sorted({p for r in rels for p in db.neighbours(r)
                           if not set(p.tables) <= set(rels)})
        if not frontier:
            raise WorkloadError(f"join graph does not allow a {t}-step walk from {start!r}")
        step = frontier[int(rng.integers(len(frontier)))]
        joins.append(step)
        rels.extend(r for r in step.tables if r not in rels)
    keys = db.join_attributes()
    lo, hi = selections_per_relation
    sels: list[Selection] = []
    for r in sorted(rels):
        table = db.tables[r]
        candidates = [a.name for a in table.attributes if f"{r}.{a.name}" not in keys]
        d = min(int(rng.integers(lo, hi + 1)), len(candidates))
        sels.extend(_sample_selections(table, candidates, d, rng))
    return SPJQuery(tuple(rels), tuple(sels), tuple(joins), template=f"join{t}")


def label_workload(db: Database, queries: Iterable[SPJQuery], dedupe: bool = True) -> list[SPJQuery]:
    """Attach exact cardinalities, keeping unique queries with nonzero results."""
    seen: set[SPJQuery] = set()
    out = []
    for q in queries:
        if dedupe:
            if q in seen:
                continue
            seen.add(q)
        c = exact_cardinality(db, q)
        if c >= 1:
            out.append(q.with_label(c, group=q.group, template=q.template))
    return out


def generate_workload(db: Database, kind: str, counts: Sequence[int], per_count: int, seed: int,
                      table: str | None = None, max_attempts: int = 5) -> list[SPJQuery]:
    """Labeled, deduplicated workload with ``per_count`` queries per entry of ``counts``.

    ``kind`` is ``"single"`` (counts are selection counts on ``table``) or
    ``"join"`` (counts are join counts). Zero-cardinality and duplicate draws
    are resampled up to ``max_attempts * per_count`` times per count, so a
    count may end up short; the caller sees the actual sizes.
    """
    rng = np.random.default_rng(seed)
    keys = db.join_attributes()
    out: list[SPJQuery] = []
    seen: set[SPJQuery] = set()
    for c in counts:
        kept, tries = 0, 0
        while kept < per_count and tries < max_attempts * per_count:
            tries += 1
            if kind == "single":
                tname = table or sorted(db.tables)[0]
                excl = [k.split(".", 1)[1] for k in keys if k.startswith(tname + ".")]
                q = generate_single_table_query(db.tables[tname], c, rng, exclude=excl)
            elif kind == "join":
                q = generate_join_query(db, c, rng)
            else:
                raise WorkloadError(f"unknown workload kind {kind!r}")
            if q in seen:
                continue
            seen.add(q)
            card = exact_cardinality(db, q)
            if card >= 1:
                out.append(q.with_label(card, template=q.template))
                kept += 1
        if kept < per_count:
            log.warning("count %s: only %d unique nonzero queries after %d draws", c, kept, tries)
    return out


# --------------------------------------------------------------------------
# Grouping and splits


def group_key(q: SPJQuery, rule: str):
    if rule == BY_SELECTION_COUNT:
        return q.n_selections
    if rule == BY_JOIN_COUNT:
        return q.n_joins
    if rule == BY_TEMPLATE:
        if q.template is None:
            raise WorkloadError("by-template grouping needs template tags on every query")
        return q.template
    raise WorkloadError(f"unknown group rule {rule!r}")


def partition_workload(queries: Sequence[SPJQuery], rule: str) -> list[SPJQuery]:
    """Assign contiguous group ids 1..m, ordered by sorted group key."""
    keys = [group_key(q, rule) for q in queries]
    ids = {k: i + 1 for i, k in enumerate(sorted(set(keys), key=lambda k: (str(type(k)), k)))}
    return [replace(q, group=ids[k]) for q, k in zip(queries, keys)]


def group_sizes(queries: Iterable[SPJQuery]) -> dict[int, int]:
    return dict(sorted(Counter(q.group for q in queries).items()))


def simple_rule(spec: str) -> Callable[[SPJQuery], bool]:
    """Parse ``"selections<=6"`` / ``"joins<=2"`` into a predicate."""
    spec = spec.replace(" ", "")
    for prefix, getter in (("selections<=", lambda q: q.n_selections), ("joins<=", lambda q: q.n_joins)):
        if spec.startswith(prefix):
            limit = int(spec[len(prefix):])
            return lambda q, g=getter, k=limit: g(q) <= k
    raise WorkloadError(f"cannot parse simple-query rule {spec!r}")


@dataclass(frozen=True)
class SplitSpec:
    simple_def: str = "selections<=6"
    ratio: tuple[float, float] = (0.5, 0.5)
    test_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        a, b = self.ratio
        if a <= 0 or b <= 0 or abs(a + b - 1.0) > 1e-9:
            raise WorkloadError(f"ratio {self.ratio} must be positive and sum to 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise WorkloadError(f"test_fraction {self.test_fraction} not in (0, 1)")


def build_skewed_split(queries: Sequence[SPJQuery], spec: SplitSpec,
                       group_rule: str | None = None) -> tuple[list[SPJQuery], list[SPJQuery]]:
    """Uniform stratified test sample plus a train set at the requested simple/complex ratio.

    The test set takes ``round(test_fraction * |group|)`` queries from every
    group (groups by ``group_rule``, or by the existing ``group`` annotation).
    The train set downsamples whichever class is over-represented so that
    simple:complex counts match ``spec.ratio`` as closely as integers allow.
    """
    is_simple = simple_rule(spec.simple_def)
    rng = np.random.default_rng(spec.seed)
    keys = [group_key(q, group_rule) if group_rule else q.group for q in queries]
    test_idx: list[int] = []
    for k in sorted(set(keys), key=str):
        members = [i for i, kk in enumerate(keys) if kk == k]
        n = int(round(spec.test_fraction * len(members)))
        test_idx.extend(int(i) for i in rng.choice(members, size=n, replace=False))
    test_set = set(test_idx)
    rest = [i for i in range(len(queries)) if i not in test_set]
    simple = [i for i in rest if is_simple(queries[i])]
    complex_ = [i for i in rest if not is_simple(queries[i])]
    if not simple or not complex_:
        raise WorkloadError("split needs both simple and complex queries in the pool")
    a, b = spec.ratio
    # largest train set with n_simple / n_complex == a / b
    n_simple = min(len(simple), int(np.floor(len(complex_) * a / b + 1e-9)))
    n_complex = int(round(n_simple * b / a))
    if n_complex > len(complex_):
        n_complex = len(complex_)
        n_simple = int(round(n_complex * a / b))
    if n_simple < 1 or n_complex < 1:
        raise WorkloadError(
            f"ratio {spec.ratio} unachievable: pool has {len(simple)} simple / {len(complex_)} complex")
    train_idx = (sorted(int(i) for i in rng.choice(simple, size=n_simple, replace=False))
                 + sorted(int(i) for i in rng.choice(complex_, size=n_complex, replace=False)))
    train = [queries[i] for i in sorted(train_idx)]
    test = [queries[i] for i in sorted(test_idx)]
    return train, test


# --------------------------------------------------------------------------
# Partial order


def _contained(inner: Selection, outer: Selection) -> bool:
    if type(inner) is not type(outer):
        return False
    if isinstance(inner, RangeFilter):
        return outer.lb <= inner.lb and inner.ub <= outer.ub
    return inner.values <= outer.values


def is_subcondition(q_sub: SPJQuery, q: SPJQuery) -> bool:
    """True iff ``q_sub`` has q's relations, joins and selected attributes, each selection tightened."""
    if q_sub.relations != q.relations or q_sub.joins != q.joins:
        return False
    if [s.attribute for s in q_sub.selections] != [s.attribute for s in q.selections]:
        return False
    return all(_contained(a, b) for a, b in zip(q_sub.selections, q.selections))


def _tighten(s: Selection, rng: np.random.Generator) -> Selection:
    if isinstance(s, RangeFilter):
        mid = float(rng.uniform(s.lb, s.ub)) if s.ub > s.lb else s.lb
        if rng.random() < 0.5:
            return RangeFilter(s.attribute, s.lb, mid)
        return RangeFilter(s.attribute, mid, s.ub)
    values = sorted(s.values, key=str)
    if len(values) == 1:
        return s
    n_remove = int(rng.integers(1, len(values)))  # keep at least one
    drop = set(rng.choice(len(values), size=n_remove, replace=False).tolist())
    return InFilter(s.attribute, frozenset(v for i, v in enumerate(values) if i not in drop))


def sample_contrastive_queries(q: SPJQuery, k: int, seed: int | np.random.Generator) -> list[SPJQuery]:
    """``k`` sub-condition queries of ``q``.

    Each draws a uniformly random non-empty subset of q's selections and
    tightens every chosen one: a range keeps one endpoint and moves the other
    to a uniform intermediate value (fair coin for which), an IN set drops a
    random non-empty proper subset of its values.
    """
    if not q.selections:
        raise WorkloadError("query has no selections to tighten")
    if k < 1:
        raise WorkloadError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    n = len(q.selections)
    out = []
    for _ in range(k):
        # uniform over the 2^n - 1 non-empty subsets
        mask = int(rng.integers(1, 2 ** n))
        sels = tuple(_tighten(s, rng) if mask >> i & 1 else s for i, s in enumerate(q.selections))
        out.append(SPJQuery(q.relations, sels, q.joins, group=q.group, template=q.template))
    return out
