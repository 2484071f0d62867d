"""SPJ query model and its JSON-lines wire format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Union

from .relational import Database, JoinPair, SchemaError


@dataclass(frozen=True)
class RangeFilter:
    attribute: str  # qualified "table.attr"
    lb: float
    ub: float

    @property
    def table(self) -> str:
        return self.attribute.split(".", 1)[0]


@dataclass(frozen=True)
class InFilter:
    attribute: str
    values: frozenset

    @property
    def table(self) -> str:
        return self.attribute.split(".", 1)[0]


Selection = Union[RangeFilter, InFilter]


@dataclass(frozen=True)
class SPJQuery:
    """Conjunctive select-project-join query.

    Selections are kept sorted by attribute and joins sorted canonically, so
    dataclass equality is structural equality. ``cardinality``, ``group`` and
    ``template`` are annotations and do not take part in equality.
    """

    relations: tuple[str, ...]
    selections: tuple[Selection, ...] = ()
    joins: tuple[JoinPair, ...] = ()
    cardinality: int | None = field(default=None, compare=False)
    group: int | None = field(default=None, compare=False)
    template: str | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "relations", tuple(sorted(set(self.relations))))
        if not self.relations:
            raise SchemaError("query needs at least one relation")
        sels = tuple(sorted(self.selections, key=lambda s: s.attribute))
        attrs = [s.attribute for s in sels]
        if len(set(attrs)) != len(attrs):
            raise SchemaError(f"duplicate selection attribute in {attrs}")
        object.__setattr__(self, "selections", sels)
        object.__setattr__(self, "joins", tuple(sorted(set(self.joins))))
        rels = set(self.relations)
        for s in sels:
            if s.table not in rels:
                raise SchemaError(f"selection on {s.attribute} outside query relations {sorted(rels)}")
            if isinstance(s, RangeFilter) and not s.lb <= s.ub:
                raise SchemaError(f"range on {s.attribute} has lb > ub")
            if isinstance(s, InFilter) and not s.values:
                raise SchemaError(f"IN filter on {s.attribute} is empty")
        for j in self.joins:
            if not set(j.tables) <= rels:
                raise SchemaError(f"join {j} references a relation outside the query")

    @property
    def n_selections(self) -> int:
        return len(self.selections)

    @property
    def n_joins(self) -> int:
        return len(self.joins)

    def selection(self, attribute: str) -> Selection | None:
        for s in self.selections:
            if s.attribute == attribute:
                return s
        return None

    def with_label(self, cardinality: int | None = None, **kw) -> "SPJQuery":
        return replace(self, cardinality=cardinality, **kw)


def validate_query(q: SPJQuery, db: Database) -> None:
    """Check every reference in ``q`` against ``db``; raise SchemaError otherwise."""
    for r in q.relations:
        if r not in db.tables:
            raise SchemaError(f"unknown relation {r!r}")
    for s in q.selections:
        attr = db.resolve(s.attribute)
        if isinstance(s, RangeFilter):
            if not attr.is_numerical:
                raise SchemaError(f"range filter on categorical attribute {s.attribute}")
            if s.lb < attr.lo or s.ub > attr.hi:
                raise SchemaError(f"range on {s.attribute} exceeds domain [{attr.lo}, {attr.hi}]")
        else:
            if attr.is_numerical:
                raise SchemaError(f"IN filter on numerical attribute {s.attribute}")
            if not s.values <= set(attr.domain):
                raise SchemaError(f"IN filter on {s.attribute} has values outside the domain")
    for j in q.joins:
        db.join_index(j)
    if len(q.relations) > 1 and not _connected(q.relations, q.joins):
        raise SchemaError(f"joins do not connect relations {list(q.relations)}")


def _connected(relations: Iterable[str], joins: Iterable[JoinPair]) -> bool:
    relations = list(relations)
    adj: dict[str, set[str]] = {r: set() for r in relations}
    for j in joins:
        a, b = j.tables
        adj[a].add(b)
        adj[b].add(a)
    seen, stack = {relations[0]}, [relations[0]]
    while stack:
        for nxt in adj[stack.pop()] - seen:
            seen.add(nxt)
            stack.append(nxt)
    return len(seen) == len(relations)


# --------------------------------------------------------------------------
# JSON


def _jsonable(v):
    return v.item() if hasattr(v, "item") else v


def query_to_json(q: SPJQuery) -> dict:
    sels = []
    for s in q.selections:
        if isinstance(s, RangeFilter):
            sels.append({"attribute": s.attribute, "op": "range", "lb": float(s.lb), "ub": float(s.ub)})
        else:
            sels.append({"attribute": s.attribute, "op": "in",
                         "values": sorted((_jsonable(v) for v in s.values), key=str)})
    out = {
        "relations": list(q.relations),
        "selections": sels,
        "joins": [str(j) for j in q.joins],
    }
    if q.cardinality is not None:
        out["cardinality"] = int(q.cardinality)
    if q.group is not None:
        out["group"] = int(q.group)
    if q.template is not None:
        out["template"] = q.template
    return out


def _array(obj: dict, key: str, required: bool = False) -> list:
    if key not in obj and not required:
        return []
    v = obj[key]
    if not isinstance(v, list):
        raise SchemaError(f"field {key!r} must be a JSON array")
    return v


def query_from_json(obj: dict) -> SPJQuery:
    if not isinstance(obj, dict):
        raise SchemaError("query must be a JSON object")
    try:
        sels = []
        for s in _array(obj, "selections"):
            op = s.get("op", "range" if "lb" in s else "in")
            if op == "range":
                sels.append(RangeFilter(s["attribute"], float(s["lb"]), float(s["ub"])))
            elif op == "in":
                sels.append(InFilter(s["attribute"], frozenset(_array(s, "values", required=True))))
            else:
                raise SchemaError(f"unknown selection op {op!r}")
        card = obj.get("cardinality")
        return SPJQuery(
            relations=tuple(_array(obj, "relations", required=True)),
            selections=tuple(sels),
            joins=tuple(JoinPair.parse(j) for j in _array(obj, "joins")),
            cardinality=None if card is None else int(card),
            group=obj.get("group"),
            template=obj.get("template"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError(f"malformed query object: {exc!r}") from None


def write_workload(queries: Iterable[SPJQuery], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for q in queries:
            fh.write(json.dumps(query_to_json(q), sort_keys=True) + "\n")


def iter_workload(path: str | Path) -> Iterator[SPJQuery]:
    with Path(path).open() as fh:
        for line in fh:
            if line.strip():
                yield query_from_json(json.loads(line))


def read_workload(path: str | Path) -> list[SPJQuery]:
    return list(iter_workload(path))
