"""In-memory relational store: schema metadata, CSV loading and synthetic data.

Tables are stored column-wise as numpy arrays. Categorical columns hold the
raw domain values; numerical columns hold float64.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

NUMERICAL = "numerical"
CATEGORICAL = "categorical"
INFER = "infer"

DEFAULT_MAX_CATEGORIES = 64


class SchemaError(ValueError):
    """Raised for malformed schemas and values outside declared domains."""


@dataclass(frozen=True)
class AttributeMeta:
    """Column metadata.

    ``domain`` is ``(min, max)`` for numerical attributes and the ordered
    tuple of values for categorical ones. The string ``"infer"`` defers the
    domain to the data at load time.
    """

    name: str
    kind: str
    domain: Any = INFER
    integral: bool = False
    range_encodable: bool = False

    def __post_init__(self):
        if self.kind not in (NUMERICAL, CATEGORICAL):
            raise SchemaError(f"attribute {self.name!r}: unknown kind {self.kind!r}")
        if self.domain == INFER:
            return
        if self.kind == NUMERICAL:
            lo, hi = self.domain
            if not float(lo) < float(hi):
                raise SchemaError(f"attribute {self.name!r}: need min < max, got {self.domain}")
            object.__setattr__(self, "domain", (float(lo), float(hi)))
        else:
            values = tuple(self.domain)
            if not values:
                raise SchemaError(f"attribute {self.name!r}: empty categorical domain")
            if len(set(values)) != len(values):
                raise SchemaError(f"attribute {self.name!r}: duplicate categorical values")
            object.__setattr__(self, "domain", values)

    @property
    def is_numerical(self) -> bool:
        return self.kind == NUMERICAL

    @property
    def lo(self) -> float:
        return self.domain[0]

    @property
    def hi(self) -> float:
        return self.domain[1]

    def to_json(self) -> dict:
        out = {"name": self.name, "kind": self.kind,
               "domain": self.domain if self.domain == INFER else list(self.domain)}
        if self.integral:
            out["integral"] = True
        if self.range_encodable:
            out["range_encodable"] = True
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "AttributeMeta":
        return cls(
            name=obj["name"],
            kind=obj["kind"],
            domain=obj.get("domain", INFER),
            integral=bool(obj.get("integral", False)),
            range_encodable=bool(obj.get("range_encodable", False)),
        )


@dataclass
class Table:
    name: str
    attributes: list[AttributeMeta]
    columns: dict[str, np.ndarray]

    def __post_init__(self):
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise SchemaError(f"table {self.name!r}: duplicate attribute names")
        if set(names) != set(self.columns):
            raise SchemaError(f"table {self.name!r}: columns do not match attributes")
        lengths = {len(c) for c in self.columns.values()}
        if len(lengths) > 1:
            raise SchemaError(f"table {self.name!r}: ragged columns")
        for attr in self.attributes:
            col = self.columns[attr.name]
            if attr.domain == INFER:
                raise SchemaError(f"table {self.name!r}: domain of {attr.name!r} unresolved")
            if attr.is_numerical:
                if len(col) and (col.min() < attr.lo or col.max() > attr.hi):
                    raise SchemaError(f"{self.name}.{attr.name}: value outside [{attr.lo}, {attr.hi}]")
            elif len(col) and not np.isin(col, np.asarray(attr.domain, dtype=object)).all():
                raise SchemaError(f"{self.name}.{attr.name}: value outside categorical domain")

    def __len__(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0

    @property
    def rows(self) -> list[tuple]:
        cols = [self.columns[a.name].tolist() for a in self.attributes]
        return list(zip(*cols))

    def attribute(self, name: str) -> AttributeMeta:
        for a in self.attributes:
            if a.name == name:
                return a
        raise KeyError(f"table {self.name!r} has no attribute {name!r}")


@dataclass(frozen=True, order=True)
class JoinPair:
    """Unordered equi-join edge between two qualified attributes ``table.attr``."""

    left: str
    right: str

    def __post_init__(self):
        if self.left > self.right:
            left, right = self.right, self.left
            object.__setattr__(self, "left", left)
            object.__setattr__(self, "right", right)

    @property
    def tables(self) -> tuple[str, str]:
        return self.left.split(".", 1)[0], self.right.split(".", 1)[0]

    def side(self, table: str) -> str:
        """Attribute name of this edge on ``table``."""
        for q in (self.left, self.right):
            t, a = q.split(".", 1)
            if t == table:
                return a
        raise KeyError(table)

    def __str__(self) -> str:
        return f"{self.left}={self.right}"

    @classmethod
    def parse(cls, obj) -> "JoinPair":
        if isinstance(obj, str):
            left, right = obj.split("=")
            return cls(left.strip(), right.strip())
        return cls(*obj)


@dataclass
class Database:
    tables: dict[str, Table]
    join_graph: list[JoinPair] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        graph = []
        for pair in self.join_graph:
            pair = pair if isinstance(pair, JoinPair) else JoinPair.parse(pair)
            if pair in seen:
                raise SchemaError(f"duplicate join pair {pair}")
            seen.add(pair)
            kinds = [self.resolve(q).kind for q in (pair.left, pair.right)]
            if kinds[0] != kinds[1]:
                raise SchemaError(f"join pair {pair} joins incompatible kinds")
            graph.append(pair)
        self.join_graph = graph

    def resolve(self, qualified: str) -> AttributeMeta:
        table, attr = qualified.split(".", 1)
        if table not in self.tables:
            raise SchemaError(f"unknown relation {table!r}")
        try:
            return self.tables[table].attribute(attr)
        except KeyError as exc:
            raise SchemaError(str(exc)) from None

    def join_index(self, pair: JoinPair) -> int:
        try:
            return self.join_graph.index(pair)
        except ValueError:
            raise SchemaError(f"join {pair} is not in the join graph") from None

    def join_attributes(self) -> set[str]:
        return {q for p in self.join_graph for q in (p.left, p.right)}

    def neighbours(self, table: str) -> list[JoinPair]:
        return [p for p in self.join_graph if table in p.tables]


# --------------------------------------------------------------------------
# CSV / manifest IO


def _parse_value(raw: str, attr: AttributeMeta, row: int):
    if attr.is_numerical:
        try:
            return float(raw)
        except ValueError:
            raise SchemaError(f"row {row}, column {attr.name!r}: cannot parse {raw!r} as a number") from None
    if attr.domain != INFER:
        lookup = {str(v): v for v in attr.domain}
        if raw not in lookup:
            raise SchemaError(f"row {row}, column {attr.name!r}: {raw!r} not in declared domain")
        return lookup[raw]
    return raw


def load_table(path: str | Path, schema: Sequence[AttributeMeta], name: str | None = None) -> Table:
    """Load a CSV with a header row into a :class:`Table`.

    Rows are numbered from 1 (the first data line) in error messages.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        expected = [a.name for a in schema]
        if header != expected:
            raise SchemaError(f"{path}: header {header} does not match schema {expected}")
        values: list[list] = [[] for _ in schema]
        for i, record in enumerate(reader, start=1):
            if len(record) != len(schema):
                raise SchemaError(f"{path}: row {i} has {len(record)} fields, expected {len(schema)}")
            for j, (raw, attr) in enumerate(zip(record, schema)):
                v = _parse_value(raw, attr, i)
                if attr.is_numerical and attr.domain != INFER and not attr.lo <= v <= attr.hi:
                    raise SchemaError(
                        f"{path}: row {i}, column {attr.name!r}: {v} outside [{attr.lo}, {attr.hi}]")
                values[j].append(v)

    attrs, columns = [], {}
    for attr, col in zip(schema, values):
        if attr.is_numerical:
            arr = np.asarray(col, dtype=np.float64)
            if attr.domain == INFER:
                if len(arr) == 0 or arr.min() == arr.max():
                    raise SchemaError(f"{path}: cannot infer a non-degenerate domain for {attr.name!r}")
                attr = AttributeMeta(attr.name, attr.kind, (arr.min(), arr.max()),
                                     attr.integral, attr.range_encodable)
        else:
            arr = np.empty(len(col), dtype=object)
            arr[:] = col
            if attr.domain == INFER:
                if not col:
                    raise SchemaError(f"{path}: cannot infer a domain for empty column {attr.name!r}")
                attr = AttributeMeta(attr.name, attr.kind, sorted(set(col)),
                                     attr.integral, attr.range_encodable)
        attrs.append(attr)
        columns[attr.name] = arr
    return Table(name or path.stem, attrs, columns)


def save_table(table: Table, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([a.name for a in table.attributes])
        cols = []
        for a in table.attributes:
            col = table.columns[a.name]
            if a.is_numerical and a.integral:
                cols.append([str(int(v)) for v in col])
            elif a.is_numerical:
                cols.append([repr(float(v)) for v in col])
            else:
                cols.append([str(v) for v in col])
        writer.writerows(zip(*cols))


def load_database(manifest: str | Path) -> Database:
    """Load a database manifest.

    The manifest lists ``{"name", "path", "schema"}`` per table, where
    ``schema`` points at a JSON sidecar with one attribute object per column,
    plus ``"joins"`` as ``"a.x=b.y"`` strings.
    """
    manifest = Path(manifest)
    spec = json.loads(manifest.read_text())
    root = manifest.parent
    tables = {}
    for entry in spec["tables"]:
        schema_obj = entry["schema"]
        if isinstance(schema_obj, str):
            schema_obj = json.loads((root / schema_obj).read_text())
        schema = [AttributeMeta.from_json(a) for a in schema_obj]
        tables[entry["name"]] = load_table(root / entry["path"], schema, entry["name"])
    return Database(tables, [JoinPair.parse(j) for j in spec.get("joins", [])])


def save_database(db: Database, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, table in db.tables.items():
        save_table(table, directory / f"{name}.csv")
        (directory / f"{name}.schema.json").write_text(
            json.dumps([a.to_json() for a in table.attributes], indent=1) + "\n")
        entries.append({"name": name, "path": f"{name}.csv", "schema": f"{name}.schema.json"})
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps(
        {"tables": entries, "joins": [str(p) for p in db.join_graph]}, indent=1) + "\n")
    return manifest


# --------------------------------------------------------------------------
# Synthetic generation


def _zipf_probs(m: int, skew: float, rng: np.random.Generator) -> np.ndarray:
    weights = 1.0 / np.arange(1, m + 1) ** skew
    weights = weights[rng.permutation(m)]
    return weights / weights.sum()


def _latent_column(n: int, rng: np.random.Generator) -> np.ndarray:
    """Skewed values in [0, 1]: a mixture of a few beta bumps."""
    k = int(rng.integers(1, 4))
    a = rng.uniform(0.5, 6.0, size=k)
    b = rng.uniform(0.5, 6.0, size=k)
    mix = rng.dirichlet(np.ones(k))
    comp = rng.choice(k, size=n, p=mix)
    return rng.beta(a[comp], b[comp])


def generate_synthetic_table(
    rows: int,
    attributes: Sequence[AttributeMeta],
    seed: int,
    correlation: dict[tuple[str, str], float] | None = None,
    name: str = "t",
    skew: float = 1.2,
    max_categories: int = DEFAULT_MAX_CATEGORIES,
) -> Table:
    """Generate a seeded table.

    ``correlation`` maps ``(source, target)`` attribute pairs to a mixing
    coefficient ``c`` in [0, 1]; the target's latent value becomes
    ``c * source + (1 - c) * own``, so ``c = 1`` copies the source ordering.
    Categorical columns follow a Zipf law with exponent ``skew`` over a seeded
    permutation of the domain.
    """
    if rows < 1:
        raise SchemaError(f"rows must be >= 1, got {rows}")
    if not attributes:
        raise SchemaError("attribute list is empty")
    correlation = dict(correlation or {})
    names = [a.name for a in attributes]
    for (src, dst), c in correlation.items():
        if src not in names or dst not in names:
            raise SchemaError(f"correlation references unknown attribute in {(src, dst)}")
        if not 0.0 <= c <= 1.0:
            raise SchemaError(f"correlation coefficient {c} outside [0, 1]")

    rng = np.random.default_rng(seed)
    latent = {a.name: _latent_column(rows, rng) for a in attributes}
    for (src, dst), c in correlation.items():
        latent[dst] = c * latent[src] + (1.0 - c) * latent[dst]

    columns = {}
    for attr in attributes:
        z = latent[attr.name]
        if attr.is_numerical:
            if attr.domain == INFER:
                raise SchemaError(f"synthetic attribute {attr.name!r} needs an explicit domain")
            col = attr.lo + z * (attr.hi - attr.lo)
            if attr.integral:
                col = np.round(col)
            columns[attr.name] = np.clip(col, attr.lo, attr.hi)
        else:
            m = len(attr.domain)
            if m > max_categories:
                raise SchemaError(f"{attr.name!r}: {m} categories exceeds cap {max_categories}")
            # rank by latent value so correlated categoricals follow their source
            probs = _zipf_probs(m, skew, rng)
            cuts = np.cumsum(probs)
            idx = np.minimum(np.searchsorted(cuts, np.argsort(np.argsort(z)) / rows, side="right"), m - 1)
            col = np.empty(rows, dtype=object)
            col[:] = [attr.domain[i] for i in idx]
            columns[attr.name] = col
    return Table(name, list(attributes), columns)


def generate_synthetic_database(spec: dict, seed: int) -> Database:
    """Build a multi-table database from a JSON-style spec.

    ``spec["tables"]`` holds entries ``{"name", "rows", "attributes",
    "correlation"?, "primary_key"?, "foreign_keys"?}``. A primary key column
    is generated as ``0..rows-1``; a foreign key ``{"col": "parent.id"}`` draws
    parent ids from a Zipf law so joins fan out unevenly. Every foreign key
    becomes a join-graph edge.
    """
    tables: dict[str, Table] = {}
    joins: list[JoinPair] = []
    skew = float(spec.get("skew", 1.2))
    for i, entry in enumerate(spec["tables"]):
        name = entry["name"]
        rows = int(entry["rows"])
        attrs = [a if isinstance(a, AttributeMeta) else AttributeMeta.from_json(a)
                 for a in entry.get("attributes", [])]
        corr = {tuple(k.split(",")) if isinstance(k, str) else tuple(k): v
                for k, v in _pairs(entry.get("correlation", {}))}
        table_seed = _mix(seed, i)
        base = generate_synthetic_table(rows, attrs, table_seed, corr, name, skew) if attrs else None
        key_attrs, key_cols = [], {}
        rng = np.random.default_rng(_mix(table_seed, 0x5EED))
        pk = entry.get("primary_key")
        if pk:
            key_attrs.append(AttributeMeta(pk, NUMERICAL, (0, max(rows - 1, 1)), integral=True))
            key_cols[pk] = np.arange(rows, dtype=np.float64)
        for col, ref in entry.get("foreign_keys", {}).items():
            parent, parent_col = ref.split(".", 1)
            if parent not in tables:
                raise SchemaError(f"foreign key {name}.{col} references unknown or later table {parent!r}")
            parent_rows = len(tables[parent])
            probs = _zipf_probs(parent_rows, skew, rng)
            key_attrs.append(AttributeMeta(col, NUMERICAL, (0, max(parent_rows - 1, 1)), integral=True))
            key_cols[col] = rng.choice(parent_rows, size=rows, p=probs).astype(np.float64)
            joins.append(JoinPair(f"{name}.{col}", f"{parent}.{parent_col}"))
        attributes = key_attrs + (base.attributes if base else [])
        columns = {**key_cols, **(base.columns if base else {})}
        if not attributes:
            raise SchemaError(f"table {name!r} has no attributes")
        tables[name] = Table(name, attributes, columns)
    return Database(tables, joins)


def _pairs(obj) -> Iterable[tuple[Any, float]]:
    if isinstance(obj, dict):
        return obj.items()
    return ((tuple(item[:2]), float(item[2])) for item in obj)


def _mix(seed: int, salt: int) -> int:
    return (int(seed) * 1_000_003 + int(salt) * 7919) % (2**63)


def log10_span(values: Iterable[float]) -> float:
    vals = [v for v in values if v > 0]
    return math.log10(max(vals) / min(vals)) if vals else 0.0
