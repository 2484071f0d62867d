"""Query featurisation for the two estimator families.

* fixed-length vectors (MLP): per attribute two normalised range slots, or
  factorized-bitmap chunks for categorical IN filters, then one bit per
  join pair of the schema;
* set encodings (MSCN): one vector per relation, selection and join.

An attribute without a selection encodes as "no restriction" (full range or
all-ones bitmap). Zero is reserved for masked features.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .queries import InFilter, RangeFilter, SPJQuery, validate_query
from .relational import AttributeMeta, Database, SchemaError

DEFAULT_CHUNK = 8
RANGE_TAG = (1.0, 0.0)
IN_TAG = (0.0, 1.0)


def factorize_bitmap(values, domain: Sequence, s: int = DEFAULT_CHUNK) -> list[int]:
    """Split the membership bitmap of ``values`` over ``domain`` into s-bit integers.

    Bit k is set iff ``domain[k]`` is in ``values``; bits are read
    most-significant-first inside each chunk and the last chunk is padded
    with zeros on the right.

    >>> factorize_bitmap({"a", "c"}, list("abcdefgh"), 4)
    [10, 0]
    """
    if s < 1:
        raise ValueError(f"chunk length must be >= 1, got {s}")
    values = set(values)
    if not values <= set(domain):
        raise SchemaError(f"values {sorted(values - set(domain), key=str)} not in domain")
    m = len(domain)
    chunks = []
    for start in range(0, m, s):
        acc = 0
        for k in range(start, start + s):
            acc = (acc << 1) | (1 if k < m and domain[k] in values else 0)
        chunks.append(acc)
    return chunks


def unfactorize_bitmap(chunks: Sequence[int], domain: Sequence, s: int = DEFAULT_CHUNK) -> set:
    out = set()
    for c, chunk in enumerate(chunks):
        for b in range(s):
            k = c * s + b
            if k < len(domain) and chunk >> (s - 1 - b) & 1:
                out.add(domain[k])
    return out


def n_chunks(m: int, s: int) -> int:
    return math.ceil(m / s)


@dataclass(frozen=True)
class FixedEncoding:
    vector: np.ndarray
    # (start, stop) slot spans of the selections present in the query
    selection_slots: tuple[tuple[int, int], ...] = ()

    def __eq__(self, other):
        return (isinstance(other, FixedEncoding) and self.selection_slots == other.selection_slots
                and np.array_equal(self.vector, other.vector))


@dataclass(frozen=True)
class SetEncoding:
    relations: np.ndarray   # (n_rel, width_rel)
    selections: np.ndarray  # (n_sel, width_sel)
    joins: np.ndarray       # (n_join, width_join)

    def __eq__(self, other):
        return (isinstance(other, SetEncoding)
                and all(np.array_equal(a, b) for a, b in zip(
                    (self.relations, self.selections, self.joins),
                    (other.relations, other.selections, other.joins))))


class QueryEncoder:
    """Encoding layout derived from a database schema.

    The layout (slot offsets, widths) depends only on the schema, so every
    query over the same database encodes to vectors of the same width.
    """

    def __init__(self, db: Database, chunk_size: int = DEFAULT_CHUNK, validate: bool = True):
        self.db = db
        self.chunk_size = chunk_size
        self.validate = validate
        self.table_names = list(db.tables)
        self.attributes: list[tuple[str, AttributeMeta]] = [
            (f"{t}.{a.name}", a) for t in self.table_names for a in db.tables[t].attributes]
        self.attr_index = {q: i for i, (q, _) in enumerate(self.attributes)}
        self.offsets: dict[str, tuple[int, int]] = {}
        pos = 0
        for q, a in self.attributes:
            w = self._slot_width(a)
            self.offsets[q] = (pos, pos + w)
            pos += w
        self.selection_width = pos
        self.n_joins = len(db.join_graph)
        self.fixed_width = pos + self.n_joins
        self._default = np.zeros(self.selection_width, dtype=np.float64)
        for q, a in self.attributes:
            start, stop = self.offsets[q]
            self._default[start:stop] = self._full(a)
        lit = max([2] + [self._slot_width(a) for _, a in self.attributes])
        self.literal_width = lit
        self.set_widths = (len(self.table_names), len(self.attributes) + 2 + lit, max(self.n_joins, 1))

    def _slot_width(self, a: AttributeMeta) -> int:
        if a.is_numerical or a.range_encodable:
            return 2
        return n_chunks(len(a.domain), self.chunk_size)

    def _full(self, a: AttributeMeta) -> np.ndarray:
        if a.is_numerical or a.range_encodable:
            return np.array([0.0, 1.0])
        return self._bitmap_slots(set(a.domain), a)

    def _bitmap_slots(self, values, a: AttributeMeta) -> np.ndarray:
        s = self.chunk_size
        return np.asarray(factorize_bitmap(values, a.domain, s), dtype=np.float64) / (2 ** s - 1)

    def literal(self, sel, a: AttributeMeta) -> np.ndarray:
        """Normalised literal slots of one selection."""
        if isinstance(sel, RangeFilter):
            span = a.hi - a.lo
            return np.array([(sel.lb - a.lo) / span, (sel.ub - a.lo) / span])
        if a.range_encodable:
            # IN set as the span of its domain positions; exact for equality and contiguous sets
            pos = [a.domain.index(v) for v in sel.values]
            denom = max(len(a.domain) - 1, 1)
            return np.array([min(pos) / denom, max(pos) / denom])
        return self._bitmap_slots(sel.values, a)

    def encode_fixed(self, q: SPJQuery) -> FixedEncoding:
        if self.validate:
            validate_query(q, self.db)
        vec = np.empty(self.fixed_width, dtype=np.float64)
        vec[:self.selection_width] = self._default
        vec[self.selection_width:] = 0.0
        spans = []
        for sel in q.selections:
            if sel.attribute not in self.offsets:
                raise SchemaError(f"attribute {sel.attribute} not in schema")
            start, stop = self.offsets[sel.attribute]
            vec[start:stop] = self.literal(sel, self.attributes[self.attr_index[sel.attribute]][1])
            spans.append((start, stop))
        for j in q.joins:
            vec[self.selection_width + self.db.join_index(j)] = 1.0
        return FixedEncoding(vec, tuple(spans))

    def encode_set(self, q: SPJQuery) -> SetEncoding:
        if self.validate:
            validate_query(q, self.db)
        n_rel, w_sel, w_join = self.set_widths
        rel = np.zeros((len(q.relations), n_rel))
        for i, r in enumerate(q.relations):
            rel[i, self.table_names.index(r)] = 1.0
        sel = np.zeros((len(q.selections), w_sel))
        n_attr = len(self.attributes)
        for i, s in enumerate(q.selections):
            if s.attribute not in self.attr_index:
                raise SchemaError(f"attribute {s.attribute} not in schema")
            a_idx = self.attr_index[s.attribute]
            sel[i, a_idx] = 1.0
            sel[i, n_attr:n_attr + 2] = RANGE_TAG if isinstance(s, RangeFilter) else IN_TAG
            lit = self.literal(s, self.attributes[a_idx][1])
            sel[i, n_attr + 2:n_attr + 2 + len(lit)] = lit
        joins = np.zeros((len(q.joins), w_join))
        for i, j in enumerate(q.joins):
            joins[i, self.db.join_index(j)] = 1.0
        return SetEncoding(rel, sel, joins)

    def encode(self, q: SPJQuery, arch: str):
        return self.encode_fixed(q) if arch == "mlp" else self.encode_set(q)


def encode_fixed(q: SPJQuery, db: Database, chunk_size: int = DEFAULT_CHUNK) -> FixedEncoding:
    return QueryEncoder(db, chunk_size).encode_fixed(q)


def encode_set(q: SPJQuery, db: Database, chunk_size: int = DEFAULT_CHUNK) -> SetEncoding:
    return QueryEncoder(db, chunk_size).encode_set(q)


def mask_selections(enc, p: float, seed: int | np.random.Generator):
    """Drop each selection with probability ``p``.

    Fixed encodings get the dropped selection's slots zeroed; set encodings
    lose the selection's vector. Relation and join features are untouched.
    ``p == 0`` returns the input object itself.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"mask probability {p} outside [0, 1]")
    if p == 0.0:
        return enc
    rng = np.random.default_rng(seed)
    if isinstance(enc, FixedEncoding):
        drop = rng.random(len(enc.selection_slots)) < p
        if not drop.any():
            return enc
        vec = enc.vector.copy()
        kept = []
        for (start, stop), d in zip(enc.selection_slots, drop):
            if d:
                vec[start:stop] = 0.0
            else:
                kept.append((start, stop))
        return FixedEncoding(vec, tuple(kept))
    drop = rng.random(len(enc.selections)) < p
    return replace(enc, selections=enc.selections[~drop])


def encoding_to_json(enc) -> str:
    """Debug serialisation; not a stable format."""
    if isinstance(enc, FixedEncoding):
        return json.dumps({"vector": enc.vector.tolist(), "selection_slots": enc.selection_slots})
    return json.dumps({"relations": enc.relations.tolist(), "selections": enc.selections.tolist(),
                       "joins": enc.joins.tolist()})
