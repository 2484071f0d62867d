"""Exact cardinality of SPJ queries: the label source for every workload."""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from .queries import InFilter, RangeFilter, SPJQuery, validate_query
from .relational import Database, JoinPair, Table


def selection_mask(table: Table, q: SPJQuery) -> np.ndarray:
    """Boolean row mask of ``table`` under the conjunction of q's selections on it."""
    mask = np.ones(len(table), dtype=bool)
    for s in q.selections:
        if s.table != table.name:
            continue
        col = table.columns[s.attribute.split(".", 1)[1]]
        if isinstance(s, RangeFilter):
            mask &= (col >= s.lb) & (col <= s.ub)
        else:
            mask &= np.isin(col, np.fromiter(s.values, dtype=object, count=len(s.values)))
    return mask


def _group_sum(keys: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if len(keys) == 0:
        return keys, weights
    order = np.argsort(keys, kind="stable")
    k = keys[order]
    change = np.ones(len(k), dtype=bool)
    change[1:] = k[1:] != k[:-1]
    starts = np.flatnonzero(change)
    return k[starts], np.add.reduceat(weights[order], starts)


def _lookup(keys: np.ndarray, sums: np.ndarray, probe: np.ndarray) -> np.ndarray:
    out = np.zeros(len(probe), dtype=np.int64)
    if len(keys) == 0 or len(probe) == 0:
        return out
    pos = np.searchsorted(keys, probe)
    pos_c = np.minimum(pos, len(keys) - 1)
    hit = keys[pos_c] == probe
    out[hit] = sums[pos_c[hit]]
    return out


def _is_tree(q: SPJQuery) -> bool:
    if len(q.joins) != len(q.relations) - 1:
        return False
    pairs = {tuple(sorted(j.tables)) for j in q.joins}
    return len(pairs) == len(q.joins) and all(a != b for a, b in pairs)


def exact_cardinality(db: Database, q: SPJQuery) -> int:
    """Exact result size of ``q`` over ``db`` (may be 0).

    Acyclic join sets are counted by passing per-key row counts from the
    leaves of the join tree to its root, which equals the nested-loop count
    without enumerating tuples. Cyclic sets materialise the join.
    """
    validate_query(q, db)
    filtered = {}
    for r in q.relations:
        t = db.tables[r]
        filtered[r] = np.flatnonzero(selection_mask(t, q))
    if len(q.relations) == 1:
        return int(len(filtered[q.relations[0]]))
    if _is_tree(q):
        return _tree_count(db, q, filtered)
    return _materialised_count(db, q, filtered)


def _tree_count(db: Database, q: SPJQuery, filtered: dict[str, np.ndarray]) -> int:
    adj: dict[str, list[tuple[str, JoinPair]]] = defaultdict(list)
    for j in q.joins:
        a, b = j.tables
        adj[a].append((b, j))
        adj[b].append((a, j))
    root = q.relations[0]
    order, parent = [root], {root: None}
    for r in order:
        for nxt, j in adj[r]:
            if nxt not in parent:
                parent[nxt] = (r, j)
                order.append(nxt)
    weights = {r: np.ones(len(filtered[r]), dtype=np.int64) for r in q.relations}
    for child in reversed(order[1:]):
        par, j = parent[child]
        ccol = db.tables[child].columns[j.side(child)][filtered[child]]
        pcol = db.tables[par].columns[j.side(par)][filtered[par]]
        keys, sums = _group_sum(ccol, weights[child])
        weights[par] = weights[par] * _lookup(keys, sums, pcol)
    return int(weights[root].sum())


def _materialised_count(db: Database, q: SPJQuery, filtered: dict[str, np.ndarray]) -> int:
    # bind relations in BFS order so every new relation has a join to the bound set
    order = [q.relations[0]]
    while len(order) < len(q.relations):
        for j in q.joins:
            a, b = j.tables
            if (a in order) != (b in order):
                order.append(b if a in order else a)
                break
    bound = {order[0]: filtered[order[0]]}
    for r in order[1:]:
        conds = [j for j in q.joins if r in j.tables and (set(j.tables) - {r}) <= set(bound)]
        first, rest = conds[0], conds[1:]
        other = next(t for t in first.tables if t != r) if first.tables[0] != first.tables[1] else r
        new_vals = db.tables[r].columns[first.side(r)][filtered[r]]
        order_idx = np.argsort(new_vals, kind="stable")
        sorted_vals = new_vals[order_idx]
        probe = db.tables[other].columns[first.side(other)][bound[other]]
        lo = np.searchsorted(sorted_vals, probe, side="left")
        hi = np.searchsorted(sorted_vals, probe, side="right")
        counts = hi - lo
        src = np.repeat(np.arange(len(probe)), counts)
        offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        picked = filtered[r][order_idx[np.repeat(lo, counts) + offs]]
        bound = {k: v[src] for k, v in bound.items()}
        bound[r] = picked
        for j in rest:
            a, b = j.tables
            keep = (db.tables[a].columns[j.side(a)][bound[a]]
                    == db.tables[b].columns[j.side(b)][bound[b]])
            bound = {k: v[keep] for k, v in bound.items()}
    return int(len(next(iter(bound.values()))))
