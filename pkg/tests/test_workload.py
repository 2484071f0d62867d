import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustcard.oracle import exact_cardinality
from robustcard.queries import (InFilter, RangeFilter, SPJQuery, query_from_json, query_to_json,
                                read_workload, write_workload)
from robustcard.relational import (AttributeMeta, Database, JoinPair, SchemaError, generate_synthetic_database,
                                   generate_synthetic_table)
from robustcard.workload import (BY_JOIN_COUNT, BY_SELECTION_COUNT, BY_TEMPLATE, SplitSpec, WorkloadError,
                                 build_skewed_split, generate_join_query, generate_single_table_query,
                                 generate_workload, group_sizes, is_subcondition, partition_workload,
                                 sample_contrastive_queries, simple_rule)


def _ten_attr_table(rows=2000):
    attrs = [AttributeMeta(f"a{i}", "numerical", (0, 1000)) for i in range(10)]
    return generate_synthetic_table(rows, attrs, seed=0, name="f")


def test_single_table_query_counts():
    t = _ten_attr_table()
    q = generate_single_table_query(t, 10, seed=1)
    assert q.n_selections == 10
    assert len({s.attribute for s in q.selections}) == 10
    assert q.template == "sel10"


def test_single_table_ranges_inside_domain():
    t = _ten_attr_table()
    for seed in range(50):
        q = generate_single_table_query(t, 2, seed=seed)
        for s in q.selections:
            a = t.attribute(s.attribute.split(".")[1])
            assert a.lo <= s.lb <= s.ub <= a.hi


def test_single_table_query_errors():
    t = _ten_attr_table(100)
    for d in (1, 11):
        with pytest.raises(WorkloadError):
            generate_single_table_query(t, d, seed=0)


def test_single_table_query_deterministic(mixed_table):
    assert generate_single_table_query(mixed_table, 4, 9) == generate_single_table_query(mixed_table, 4, 9)


def test_in_filter_contains_valid_values(mixed_table):
    for seed in range(30):
        q = generate_single_table_query(mixed_table, 5, seed)
        for s in q.selections:
            if isinstance(s, InFilter):
                a = mixed_table.attribute(s.attribute.split(".")[1])
                assert 1 <= len(s.values) <= len(a.domain)
                assert s.values <= set(a.domain)


def test_generated_queries_are_nonempty_for_sampled_row(mixed_db, mixed_table):
    # every predicate contains the sampled row, so the label is at least 1
    for seed in range(30):
        q = generate_single_table_query(mixed_table, 5, seed)
        assert exact_cardinality(mixed_db, q) >= 1


@pytest.mark.slow
def test_labels_span_orders_of_magnitude():
    attrs = [AttributeMeta(f"a{i}", "numerical", (0, 1000)) for i in range(10)]
    t = generate_synthetic_table(50_000, attrs, seed=0, name="f",
                                 correlation={("a0", "a1"): 0.8, ("a2", "a3"): 0.6})
    db = Database({"f": t})
    rng = np.random.default_rng(0)
    cards = [exact_cardinality(db, generate_single_table_query(t, 5, rng)) for _ in range(2000)]
    cards = np.array([c for c in cards if c > 0])
    assert math.log10(cards.max() / cards.min()) >= 4


def test_join_query_t0(join_db):
    q = generate_join_query(join_db, 0, seed=2)
    assert len(q.relations) == 1 and q.joins == ()


def test_join_query_on_chain():
    spec = {"tables": [
        {"name": "r1", "rows": 50, "primary_key": "id",
         "attributes": [{"name": "x", "kind": "numerical", "domain": [0, 1]}]},
        {"name": "r2", "rows": 50, "primary_key": "id", "foreign_keys": {"r1_id": "r1.id"},
         "attributes": [{"name": "y", "kind": "numerical", "domain": [0, 1]}]},
        {"name": "r3", "rows": 50, "foreign_keys": {"r2_id": "r2.id"},
         "attributes": [{"name": "z", "kind": "numerical", "domain": [0, 1]}]},
    ]}
    db = generate_synthetic_database(spec, seed=0)
    for seed in range(10):
        q = generate_join_query(db, 2, seed)
        assert q.relations == ("r1", "r2", "r3")
        assert len(q.joins) == 2
        exact_cardinality(db, q)  # validates connectivity
    with pytest.raises(WorkloadError):
        generate_join_query(db, 3, 0)


def test_join_query_never_selects_join_keys(join_db):
    keys = join_db.join_attributes()
    for seed in range(40):
        q = generate_join_query(join_db, 2, seed)
        assert not {s.attribute for s in q.selections} & keys


def test_join_workload_labels_positive():
    spec = {"tables": [
        {"name": "p", "rows": 300, "primary_key": "id",
         "attributes": [{"name": "x", "kind": "numerical", "domain": [0, 10]},
                        {"name": "c", "kind": "categorical", "domain": ["u", "v", "w"]}]},
        {"name": "q", "rows": 300, "primary_key": "id", "foreign_keys": {"p_id": "p.id"},
         "attributes": [{"name": "y", "kind": "numerical", "domain": [0, 10]}]},
        {"name": "r", "rows": 300, "primary_key": "id", "foreign_keys": {"q_id": "q.id"},
         "attributes": [{"name": "z", "kind": "numerical", "domain": [0, 10]}]},
        {"name": "s", "rows": 300, "foreign_keys": {"r_id": "r.id", "p_id": "p.id"},
         "attributes": [{"name": "w", "kind": "numerical", "domain": [0, 10]}]},
    ]}
    db = generate_synthetic_database(spec, seed=3)
    w = generate_workload(db, "join", [0, 1, 2, 3], 100, seed=5)
    assert w and all(q.cardinality >= 1 for q in w)
    assert {q.n_joins for q in w} == {0, 1, 2, 3}
    assert len(set(w)) == len(w)


def test_generate_workload_is_deterministic(mixed_db):
    a = generate_workload(mixed_db, "single", [2, 3], 30, seed=4)
    b = generate_workload(mixed_db, "single", [2, 3], 30, seed=4)
    assert a == b and [q.cardinality for q in a] == [q.cardinality for q in b]


# -- grouping and splits -------------------------------------------------------


def _q(n_sel, template=None):
    sels = tuple(RangeFilter(f"f.a{i}", 0, 1) for i in range(n_sel))
    return SPJQuery(("f",), sels, template=template)


def test_partition_by_selection_count():
    w = partition_workload([_q(2), _q(2), _q(5)], BY_SELECTION_COUNT)
    assert sorted(group_sizes(w).values()) == [1, 2]
    assert {q.group for q in w} == {1, 2}


def test_partition_by_join_count(join_db):
    qs = [SPJQuery(("a",))]
    edges = list(join_db.join_graph)
    qs.append(SPJQuery(("a", "b"), joins=(edges[0],)))
    qs.append(SPJQuery(("a", "b", "c"), joins=tuple(edges[:2])))
    qs.append(SPJQuery(("a", "b", "c"), joins=tuple(edges)))
    w = partition_workload(qs, BY_JOIN_COUNT)
    assert len({q.group for q in w}) == 4


def test_partition_by_template():
    qs = [_q(2, "x"), _q(3, "y"), _q(4, "x")]
    w = partition_workload(qs, BY_TEMPLATE)
    assert w[0].group == w[2].group != w[1].group
    with pytest.raises(WorkloadError):
        partition_workload([_q(2)], BY_TEMPLATE)


def _pool():
    # 1000 simple (2 selections) and 1000 complex (8 selections), all distinct
    def query(i, n_sel):
        rest = tuple(RangeFilter(f"f.a{j}", 0, 1) for j in range(1, n_sel))
        return SPJQuery(("f",), (RangeFilter("f.a0", 0, i),) + rest)

    qs = [query(i, n) for i in range(1000) for n in (2, 8)]
    return partition_workload(qs, BY_SELECTION_COUNT)


def test_split_fifty_fifty():
    pool = _pool()
    train, test = build_skewed_split(pool, SplitSpec(ratio=(0.5, 0.5), seed=0))
    assert len(test) == 200
    rule = simple_rule("selections<=6")
    n_simple = sum(rule(q) for q in train)
    assert n_simple == len(train) - n_simple == 900
    assert not set(train) & set(test)


def test_split_twenty_eighty():
    train, _ = build_skewed_split(_pool(), SplitSpec(ratio=(0.2, 0.8), seed=0))
    rule = simple_rule("selections<=6")
    n_simple = sum(rule(q) for q in train)
    assert 4 * n_simple == len(train) - n_simple


def test_split_deterministic():
    pool = _pool()
    spec = SplitSpec(ratio=(0.2, 0.8), seed=3)
    assert build_skewed_split(pool, spec) == build_skewed_split(pool, spec)


def test_split_errors():
    with pytest.raises(WorkloadError):
        SplitSpec(ratio=(0.3, 0.3))
    only_simple = partition_workload([_q(2), _q(3)] * 5, BY_SELECTION_COUNT)
    with pytest.raises(WorkloadError):
        build_skewed_split(only_simple, SplitSpec())
    with pytest.raises(WorkloadError):
        simple_rule("templates<=1")


# -- partial order ---------------------------------------------------------------


def _range_q(lb, ub):
    return SPJQuery(("f",), (RangeFilter("f.A", lb, ub), RangeFilter("f.B", 0, 1)))


def test_is_subcondition_examples():
    q = _range_q(10, 50)
    assert is_subcondition(q, q)
    assert is_subcondition(_range_q(20, 50), q)
    assert not is_subcondition(_range_q(5, 50), q)
    other_attrs = SPJQuery(("f",), (RangeFilter("f.A", 20, 30),))
    assert not is_subcondition(other_attrs, q)


def test_contrastive_queries_examples():
    q = SPJQuery(("f",), (RangeFilter("f.A", 10, 50),))
    subs = sample_contrastive_queries(q, 5, seed=0)
    assert len(subs) == 5
    for s in subs:
        assert is_subcondition(s, q)
        sel = s.selections[0]
        assert sel.lb == 10 or sel.ub == 50
    with pytest.raises(WorkloadError):
        sample_contrastive_queries(SPJQuery(("f",)), 3, 0)


def test_contrastive_in_filter_keeps_nonempty_subset():
    q = SPJQuery(("f",), (InFilter("f.c", frozenset("abcde")),))
    for s in sample_contrastive_queries(q, 50, seed=1):
        vals = s.selections[0].values
        assert vals and vals < q.selections[0].values


def _selection_strategy():
    rng_bounds = st.tuples(st.floats(0, 100), st.floats(0, 100)).map(sorted)
    ranges = rng_bounds.map(lambda b: ("r", b[0], b[1]))
    sets = st.sets(st.sampled_from("abcdefgh"), min_size=1).map(lambda v: ("i", frozenset(v)))
    return st.one_of(ranges, sets)


@st.composite
def queries(draw):
    picks = draw(st.lists(_selection_strategy(), min_size=1, max_size=5))
    sels = []
    for i, p in enumerate(picks):
        if p[0] == "r":
            sels.append(RangeFilter(f"f.a{i}", p[1], p[2]))
        else:
            sels.append(InFilter(f"f.a{i}", p[1]))
    return SPJQuery(("f",), tuple(sels))


@settings(max_examples=200, deadline=None)
@given(q=queries(), seed=st.integers(0, 2 ** 32 - 1))
def test_partial_order_properties(q, seed):
    q1 = sample_contrastive_queries(q, 1, seed)[0]
    q2 = sample_contrastive_queries(q1, 1, seed + 1)[0]
    assert is_subcondition(q, q)
    assert is_subcondition(q1, q)
    assert is_subcondition(q2, q1)
    assert is_subcondition(q2, q)  # transitivity
    if is_subcondition(q, q1):  # antisymmetry
        assert q == q1


def test_contrastive_monotone_on_labeled_table(mixed_db, mixed_table):
    rng = np.random.default_rng(0)
    for _ in range(40):
        q = generate_single_table_query(mixed_table, int(rng.integers(2, 6)), rng)
        c = exact_cardinality(mixed_db, q)
        for s in sample_contrastive_queries(q, 5, rng):
            assert exact_cardinality(mixed_db, s) <= c


# -- wire format ------------------------------------------------------------------


def test_workload_roundtrip(tmp_path, join_db):
    w = generate_workload(join_db, "join", [0, 1, 2], 20, seed=0)
    w = partition_workload(w, BY_JOIN_COUNT)
    write_workload(w, tmp_path / "w.jsonl")
    back = read_workload(tmp_path / "w.jsonl")
    assert back == w
    assert [(q.cardinality, q.group, q.template) for q in back] == [(q.cardinality, q.group, q.template)
                                                                   for q in w]


@pytest.mark.parametrize("bad", [
    {},
    {"relations": "a"},
    {"relations": []},
    {"relations": ["a"], "selections": [{"attribute": "a.x", "lb": 2, "ub": 1}]},
    {"relations": ["a"], "selections": [{"attribute": "a.x"}]},
    {"relations": ["a"], "joins": ["nonsense"]},
])
def test_query_from_json_rejects(bad):
    with pytest.raises(SchemaError):
        query_from_json(bad)


def test_query_json_roundtrip_in_filter():
    q = SPJQuery(("a", "b"), (InFilter("a.c", frozenset({"p", "q"})), RangeFilter("b.y", 1.5, 2.0)),
                 (JoinPair("a.id", "b.a_id"),))
    assert query_from_json(query_to_json(q)) == q
