"""Acceptance gate.

Each test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion. The statistical checks (8 and 9) print their
measured numbers with ``-s``.
"""

import json
import math
import socket
import threading
import time

import numpy as np
import pytest
import torch

from robustcard.config import DEFAULTS
from robustcard.encoding import QueryEncoder, SetEncoding, factorize_bitmap, unfactorize_bitmap
from robustcard.evaluation import nearest_rank, q_error
from robustcard.losses import dro_weight_update, loss_ce, loss_coral, loss_mse, loss_order
from robustcard.models import ModelDims, collate, forward, init_model, predict_many, save_checkpoint
from robustcard.oracle import exact_cardinality
from robustcard.queries import SPJQuery, query_to_json
from robustcard.relational import (AttributeMeta, Database, generate_synthetic_database,
                                   generate_synthetic_table, save_database)
from robustcard.server import EstimateService, make_server
from robustcard.training import TrainConfig, train
from robustcard.workload import (BY_SELECTION_COUNT, SplitSpec, build_skewed_split, generate_join_query,
                                 generate_single_table_query, generate_workload, is_subcondition,
                                 partition_workload, sample_contrastive_queries)

from oracles import central_difference, nested_loop_count, param_fd_gradients, relative_error

criterion = pytest.mark.criterion


# -- 1 --------------------------------------------------------------------------------


@criterion(1, "oracle agrees with independent nested-loop evaluator")
def test_oracle_equivalence(join_db):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    names = sorted(join_db.tables)
    singles = []
    for _ in range(100):
        t = join_db.tables[names[int(rng.integers(len(names)))]]
        singles.append(generate_single_table_query(t, int(rng.integers(2, len(t.attributes) + 1)), rng))
    closing = {str(p): p for p in join_db.join_graph}
    joins = []
    for _ in range(100):
        q = generate_join_query(join_db, int(rng.integers(1, 3)), rng)
        if len(q.relations) == 3 and rng.random() < 0.5:
            # close the triangle to cover cyclic join sets as well
            q = SPJQuery(q.relations, q.selections, tuple(closing.values()))
        joins.append(q)
    assert {len(q.relations) for q in joins} == {2, 3}
    mismatches = [q for q in singles + joins if exact_cardinality(join_db, q) != nested_loop_count(join_db, q)]
    assert not mismatches
    assert time.perf_counter() - start < 60


# -- 2 --------------------------------------------------------------------------------


@criterion(2, "q-error law on 10 000 random pairs")
def test_q_error_law():
    rng = np.random.default_rng(0)
    c = np.concatenate([rng.integers(0, 5, 2000), np.exp(rng.uniform(-3, 15, 8000))])
    c_hat = np.concatenate([rng.integers(0, 5, 2000), np.exp(rng.uniform(-3, 15, 8000))])
    c_hat[::7] = c[::7]  # plenty of exact ties
    e, swapped = q_error(c, c_hat), q_error(c_hat, c)
    assert len(e) == 10_000
    assert np.all(e >= 1.0)
    assert np.array_equal(e, swapped)
    assert np.array_equal(e == 1.0, np.maximum(c, 1) == np.maximum(c_hat, 1))


# -- 3 --------------------------------------------------------------------------------


def _loss_grad_check(loss_fn, shapes, seed):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    tensors = [torch.tensor(a, requires_grad=True) for a in arrays]
    loss_fn(*tensors).backward()
    worst = 0.0
    for i, t in enumerate(tensors):
        def f(x, i=i):
            args = [torch.tensor(a) for a in arrays]
            args[i] = torch.tensor(x)
            return loss_fn(*args).item()
        worst = max(worst, relative_error(t.grad.numpy(), central_difference(f, arrays[i])))
    return worst


def _model_grad_check(model, batch):
    model.zero_grad()
    model(batch).log_card.sum().backward()
    analytic = [p.grad.numpy().copy() for p in model.parameters()]
    fd = param_fd_gradients(model, lambda: model(batch).log_card.sum().item())
    return max(relative_error(a, f) for a, f in zip(analytic, fd))


@criterion(3, "analytic gradients match central differences")
def test_gradient_suite():
    start = time.perf_counter()
    tiny = ModelDims(embedding=4, mlp_hidden=6, set_hidden=4, discriminator_hidden=3)
    worst = {}
    for seed in range(20):
        labels = torch.as_tensor(np.random.default_rng(seed + 1000).integers(0, 3, size=6))
        checks = {
            "mse": _loss_grad_check(loss_mse, [(8,), (8,)], seed),
            "coral": _loss_grad_check(loss_coral, [(6, 3), (5, 3)], seed),
            "ce": _loss_grad_check(lambda z: loss_ce(torch.softmax(z, dim=1), labels), [(6, 3)], seed),
            "order": _loss_grad_check(loss_order, [(4,), (5, 4)], seed),
        }
        rng = np.random.default_rng(seed)
        mlp = init_model("mlp", 7, tiny, seed=seed).double()
        checks["mlp"] = _model_grad_check(mlp, torch.as_tensor(rng.uniform(size=(4, 7))))
        mscn = init_model("mscn", (3, 6, 2), tiny, seed=seed).double()
        encs = [SetEncoding(rng.uniform(size=(int(rng.integers(1, 3)), 3)),
                            rng.uniform(size=(int(rng.integers(0, 4)), 6)),
                            rng.uniform(size=(int(rng.integers(0, 3)), 2))) for _ in range(4)]
        checks["mscn"] = _model_grad_check(mscn, collate(mscn, encs))
        for k, v in checks.items():
            worst[k] = max(worst.get(k, 0.0), v)
    print("worst relative errors", {k: f"{v:.1e}" for k, v in worst.items()})
    assert all(v <= 1e-4 for v in worst.values())
    assert time.perf_counter() - start < 120


# -- 4 --------------------------------------------------------------------------------


@criterion(4, "group DRO weight dynamics")
def test_dro_weights():
    w = dro_weight_update(np.array([0.5, 0.5]), np.array([1.0, 2.0]), 1.0)
    assert abs(w[0] - 1 / (1 + math.e)) <= 1e-9 and abs(w[1] - math.e / (1 + math.e)) <= 1e-9
    rng = np.random.default_rng(0)
    w = np.full(8, 1 / 8)
    for _ in range(1000):
        w = dro_weight_update(w, rng.exponential(3.0, size=8), float(rng.uniform(0.001, 3)))
        assert abs(w.sum() - 1) <= 1e-9


# -- 5 --------------------------------------------------------------------------------


@criterion(5, "contrastive sub-queries never exceed their template")
def test_contrastive_monotonicity(mixed_db):
    labeled = generate_workload(mixed_db, "single", [2, 3, 4, 5], 50, seed=8)
    rng = np.random.default_rng(1)
    pairs = 0
    for q in labeled:
        for sub in sample_contrastive_queries(q, 5, rng):
            assert is_subcondition(sub, q)
            assert exact_cardinality(mixed_db, sub) <= q.cardinality
            pairs += 1
            if pairs == 1000:
                return
    pytest.fail(f"only {pairs} pairs sampled")


# -- 6 --------------------------------------------------------------------------------


@criterion(6, "factorized bitmap round-trips for every subset, m <= 12")
def test_bitmap_lossless():
    for s in (1, 4, 8):
        for m in range(1, 13):
            dom = [f"c{i}" for i in range(m)]
            for bits in range(1, 2 ** m):
                subset = {dom[k] for k in range(m) if bits >> k & 1}
                assert unfactorize_bitmap(factorize_bitmap(subset, dom, s), dom, s) == subset


# -- 7 --------------------------------------------------------------------------------


@criterion(7, "masking p=0 and DRO with one group reproduce ERM exactly")
def test_degenerate_equivalence(mixed_db):
    w = generate_workload(mixed_db, "single", [2, 3, 4], 20, seed=3)
    one_group = [q.with_label(q.cardinality, group=1, template=q.template) for q in w]
    enc = QueryEncoder(mixed_db)
    dims = ModelDims(embedding=16, mlp_hidden=32, set_hidden=16)

    def trajectory(arch, algorithm, **kw):
        spec = enc.fixed_width if arch == "mlp" else enc.set_widths
        model = init_model(arch, spec, dims, seed=5)
        cfg = TrainConfig(algorithm=algorithm, epochs=10, batch_size=16, seed=5, patience=100, **kw)
        r = train(model, one_group, mixed_db, cfg, encoder=enc, record_trajectory=True)
        assert len(r.trajectory) == 11
        return r.trajectory

    def identical(a, b):
        return all(np.array_equal(x, y) for sa, sb in zip(a, b) for x, y in zip(sa, sb))

    for arch in ("mlp", "mscn"):
        erm = trajectory(arch, "erm")
        assert identical(erm, trajectory(arch, "masking", mask_prob=0.0))
        assert identical(erm, trajectory(arch, "dro"))


# -- 8 --------------------------------------------------------------------------------


@criterion(8, "ERM sanity on a 2-attribute table")
def test_erm_sanity():
    start = time.perf_counter()
    attrs = [AttributeMeta("A", "numerical", (0, 1000)), AttributeMeta("B", "numerical", (0, 1000))]
    table = generate_synthetic_table(10_000, attrs, seed=0, correlation={("A", "B"): 0.7}, name="s")
    db = Database({"s": table})
    queries = generate_workload(db, "single", [2], 500, seed=1)
    assert len(queries) == 500
    order = np.random.default_rng(2).permutation(500)
    train_q = [queries[i] for i in order[:450]]
    test_q = [queries[i] for i in order[450:]]
    enc = QueryEncoder(db)
    model = init_model("mlp", enc.fixed_width, seed=0)
    x = collate(model, [enc.encode_fixed(q) for q in train_q])
    y = torch.log(torch.tensor([float(q.cardinality) for q in train_q]))

    def train_loss():
        with torch.no_grad():
            return loss_mse(model(x).log_card, y).item()

    initial = train_loss()
    train(model, train_q, db, TrainConfig(epochs=80, batch_size=32, seed=0), encoder=enc)
    final = train_loss()
    errs = q_error([q.cardinality for q in test_q], predict_many(model, test_q, enc))
    median = nearest_rank(errs, 50)
    print(f"loss {initial:.3f} -> {final:.3f} (ratio {final / initial:.3f}); test median q-error {median:.2f}")
    assert final <= 0.25 * initial
    assert median <= 10
    assert time.perf_counter() - start < 300


# -- 9 --------------------------------------------------------------------------------

OOD_EPOCHS = 30


@pytest.mark.slow
@criterion(9, "robust strategies match or beat ERM at the 95% tail under workload shift")
def test_ood_smoke():
    start = time.perf_counter()
    db = generate_synthetic_database(DEFAULTS["data"], seed=0)
    workload = generate_workload(db, "single", range(2, 11), 2000, seed=1)
    workload = partition_workload(workload, BY_SELECTION_COUNT)
    enc = QueryEncoder(db)
    wins = 0
    for seed in range(5):
        train_q, test_q = build_skewed_split(
            workload, SplitSpec("selections<=6", (0.2, 0.8), test_fraction=0.1, seed=seed))
        labels = [q.cardinality for q in test_q]
        tails = {}
        for algo in ("erm", "coral", "orderemb"):
            model = init_model("mlp", enc.fixed_width, seed=seed)
            train(model, train_q, db, TrainConfig(algorithm=algo, epochs=OOD_EPOCHS, seed=seed), encoder=enc)
            tails[algo] = nearest_rank(q_error(labels, predict_many(model, test_q, enc)), 95)
        won = min(tails["coral"], tails["orderemb"]) <= tails["erm"]
        wins += won
        print(f"seed {seed}: 95% q-error " + ", ".join(f"{k} {v:.2f}" for k, v in tails.items())
              + (" (robust <= erm)" if won else ""))
    elapsed = time.perf_counter() - start
    print(f"{wins}/5 seeds, {elapsed:.0f}s")
    assert wins >= 3
    assert elapsed <= 30 * 60


# -- 10 -------------------------------------------------------------------------------


@criterion(10, "MSCN output invariant to set member order")
def test_mscn_permutation_invariance(join_db):
    enc = QueryEncoder(join_db)
    model = init_model("mscn", enc.set_widths, seed=0)
    rng = np.random.default_rng(0)
    for i in range(100):
        e = enc.encode_set(generate_join_query(join_db, int(rng.integers(0, 3)), i))
        perm = SetEncoding(*(a[rng.permutation(len(a))] for a in (e.relations, e.selections, e.joins)))
        a, b = forward(model, e), forward(model, perm)
        assert torch.equal(a.log_card, b.log_card)


# -- 11 -------------------------------------------------------------------------------


def _session(checkpoint, manifest, lines):
    srv = make_server(EstimateService.from_files(checkpoint, manifest), port=0)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    try:
        with socket.create_connection(srv.server_address[:2], timeout=30) as sock, \
                sock.makefile("rw") as f:
            replies = []
            for line in lines:
                f.write(line + "\n")
                f.flush()
                replies.append(json.loads(f.readline()))
        # the server keeps accepting after the session
        with socket.create_connection(srv.server_address[:2], timeout=30) as sock, \
                sock.makefile("rw") as f:
            f.write(lines[0] + "\n")
            f.flush()
            assert json.loads(f.readline()) == replies[0]
    finally:
        srv.shutdown()
        srv.server_close()
    return replies


@criterion(11, "serve protocol answers valid and malformed requests")
def test_serve_protocol(join_db, tmp_path):
    manifest = save_database(join_db, tmp_path / "db")
    enc = QueryEncoder(join_db)
    save_checkpoint(init_model("mscn", enc.set_widths, seed=1), tmp_path / "m.pt", {"chunk_size": 8})
    valid = [json.dumps(query_to_json(generate_join_query(join_db, i % 3, i))) for i in range(100)]
    malformed = ["{", "null", "[1, 2]", '{"relations": []}', '{"relations": ["zzz"]}',
                 '{"relations": ["a"], "selections": [{"attribute": "a.x", "lb": 5, "ub": 1}]}',
                 '{"relations": ["a"], "selections": [{"attribute": "a.c", "lb": 0, "ub": 1}]}',
                 '{"relations": ["a", "b"]}', "ÿþ", '{"relations": "a"}']
    lines, kinds = [], []
    for i, v in enumerate(valid):
        lines.append(v)
        kinds.append("ok")
        if i % 10 == 9:
            lines.append(malformed[i // 10])
            kinds.append("bad")
    first = _session(tmp_path / "m.pt", manifest, lines)
    for kind, reply in zip(kinds, first):
        if kind == "ok":
            assert set(reply) == {"cardinality"} and reply["cardinality"] >= 1
        else:
            assert set(reply) == {"error"}
    assert len(first) == 110
    assert _session(tmp_path / "m.pt", manifest, lines) == first
