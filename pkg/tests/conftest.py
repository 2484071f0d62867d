import numpy as np
import pytest

from robustcard.relational import (AttributeMeta, Database, Table, generate_synthetic_database,
                                   generate_synthetic_table)

JOIN_SPEC = {
    "skew": 1.1,
    "tables": [
        {"name": "a", "rows": 1000, "primary_key": "id",
         "attributes": [{"name": "x", "kind": "numerical", "domain": [0, 100]},
                        {"name": "c", "kind": "categorical", "domain": list("pqrstu")}]},
        {"name": "b", "rows": 1000, "primary_key": "id", "foreign_keys": {"a_id": "a.id"},
         "attributes": [{"name": "y", "kind": "numerical", "domain": [0, 50]},
                        {"name": "k", "kind": "categorical", "domain": ["k0", "k1", "k2", "k3"]}]},
        {"name": "c", "rows": 1000, "foreign_keys": {"b_id": "b.id", "a_id": "a.id"},
         "attributes": [{"name": "z", "kind": "numerical", "domain": [-10, 10]},
                        {"name": "w", "kind": "numerical", "domain": [0, 1]}]},
    ],
}


@pytest.fixture(scope="session")
def join_db() -> Database:
    return generate_synthetic_database(JOIN_SPEC, seed=11)


@pytest.fixture(scope="session")
def mixed_table() -> Table:
    attrs = [AttributeMeta("n0", "numerical", (0, 10)),
             AttributeMeta("n1", "numerical", (-5, 5)),
             AttributeMeta("n2", "numerical", (0, 1000), integral=True),
             AttributeMeta("cat", "categorical", tuple(f"v{i}" for i in range(10))),
             AttributeMeta("col", "categorical", ("red", "green", "blue"))]
    return generate_synthetic_table(3000, attrs, seed=5, correlation={("n0", "n1"): 0.7}, name="m")


@pytest.fixture(scope="session")
def mixed_db(mixed_table) -> Database:
    return Database({"m": mixed_table})


@pytest.fixture
def tiny_table() -> Table:
    return Table("t", [AttributeMeta("A", "numerical", (0, 10))],
                 {"A": np.array([1.0, 2.0, 3.0, 4.0])})


# -- acceptance summary ---------------------------------------------------------

_criteria: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _criteria[number] = (title, "PASS" if rep.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, verdict = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d} {verdict}  {title}")
