"""Experiment configuration: one JSON document, overridable from the command line."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .training import TrainConfig
from .workload import SplitSpec

CONFIG_ENV = "ROBUSTCARD_CONFIG"


def _forest_like(rows: int = 50_000, n_attrs: int = 10) -> dict:
    attrs = [{"name": f"a{i}", "kind": "numerical", "domain": [0, 1000]} for i in range(n_attrs)]
    return {
        "skew": 1.2,
        "tables": [{
            "name": "forest",
            "rows": rows,
            "attributes": attrs,
            "correlation": [["a0", "a1", 0.8], ["a2", "a3", 0.6], ["a4", "a5", 0.9]],
        }],
    }


DEFAULTS: dict = {
    "seed": 0,
    "paths": {
        "database": "out/db",
        "workload": "out/workload.jsonl",
        "runs": "out/runs",
        "reports": "out/reports",
    },
    "data": _forest_like(),
    "workload": {"kind": "single", "table": "forest", "counts": list(range(2, 11)), "per_count": 2000},
    "group_rule": "by-selection-count",
    "split": {"simple_def": "selections<=6", "ratio": [0.2, 0.8], "test_fraction": 0.1},
    "arch": "mlp",
    "chunk_size": 8,
    "validation_fraction": 0.1,
    "train": {"algorithm": "erm"},
    "grid": {"lr": [1e-3], "batch_size": [64], "epochs": [80]},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("data",):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_ratio(text: str) -> list[float]:
    """``"20/80"`` or ``"0.2/0.8"`` -> ``[0.2, 0.8]``."""
    a, b = (float(x) for x in text.split("/"))
    total = a + b
    return [a / total, b / total]


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: dict | None = None) -> "ExperimentConfig":
        path = path or os.environ.get(CONFIG_ENV)
        raw = copy.deepcopy(DEFAULTS)
        base = Path.cwd()
        if path:
            path = Path(path)
            raw = _merge(raw, json.loads(path.read_text()))
            base = path.resolve().parent
        if overrides:
            raw = _merge(raw, overrides)
        cfg = cls(raw, base)
        cfg.check()
        return cfg

    def check(self) -> None:
        grid = self.raw["grid"]
        for k in ("lr", "batch_size", "epochs"):
            if not grid.get(k):
                raise ValueError(f"grid list {k!r} must be non-empty")
        self.split_spec()
        self.train_config()

    def path(self, key: str) -> Path:
        p = Path(self.raw["paths"][key])
        return p if p.is_absolute() else self.base_dir / p

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def arch(self) -> str:
        return self.raw["arch"]

    @property
    def manifest(self) -> Path:
        return self.path("database") / "manifest.json"

    def split_spec(self, seed: int | None = None) -> SplitSpec:
        s = self.raw["split"]
        return SplitSpec(s["simple_def"], tuple(s["ratio"]), float(s["test_fraction"]),
                         self.seed if seed is None else seed)

    def train_config(self, **kw) -> TrainConfig:
        return TrainConfig(**{**self.raw["train"], **kw})

    def grid_points(self) -> list[dict]:
        g = self.raw["grid"]
        return [{"lr": lr, "batch_size": bs, "epochs": ep}
                for lr in g["lr"] for bs in g["batch_size"] for ep in g["epochs"]]
