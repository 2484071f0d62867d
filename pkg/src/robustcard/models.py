"""MLP and MSCN cardinality estimators.

Both split into a feature extractor (query encoding -> embedding) and a
linear predictor head (embedding -> log cardinality). An optional
discriminator maps the embedding to group probabilities.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from .encoding import FixedEncoding, SetEncoding

CHECKPOINT_FORMAT = "robustcard-checkpoint"
CHECKPOINT_VERSION = 1
ARCHS = ("mlp", "mscn")


@dataclass(frozen=True)
class ModelDims:
    embedding: int = 64
    mlp_hidden: int = 128
    set_hidden: int = 64
    discriminator_hidden: int = 64

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 1:
                raise ValueError(f"{k} must be positive, got {v}")


class ForwardResult(NamedTuple):
    embedding: torch.Tensor
    log_card: torch.Tensor
    group_probs: torch.Tensor | None


class SetBatch(NamedTuple):
    relations: torch.Tensor
    relation_mask: torch.Tensor
    selections: torch.Tensor
    selection_mask: torch.Tensor
    joins: torch.Tensor
    join_mask: torch.Tensor


def _sorted_rows(a: np.ndarray) -> np.ndarray:
    # canonical member order so pooled sums do not depend on input order
    if len(a) < 2:
        return a
    return a[np.lexsort(a.T[::-1])]


def _pad(arrays: Sequence[np.ndarray], width: int, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    n = max(1, max(len(a) for a in arrays))
    out = np.zeros((len(arrays), n, width))
    mask = np.zeros((len(arrays), n, 1))
    for i, a in enumerate(arrays):
        if len(a):
            out[i, :len(a)] = _sorted_rows(a)
            mask[i, :len(a)] = 1.0
    return torch.as_tensor(out, dtype=dtype), torch.as_tensor(mask, dtype=dtype)


def batch_sets(encs: Sequence[SetEncoding], widths: tuple[int, int, int],
               dtype=torch.float32) -> SetBatch:
    rel, rm = _pad([e.relations for e in encs], widths[0], dtype)
    sel, sm = _pad([e.selections for e in encs], widths[1], dtype)
    jn, jm = _pad([e.joins for e in encs], widths[2], dtype)
    return SetBatch(rel, rm, sel, sm, jn, jm)


def batch_fixed(encs: Sequence[FixedEncoding], dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.stack([e.vector for e in encs]), dtype=dtype)


def index_batch(batch, idx):
    if isinstance(batch, SetBatch):
        return SetBatch(*(t[idx] for t in batch))
    return batch[idx]


class Estimator(nn.Module):
    arch: str

    def __init__(self, dims: ModelDims, n_groups: int | None, seed: int):
        super().__init__()
        self.dims = dims
        self.seed = seed
        self.n_groups = n_groups
        self.head = nn.Linear(dims.embedding, 1)
        self.discriminator = None
        if n_groups:
            self.discriminator = nn.Sequential(
                nn.Linear(dims.embedding, dims.discriminator_hidden), nn.ReLU(),
                nn.Linear(dims.discriminator_hidden, n_groups))

    def embed(self, batch) -> torch.Tensor:
        raise NotImplementedError

    def predict_log(self, emb: torch.Tensor) -> torch.Tensor:
        return self.head(emb).squeeze(-1)

    def discriminate(self, emb: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.discriminator(emb), dim=-1)

    def forward(self, batch) -> ForwardResult:
        emb = self.embed(batch)
        probs = self.discriminate(emb) if self.discriminator is not None else None
        return ForwardResult(emb, self.predict_log(emb), probs)

    def partitions(self) -> dict[str, list[nn.Parameter]]:
        """Parameters split into extractor / predictor / discriminator."""
        head = set(map(id, self.head.parameters()))
        disc = set(map(id, self.discriminator.parameters())) if self.discriminator is not None else set()
        parts = {"extractor": [], "predictor": list(self.head.parameters()), "discriminator": []}
        for p in self.parameters():
            if id(p) in disc:
                parts["discriminator"].append(p)
            elif id(p) not in head:
                parts["extractor"].append(p)
        return parts


class MLPEstimator(Estimator):
    arch = "mlp"

    def __init__(self, input_width: int, dims: ModelDims = ModelDims(), n_groups=None, seed=0):
        super().__init__(dims, n_groups, seed)
        self.input_width = input_width
        h = dims.mlp_hidden
        self.extractor = nn.Sequential(
            nn.Linear(input_width, h), nn.ReLU(),
            nn.Linear(h, h), nn.ReLU(),
            nn.Linear(h, dims.embedding), nn.ReLU())

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_width:
            raise ValueError(f"expected width {self.input_width}, got {x.shape[-1]}")
        return self.extractor(x)

    @property
    def input_spec(self):
        return self.input_width


class _SetConv(nn.Sequential):
    def __init__(self, width: int, hidden: int):
        super().__init__(nn.Linear(width, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU())


class MSCNEstimator(Estimator):
    """Multi-set convolutional network.

    Each of the three sets goes through its own shared per-member MLP, is
    average-pooled (empty sets pool to zero), and the pooled vectors are
    concatenated into a final MLP whose last hidden layer is the embedding.
    """

    arch = "mscn"

    def __init__(self, set_widths: tuple[int, int, int], dims: ModelDims = ModelDims(),
                 n_groups=None, seed=0):
        super().__init__(dims, n_groups, seed)
        self.set_widths = tuple(set_widths)
        h = dims.set_hidden
        self.relation_conv = _SetConv(set_widths[0], h)
        self.selection_conv = _SetConv(set_widths[1], h)
        self.join_conv = _SetConv(set_widths[2], h)
        self.final = nn.Sequential(
            nn.Linear(3 * h, h), nn.ReLU(),
            nn.Linear(h, dims.embedding), nn.ReLU())

    @staticmethod
    def _pool(conv: nn.Module, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        summed = (conv(x) * mask).sum(dim=1)
        return summed / mask.sum(dim=1).clamp(min=1.0)

    def pool(self, b: SetBatch) -> torch.Tensor:
        for t, w in zip((b.relations, b.selections, b.joins), self.set_widths):
            if t.shape[-1] != w:
                raise ValueError(f"expected set width {w}, got {t.shape[-1]}")
        return torch.cat([
            self._pool(self.relation_conv, b.relations, b.relation_mask),
            self._pool(self.selection_conv, b.selections, b.selection_mask),
            self._pool(self.join_conv, b.joins, b.join_mask)], dim=-1)

    def embed_pooled(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.final(pooled)

    def embed(self, b: SetBatch) -> torch.Tensor:
        return self.embed_pooled(self.pool(b))

    @property
    def input_spec(self):
        return list(self.set_widths)


def init_model(arch: str, input_spec, dims: ModelDims | None = None, seed: int = 0,
               n_groups: int | None = None) -> Estimator:
    """Seeded model; ``input_spec`` is the fixed width (mlp) or the three set widths (mscn)."""
    dims = dims or ModelDims()
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        if arch == "mlp":
            model = MLPEstimator(int(input_spec), dims, n_groups, seed)
        elif arch == "mscn":
            model = MSCNEstimator(tuple(input_spec), dims, n_groups, seed)
        else:
            raise ValueError(f"unknown arch {arch!r}; expected one of {ARCHS}")
    finally:
        torch.random.set_rng_state(state)
    return model


def collate(model: Estimator, encs, dtype=None):
    dtype = dtype or next(model.parameters()).dtype
    if model.arch == "mlp":
        return batch_fixed(encs, dtype)
    return batch_sets(encs, model.set_widths, dtype)


def forward(model: Estimator, encs) -> ForwardResult:
    """Forward a single encoding or a sequence of them."""
    single = isinstance(encs, (FixedEncoding, SetEncoding))
    if single:
        encs = [encs]
    expected = FixedEncoding if model.arch == "mlp" else SetEncoding
    if not all(isinstance(e, expected) for e in encs):
        raise TypeError(f"{model.arch} expects {expected.__name__} inputs")
    with torch.no_grad():
        res = model(collate(model, encs))
    if single:
        return ForwardResult(res.embedding[0], res.log_card[0],
                             None if res.group_probs is None else res.group_probs[0])
    return res


def clamp_estimate(log_card) -> np.ndarray | float:
    """max(1, exp(log_card)); works on scalars and arrays."""
    arr = np.exp(np.minimum(np.asarray(log_card, dtype=np.float64), 700.0))
    out = np.maximum(1.0, arr)
    return float(out) if out.ndim == 0 else out


def predict_cardinality(model: Estimator, q, encoder) -> float:
    """Estimated cardinality of one query from its full (unmasked) features."""
    enc = encoder.encode(q, model.arch)
    return clamp_estimate(forward(model, enc).log_card.item())


def predict_many(model: Estimator, queries, encoder, batch_size: int = 1024) -> np.ndarray:
    out = []
    model.eval()
    for i in range(0, len(queries), batch_size):
        encs = [encoder.encode(q, model.arch) for q in queries[i:i + batch_size]]
        with torch.no_grad():
            out.append(model(collate(model, encs)).log_card.double().numpy())
    return clamp_estimate(np.concatenate(out)) if out else np.zeros(0)


# --------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: Estimator, path: str | Path, extra: dict | None = None) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": model.arch,
        "input_spec": model.input_spec,
        "dims": asdict(model.dims),
        "n_groups": model.n_groups,
        "seed": model.seed,
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }, path)


def load_checkpoint(path: str | Path) -> tuple[Estimator, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a model checkpoint")
    if blob["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {blob['version']} is newer than supported")
    model = init_model(blob["arch"], blob["input_spec"], ModelDims(**blob["dims"]),
                       blob["seed"], blob["n_groups"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob.get("extra", {})


def count_parameters(model: nn.Module) -> int:
    return sum(math.prod(p.shape) for p in model.parameters())
