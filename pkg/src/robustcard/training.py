"""Training loop for ERM and the six robust strategies.

Every strategy shares the same skeleton: Adam per parameter partition with
L2 penalty, per-epoch exponential learning-rate decay, and a stop once the
epoch loss has not improved for a few epochs. Strategies differ in how a
step builds its batch and loss:

========== ============== =================================================
algorithm  pipeline       step
========== ============== =================================================
erm        plain          MSE on a shuffled batch
coral      group-based    two groups drawn by size, MSE on both + CORAL term
dann       group-based    MSE + discriminator CE through gradient reversal
dro        group-based    group-weighted MSE, weights by exponentiated ascent
orderemb   sampling-based MSE + order penalty on k sub-condition queries
mixup      sampling-based MSE on label-kernel mixed pairs only
masking    masking-based  MSE with selections dropped at rate p
========== ============== =================================================
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .encoding import QueryEncoder, mask_selections
from .losses import (dro_weight_update, grad_reverse, loss_ce, loss_coral, loss_mse,
                     mixup_sampling_rows)
from .models import Estimator, collate, index_batch
from .queries import SPJQuery
from .relational import Database
from .seeds import derive_seed
from .workload import sample_contrastive_queries

log = logging.getLogger(__name__)

ALGORITHMS = ("erm", "coral", "dann", "dro", "orderemb", "mixup", "masking")
GROUP_BASED = ("coral", "dann", "dro")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    algorithm: str = "erm"
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 80
    weight_decay: float = 1e-4
    lr_decay: float = 0.85
    coral_weight: float = 0.5
    order_weight: float = 0.5
    dann_ce_weight: float | None = None  # None: 1e-2 for mlp, 1e-3 for mscn
    dro_step: float = 0.01
    mixup_alpha: float = 0.5
    mixup_sigma: float = 0.1
    mask_prob: float = 0.1
    contrastive_k: int = 5
    seed: int = 0
    patience: int = 5
    tolerance: float = 1e-5

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        for name in ("lr", "batch_size", "epochs", "lr_decay", "mixup_alpha", "mixup_sigma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.dro_step <= 0 or self.coral_weight < 0 or self.order_weight < 0:
            raise ValueError("dro_step must be positive and loss weights non-negative")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError(f"mask_prob {self.mask_prob} outside [0, 1]")
        if self.contrastive_k < 1:
            raise ValueError("contrastive_k must be >= 1")

    def ce_weight(self, arch: str) -> float:
        if self.dann_ce_weight is not None:
            return self.dann_ce_weight
        return 1e-2 if arch == "mlp" else 1e-3

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainedModel:
    model: Estimator
    history: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)
    trajectory: list[list[np.ndarray]] | None = None


def has_converged(losses: Sequence[float], patience: int, tol: float) -> bool:
    """True when the last ``patience`` epochs brought no relative improvement above ``tol``."""
    if len(losses) <= patience:
        return False
    best_before = min(losses[:-patience])
    recent = min(losses[-patience:])
    return recent > best_before - tol * max(abs(best_before), 1e-12)


class _Trainer:
    def __init__(self, model: Estimator, queries: Sequence[SPJQuery], encoder: QueryEncoder,
                 cfg: TrainConfig, record_trajectory: bool):
        self.model = model
        self.queries = list(queries)
        self.encoder = encoder
        # sub-condition queries inherit validity from their anchor
        self.sub_encoder = copy.copy(encoder)
        self.sub_encoder.validate = False
        self.cfg = cfg
        self.arch = model.arch
        self.n = len(self.queries)
        self.dtype = next(model.parameters()).dtype
        self.record = record_trajectory

        self.encs = [encoder.encode(q, self.arch) for q in self.queries]
        self.log_labels_np = np.log(np.array([q.cardinality for q in self.queries], dtype=np.float64))
        self.log_labels = torch.as_tensor(self.log_labels_np, dtype=self.dtype)
        if self.arch == "mlp":
            self.X = collate(model, self.encs)

        groups = [q.group for q in self.queries]
        if cfg.algorithm in GROUP_BASED:
            if any(g is None for g in groups):
                raise TrainingError(f"{cfg.algorithm} needs a group label on every training query")
            keys = sorted(set(groups))
            self.group_ids = np.array([keys.index(g) for g in groups])
            self.m = len(keys)
            self.members = [np.flatnonzero(self.group_ids == g) for g in range(self.m)]
            self.omega = np.full(self.m, 1.0 / self.m)
        if cfg.algorithm == "coral" and self.m < 2:
            raise TrainingError("coral needs at least two groups")
        if cfg.algorithm == "dann":
            if model.discriminator is None:
                raise TrainingError("dann needs a model built with n_groups")
            if model.n_groups < self.m:
                raise TrainingError(f"discriminator has {model.n_groups} outputs for {self.m} groups")

        self.batch_rng = np.random.default_rng(derive_seed(cfg.seed, "batches"))
        self.aux_rng = np.random.default_rng(derive_seed(cfg.seed, cfg.algorithm))

        parts = model.partitions()
        self.optimizers = [torch.optim.Adam(ps, lr=cfg.lr, weight_decay=cfg.weight_decay)
                           for name, ps in parts.items() if ps]
        self.schedulers = [torch.optim.lr_scheduler.ExponentialLR(o, gamma=cfg.lr_decay)
                           for o in self.optimizers]

    # -- batches -----------------------------------------------------------

    def inputs(self, idx: np.ndarray, mask_p: float = 0.0):
        if mask_p > 0.0:
            encs = [mask_selections(self.encs[i], mask_p, self.aux_rng) for i in idx]
            return collate(self.model, encs)
        if self.arch == "mlp":
            return self.X[torch.as_tensor(idx)]
        return collate(self.model, [self.encs[i] for i in idx])

    def epoch_batches(self) -> list[np.ndarray]:
        perm = self.batch_rng.permutation(self.n)
        b = self.cfg.batch_size
        return [perm[i:i + b] for i in range(0, self.n, b)]

    def apply(self, loss: torch.Tensor) -> None:
        for o in self.optimizers:
            o.zero_grad(set_to_none=True)
        loss.backward()
        for o in self.optimizers:
            o.step()

    # -- strategies --------------------------------------------------------

    def epoch_plain(self, mask_p: float = 0.0):
        main = []
        for idx in self.epoch_batches():
            res = self.model(self.inputs(idx, mask_p))
            loss = loss_mse(res.log_card, self.log_labels[idx])
            self.apply(loss)
            main.append(loss.item())
        return main, []

    def epoch_coral(self):
        cfg, main, aux = self.cfg, [], []
        sizes = np.array([len(m) for m in self.members], dtype=np.float64)
        p = sizes / sizes.sum()
        steps = max(1, math.ceil(self.n / cfg.batch_size))
        for _ in range(steps):
            gi, gj = self.batch_rng.choice(self.m, size=2, replace=False, p=p)
            bi = self.batch_rng.choice(self.members[gi], size=min(cfg.batch_size, len(self.members[gi])),
                                       replace=False)
            bj = self.batch_rng.choice(self.members[gj], size=min(cfg.batch_size, len(self.members[gj])),
                                       replace=False)
            ri, rj = self.model(self.inputs(bi)), self.model(self.inputs(bj))
            mse = loss_mse(ri.log_card, self.log_labels[bi]) + loss_mse(rj.log_card, self.log_labels[bj])
            if len(bi) >= 2 and len(bj) >= 2:
                align = loss_coral(ri.embedding, rj.embedding)
            else:
                align = torch.zeros((), dtype=self.dtype)
            self.apply(mse + cfg.coral_weight * align)
            main.append(mse.item() / 2)
            aux.append(align.item())
        return main, aux

    def epoch_dann(self):
        w = self.cfg.ce_weight(self.arch)
        main, aux = [], []
        for idx in self.epoch_batches():
            emb = self.model.embed(self.inputs(idx))
            mse = loss_mse(self.model.predict_log(emb), self.log_labels[idx])
            probs = self.model.discriminate(grad_reverse(emb))
            ce = loss_ce(probs, torch.as_tensor(self.group_ids[idx]))
            self.apply(mse + w * ce)
            main.append(mse.item())
            aux.append(ce.item() / len(idx))
        return main, aux

    def epoch_dro(self):
        main, aux = [], []
        for idx in self.epoch_batches():
            res = self.model(self.inputs(idx))
            y = self.log_labels[idx]
            g = self.group_ids[idx]
            terms, losses = [], np.zeros(self.m)
            for k in range(self.m):
                sel = g == k
                if not sel.any():
                    continue  # absent group: loss 0 for the weight update
                if sel.all():
                    lk = loss_mse(res.log_card, y)
                else:
                    t = torch.as_tensor(np.flatnonzero(sel))
                    lk = loss_mse(res.log_card[t], y[t])
                terms.append((k, lk))
                losses[k] = lk.item()
            self.omega = dro_weight_update(self.omega, losses, self.cfg.dro_step)
            loss = torch.stack([torch.as_tensor(self.omega[k], dtype=self.dtype) * lk
                                for k, lk in terms]).sum()
            self.apply(loss)
            main.append(loss_mse(res.log_card.detach(), y).item())
            aux.append(float(max(losses)))
        return main, aux

    def epoch_orderemb(self):
        cfg, main, aux = self.cfg, [], []
        for idx in self.epoch_batches():
            subs, owner = [], []
            for pos, i in enumerate(idx):
                q = self.queries[i]
                if not q.selections:
                    continue
                for s in sample_contrastive_queries(q, cfg.contrastive_k, self.aux_rng):
                    subs.append(self.sub_encoder.encode(s, self.arch))
                    owner.append(pos)
            res = self.model(self.inputs(idx))
            mse = loss_mse(res.log_card, self.log_labels[idx])
            if subs:
                sub_emb = self.model.embed(collate(self.model, subs))
                anchor = res.embedding[torch.as_tensor(owner)]
                n_anchor = len(set(owner))
                order = (torch.relu(sub_emb - anchor) ** 2).sum() / n_anchor
            else:
                order = torch.zeros((), dtype=self.dtype)
            self.apply(mse + cfg.order_weight * order)
            main.append(mse.item())
            aux.append(order.item())
        return main, aux

    def epoch_mixup(self):
        cfg, main = self.cfg, []
        for idx in self.epoch_batches():
            probs = mixup_sampling_rows(self.log_labels_np, idx, cfg.mixup_sigma)
            u = self.aux_rng.random(len(idx))
            partner = np.minimum((probs.cumsum(axis=1) < u[:, None]).sum(axis=1), self.n - 1)
            xi_np = self.aux_rng.beta(cfg.mixup_alpha, cfg.mixup_alpha, size=len(idx))
            xi = torch.as_tensor(xi_np, dtype=self.dtype)
            y = xi * self.log_labels[idx] + (1 - xi) * self.log_labels[partner]
            if self.arch == "mlp":
                x = xi[:, None] * self.inputs(idx) + (1 - xi[:, None]) * self.inputs(partner)
                pred = self.model.predict_log(self.model.embed(x))
            else:
                pooled = xi[:, None] * self.model.pool(self.inputs(idx)) \
                    + (1 - xi[:, None]) * self.model.pool(self.inputs(partner))
                pred = self.model.predict_log(self.model.embed_pooled(pooled))
            loss = loss_mse(pred, y)
            self.apply(loss)
            main.append(loss.item())
        return main, []

    def run_epoch(self):
        algo = self.cfg.algorithm
        if algo == "erm":
            return self.epoch_plain()
        if algo == "masking":
            return self.epoch_plain(self.cfg.mask_prob)
        return getattr(self, f"epoch_{algo}")()

    def snapshot(self) -> list[np.ndarray]:
        return [p.detach().clone().numpy() for p in self.model.parameters()]

    def fit(self) -> TrainedModel:
        cfg = self.cfg
        history: list[dict] = []
        trajectory = [self.snapshot()] if self.record else None
        start = time.perf_counter()
        self.model.train()
        for epoch in range(1, cfg.epochs + 1):
            lr = self.optimizers[0].param_groups[0]["lr"]
            main, aux = self.run_epoch()
            for s in self.schedulers:
                s.step()
            entry = {
                "epoch": epoch,
                "main_loss": float(np.mean(main)),
                "aux_loss": float(np.mean(aux)) if aux else None,
                "lr": lr,
                "wall_time": time.perf_counter() - start,
            }
            history.append(entry)
            if trajectory is not None:
                trajectory.append(self.snapshot())
            log.debug("epoch %d main=%.4f aux=%s", epoch, entry["main_loss"], entry["aux_loss"])
            if not math.isfinite(entry["main_loss"]):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            if has_converged([h["main_loss"] for h in history], cfg.patience, cfg.tolerance):
                log.info("converged after %d epochs", epoch)
                break
        self.model.eval()
        return TrainedModel(self.model, history, time.perf_counter() - start, cfg.to_json(), trajectory)


def train(model: Estimator, queries: Sequence[SPJQuery], db: Database, cfg: TrainConfig,
          encoder: QueryEncoder | None = None, record_trajectory: bool = False) -> TrainedModel:
    """Train ``model`` in place on labeled ``queries`` with the strategy in ``cfg``."""
    if not queries:
        raise TrainingError("empty training workload")
    if any(q.cardinality is None or q.cardinality < 1 for q in queries):
        raise TrainingError("every training query needs a cardinality >= 1")
    encoder = encoder or QueryEncoder(db)
    return _Trainer(model, queries, encoder, cfg, record_trajectory).fit()
