"""Losses and small numeric primitives shared by the training strategies.

All cardinalities are handled as natural logarithms.
"""

from __future__ import annotations

import numpy as np
import torch

CE_EPS = 1e-12


def loss_mse(preds: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and true log cardinalities."""
    if preds.numel() == 0:
        raise ValueError("empty batch")
    if preds.shape != labels.shape:
        raise ValueError(f"shape mismatch {tuple(preds.shape)} vs {tuple(labels.shape)}")
    return ((preds - labels) ** 2).mean()


def covariance(x: torch.Tensor) -> torch.Tensor:
    """Unbiased feature covariance of a (batch, d) matrix."""
    centred = x - x.mean(dim=0, keepdim=True)
    return centred.T @ centred / (x.shape[0] - 1)


def loss_coral(emb_i: torch.Tensor, emb_j: torch.Tensor) -> torch.Tensor:
    """Squared Frobenius distance of the two batches' covariances, scaled by 1/(4 d^2)."""
    if emb_i.shape[0] < 2 or emb_j.shape[0] < 2:
        raise ValueError("covariance needs at least 2 rows per batch")
    if emb_i.shape[1] != emb_j.shape[1]:
        raise ValueError("embedding widths differ")
    d = emb_i.shape[1]
    diff = covariance(emb_i) - covariance(emb_j)
    return (diff ** 2).sum() / (4 * d * d)


def loss_ce(group_probs: torch.Tensor, group_labels: torch.Tensor) -> torch.Tensor:
    """Summed cross entropy. ``group_labels`` are class indices or one-hot rows."""
    if group_labels.dim() == 2:
        group_labels = group_labels.argmax(dim=1)
    picked = group_probs.gather(1, group_labels.long().view(-1, 1)).squeeze(1)
    return -torch.log(picked.clamp(min=CE_EPS)).sum()


def loss_order(emb_q: torch.Tensor, emb_subs: torch.Tensor) -> torch.Tensor:
    """Order-embedding penalty of ``k`` sub-condition embeddings against their anchor.

    Sums ``||max(sub - anchor, 0)||^2`` over the subs: zero exactly when every
    sub embedding is coordinate-wise below the anchor.
    """
    if emb_subs.dim() == 1:
        emb_subs = emb_subs.unsqueeze(0)
    if emb_subs.shape[-1] != emb_q.shape[-1]:
        raise ValueError("embedding widths differ")
    return (torch.relu(emb_subs - emb_q) ** 2).sum()


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.scale * grad, None


def grad_reverse(x: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    """Identity forward; multiplies the incoming gradient by ``-scale``."""
    return _GradReverse.apply(x, scale)


def mixup_pair(enc_i, enc_j, label_i, label_j, xi: float):
    """Convex mix of two encodings and of their log labels.

    Works on numpy arrays, tensors or floats alike.
    """
    if isinstance(xi, float) and not 0.0 <= xi <= 1.0:
        raise ValueError(f"xi {xi} outside [0, 1]")
    shape_i, shape_j = tuple(getattr(enc_i, "shape", ())), tuple(getattr(enc_j, "shape", ()))
    if shape_i != shape_j:
        raise ValueError(f"encoding widths differ: {shape_i} vs {shape_j}")
    return xi * enc_i + (1 - xi) * enc_j, xi * label_i + (1 - xi) * label_j


def mixup_sampling_rows(log_labels: np.ndarray, rows: np.ndarray, sigma: float) -> np.ndarray:
    """Rows of the label-kernel partner distribution, self excluded.

    Normalised in log space, so rows whose kernel values all underflow still
    put their mass on the nearest labels instead of becoming NaN.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    log_labels = np.asarray(log_labels, dtype=np.float64)
    if len(log_labels) < 2:
        raise ValueError("need at least 2 queries to pick mixing partners")
    rows = np.asarray(rows)
    logits = -((log_labels[rows, None] - log_labels[None, :]) ** 2) / sigma ** 2
    logits[np.arange(len(rows)), rows] = -np.inf
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def mixup_sampling_matrix(log_labels: np.ndarray, sigma: float) -> np.ndarray:
    """Row-stochastic matrix P[i, j] proportional to exp(-(l_i - l_j)^2 / sigma^2), P[i, i] = 0."""
    return mixup_sampling_rows(log_labels, np.arange(len(log_labels)), sigma)


def dro_weight_update(omega: np.ndarray, batch_losses: np.ndarray, step: float) -> np.ndarray:
    """Exponentiated-gradient ascent of group weights, renormalised onto the simplex."""
    omega = np.asarray(omega, dtype=np.float64)
    losses = np.asarray(batch_losses, dtype=np.float64)
    if omega.shape != losses.shape:
        raise ValueError("omega and losses differ in length")
    logw = np.log(omega) + step * losses
    logw -= logw.max()
    w = np.exp(logw)
    return w / w.sum()
