"""Contrastive, dual-contrastive and cross-entropy objectives.

All losses take unit-norm representations (``Tensor`` or array) and return a
:class:`LossValue` whose ``total`` stays on the tape for backpropagation.
Contrastive sets are formed within the batch: for anchor ``i`` the
contrastive set is every other index and the positives are those sharing
``i``'s label. Anchors without positives are skipped and excluded from the
mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ObjectiveError(ValueError):
    pass


@dataclass
class Relations:
    """Per-anchor contrastive sets and positive sets as boolean N x N masks."""

    contrast: np.ndarray
    positive: np.ndarray

    @property
    def n(self) -> int:
        return self.contrast.shape[0]

    def A(self, i: int) -> list[int]:
        return np.flatnonzero(self.contrast[i]).tolist()

    def P(self, i: int) -> list[int]:
        return np.flatnonzero(self.positive[i]).tolist()


def build_relations(labels) -> Relations:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size == 0:
        raise ObjectiveError("labels must be nonempty")
    contrast = ~np.eye(y.size, dtype=bool)
    return Relations(contrast, contrast & (y[:, None] == y[None, :]))


def pairing_relations(pairing) -> Relations:
    """Relations whose only positive for ``i`` is its augmented partner ``j(i)``."""
    j = np.asarray(pairing, dtype=np.int64).reshape(-1)
    n = j.size
    if n < 2:
        raise ObjectiveError("need at least 2 examples")
    if np.any(j == np.arange(n)) or np.any(j[j] != np.arange(n)) or j.min() < 0 or j.max() >= n:
        raise ObjectiveError("pairing must be a fixed-point-free involution")
    positive = np.zeros((n, n), dtype=bool)
    positive[np.arange(n), j] = True
    return Relations(~np.eye(n, dtype=bool), positive)


def halves_pairing(n: int) -> np.ndarray:
    """j(i) = i + n/2 mod n: the partner of a row in a batch stacked with its copy."""
    if n % 2:
        raise ObjectiveError("halves pairing needs an even batch")
    return (np.arange(n) + n // 2) % n


@dataclass
class LossValue:
    total: Tensor
    per_anchor: np.ndarray
    skipped: int = 0

    @property
    def value(self) -> float:
        return self.total.item()

    def __float__(self) -> float:
        return self.value


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else ad.as_tensor(x)


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ObjectiveError(f"temperature must be positive, got {tau}")


def _contrastive(anchors: Tensor, others: Tensor, rel: Relations, tau: float) -> LossValue:
    """Mean over anchors of (1/|P_i|) sum_p -log softmax_{a in A_i}(s_ia / tau)[p].

    Similarity ``s_ia = anchors[i] . others[a]``.
    """
    _check_tau(tau)
    n = anchors.shape[0]
    if others.shape[0] != n or rel.n != n:
        raise ObjectiveError("representations and relations disagree on batch size")
    n_pos = rel.positive.sum(axis=1)
    active = n_pos > 0
    skipped = int(n - active.sum())
    if not active.any():
        return LossValue(ad.as_tensor(0.0), np.zeros(n), skipped)

    sim = ad.scalar_mul(ad.matmul(anchors, ad.transpose_last(others)), 1.0 / tau)
    logp = ad.log_softmax_rows(ad.apply_mask(sim, rel.contrast))
    weights = np.zeros((n, n))
    weights[active] = rel.positive[active] / n_pos[active, None]
    per_anchor = -(weights * logp.data).sum(axis=1)
    # total = -(sum of weighted log-probs) / (#active), expressed as a mean over n*n entries
    scale = -float(n * n) / active.sum()
    total = ad.scalar_mul(ad.mean_all(ad.mul_elem(logp, ad.as_tensor(weights))), scale)
    return LossValue(total, per_anchor, skipped)


def loss_self(Z, pairing, tau: float) -> LossValue:
    """Self-supervised contrastive loss with augmented partner ``pairing[i]``."""
    Z = _t(Z)
    if Z.shape[0] < 2:
        raise ObjectiveError("loss_self needs N >= 2")
    return _contrastive(Z, Z, pairing_relations(pairing), tau)


def loss_sup(Z, relations: Relations, tau: float) -> LossValue:
    """Supervised contrastive loss over feature representations."""
    Z = _t(Z)
    return _contrastive(Z, Z, relations, tau)


def loss_z(Z, theta_star, relations: Relations, tau: float) -> LossValue:
    """Anchor z_i against classifier rows theta*_a."""
    return _contrastive(_t(Z), _t(theta_star), relations, tau)


def loss_theta(Z, theta_star, relations: Relations, tau: float) -> LossValue:
    """Anchor theta*_i against feature rows z_a."""
    return _contrastive(_t(theta_star), _t(Z), relations, tau)


def loss_dual(Z, theta_star, relations: Relations, tau: float) -> LossValue:
    lz = loss_z(Z, theta_star, relations, tau)
    lt = loss_theta(Z, theta_star, relations, tau)
    return LossValue(ad.add(lz.total, lt.total), lz.per_anchor + lt.per_anchor, lz.skipped)


def class_logits(Z, theta_full) -> Tensor:
    """logits[i, k] = theta[i, k] . z_i, shape B x K."""
    Z, theta_full = _t(Z), _t(theta_full)
    b, k, d = theta_full.shape
    if Z.shape != (b, d):
        raise ObjectiveError(f"Z shape {Z.shape} does not match theta {theta_full.shape}")
    return ad.reshape(ad.matmul(theta_full, ad.reshape(Z, (b, d, 1))), (b, k))


def cross_entropy(logits, labels) -> LossValue:
    """Mean of -log softmax(logits_i)[y_i]."""
    logits = _t(logits)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, k = logits.shape
    if y.size != b:
        raise ObjectiveError("labels and logits disagree on batch size")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ObjectiveError(f"label out of range [0, {k})")
    logp = ad.log_softmax_rows(logits)
    onehot = np.zeros((b, k))
    onehot[np.arange(b), y] = 1.0
    per = -(onehot * logp.data).sum(axis=1)
    total = ad.scalar_mul(ad.mean_all(ad.mul_elem(logp, ad.as_tensor(onehot))), -float(k))
    return LossValue(total, per, 0)


def loss_ce_modified(Z, theta_full, labels) -> LossValue:
    """Cross-entropy over the per-example classifier logits theta_i^k . z_i (no temperature)."""
    return cross_entropy(class_logits(Z, theta_full), labels)


def loss_overall(ce: LossValue, dual: LossValue, lam: float) -> LossValue:
    if lam < 0:
        raise ObjectiveError(f"lambda must be non-negative, got {lam}")
    if ce.per_anchor.shape != dual.per_anchor.shape:
        raise ObjectiveError("per-anchor breakdowns of the two terms differ in length")
    total = ad.add(ce.total, ad.scalar_mul(dual.total, lam))
    return LossValue(total, ce.per_anchor + lam * dual.per_anchor, dual.skipped)


def predict(Z, theta_full) -> np.ndarray:
    """argmax_k theta[i, k] . z_i; ties go to the lowest class id."""
    z = Z.data if isinstance(Z, Tensor) else np.asarray(Z, dtype=np.float64)
    th = theta_full.data if isinstance(theta_full, Tensor) else np.asarray(theta_full, dtype=np.float64)
    return np.argmax(np.einsum("bkd,bd->bk", th, z), axis=1)
