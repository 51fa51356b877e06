"""Mutual-information bound diagnostic, 2-D projection, attention scores, SVG export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import objectives as obj


class AnalysisError(ValueError):
    pass


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def psi(theta_star_i, z_j) -> float:
    """exp(theta*_i . z_j)."""
    return math.exp(float(np.dot(_arr(theta_star_i), _arr(z_j))))


def phi(i: int, j: int, Z, theta_star) -> float:
    """Symmetrised similarity (psi(i, j) + psi(j, i)) / 2."""
    Z, T = _arr(Z), _arr(theta_star)
    return 0.5 * (psi(T[i], Z[j]) + psi(T[j], Z[i]))


def phi_matrix(Z, theta_star) -> np.ndarray:
    psi_m = np.exp(_arr(theta_star) @ _arr(Z).T)
    return 0.5 * (psi_m + psi_m.T)


def _check_joint(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2:
        raise AnalysisError("joint must be a 2-D matrix")
    if np.any(P < 0) or not np.all(np.isfinite(P)):
        raise AnalysisError("joint entries must be finite and non-negative")
    if abs(P.sum() - 1.0) > 1e-12:
        raise AnalysisError(f"joint sums to {P.sum()!r}, not 1")
    return P


def exact_mi(joint) -> float:
    """Mutual information in nats of a discrete joint p(x_i, y_j)."""
    P = _check_joint(joint)
    px = P.sum(axis=1, keepdims=True)
    py = P.sum(axis=0, keepdims=True)
    nz = P > 0
    ratio = np.ones_like(P)
    ratio[nz] = P[nz] / (px * py)[nz]
    return float(max((P[nz] * np.log(ratio[nz])).sum(), 0.0))


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


@dataclass
class BoundReport:
    mi: float
    epsilon: float
    l_dual: float
    rhs: float
    slack: float
    holds: bool
    M: np.ndarray = field(repr=False)
    joint: np.ndarray = field(repr=False)

    def lines(self) -> list[str]:
        return [
            f"mi: {self.mi!r}",
            f"epsilon: {self.epsilon!r}",
            f"l_dual: {self.l_dual!r}",
            f"rhs: {self.rhs!r}",
            f"slack: {self.slack!r}",
            f"holds: {str(self.holds).lower()}",
        ]

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n", encoding="utf-8")


def bound_joint(Z, theta_star) -> np.ndarray:
    """p(x_i, y_j) = (1/N) phi(i, j) / sum_t phi(i, t)."""
    ph = phi_matrix(Z, theta_star)
    n = ph.shape[0]
    return ph / ph.sum(axis=1, keepdims=True) / n


def check_mi_bound(Z, theta_star, labels) -> BoundReport:
    """Evaluate MI >= log N - epsilon * L_dual on the full set, temperature 1.

    Reports the slack; it does not assert the inequality.
    """
    Z, T = _arr(Z), _arr(theta_star)
    n = Z.shape[0]
    if n < 2:
        raise AnalysisError("need N >= 2")
    if T.shape != Z.shape:
        raise AnalysisError("Z and theta_star shapes differ")
    P = bound_joint(Z, T)
    mi = exact_mi(P)
    eps = float(np.diag(P).min())
    l_dual = obj.loss_dual(Z, T, obj.build_relations(labels), 1.0).value
    rhs = math.log(n) - eps * l_dual
    slack = mi - rhs
    cond = P / P.sum(axis=1, keepdims=True)
    M = (cond / P.sum(axis=0, keepdims=True)).sum(axis=1)
    return BoundReport(mi, eps, l_dual, rhs, slack, slack >= -1e-12, M, P)


# ---------------------------------------------------------------------------
# attention export
# ---------------------------------------------------------------------------

@dataclass
class AttentionMap:
    tokens: list[str]
    scores: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["token", "score"])
            for tok, s in zip(self.tokens, self.scores):
                w.writerow([tok, repr(float(s))])


def attention_scores(H_row, cls_feature, sentence_positions: Sequence[int], tokens=None) -> AttentionMap:
    """Closeness of each sentence token to [CLS], min-max scaled to [0, 1].

    score_t = (max d - d_t) / (max d - min d) with d_t = ||H[t] - cls||;
    all 0.5 when every distance is equal.
    """
    positions = list(sentence_positions)
    if not positions:
        raise AnalysisError("empty sentence")
    H = _arr(H_row)
    dist = np.linalg.norm(H[positions] - _arr(cls_feature)[None, :], axis=1)
    hi, lo = dist.max(), dist.min()
    scores = (hi - dist) / (hi - lo) if hi > lo else np.full(len(positions), 0.5)
    names = list(tokens) if tokens is not None else [str(p) for p in positions]
    return AttentionMap(names, scores)


# ---------------------------------------------------------------------------
# projection and plotting
# ---------------------------------------------------------------------------

def project_2d(points) -> np.ndarray:
    """PCA onto the top two covariance eigenvectors with a fixed sign convention."""
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise AnalysisError("points must be an M x d matrix")
    m, d = X.shape
    if d < 2:
        raise AnalysisError("need d >= 2")
    if m == 0:
        raise AnalysisError("need at least one point")
    Xc = X - X.mean(axis=0)
    if m == 1:
        return np.zeros((1, 2))
    cov = Xc.T @ Xc / (m - 1)
    vals, vecs = np.linalg.eigh(cov)
    top = vecs[:, np.argsort(vals)[::-1][:2]]
    for c in range(2):
        nz = np.flatnonzero(np.abs(top[:, c]) > 1e-12)
        if nz.size and top[nz[0], c] < 0:
            top[:, c] = -top[:, c]
    return Xc @ top


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
CANVAS_W, CANVAS_H, MARGIN = 800, 600, 0.05


def emit_svg_scatter(coords, class_ids, kinds, path) -> Path:
    """Circles for features, triangles for classifiers, one colour per class."""
    C = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    class_ids = list(class_ids)
    kinds = list(kinds)
    if not (len(C) == len(class_ids) == len(kinds)):
        raise AnalysisError("coords, class_ids and kinds differ in length")
    bad = set(kinds) - {"feature", "classifier"}
    if bad:
        raise AnalysisError(f"unknown point kinds {sorted(bad)}")

    mx, my = MARGIN * CANVAS_W, MARGIN * CANVAS_H
    if len(C):
        lo, hi = C.min(axis=0), C.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        px = mx + (C[:, 0] - lo[0]) / span[0] * (CANVAS_W - 2 * mx)
        py = CANVAS_H - my - (C[:, 1] - lo[1]) / span[1] * (CANVAS_H - 2 * my)
    marks = []
    for i, (kind, c) in enumerate(zip(kinds, class_ids)):
        color = PALETTE[int(c) % len(PALETTE)]
        x, y = px[i], py[i]
        if kind == "feature":
            marks.append(f'<circle cx="{x:.3f}" cy="{y:.3f}" r="4" fill="{color}"/>')
        else:
            marks.append(
                f'<path class="triangle" d="M {x:.3f} {y - 6:.3f} L {x - 5.5:.3f} {y + 4:.3f} '
                f'L {x + 5.5:.3f} {y + 4:.3f} Z" fill="{color}" stroke="black" stroke-width="0.5"/>'
            )
    svg = "\n".join(
        [
            '<?xml version="1.0" encoding="UTF-8"?>',
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS_W}" height="{CANVAS_H}" '
            f'viewBox="0 0 {CANVAS_W} {CANVAS_H}">',
            f'<rect width="{CANVAS_W}" height="{CANVAS_H}" fill="white"/>',
            *marks,
            "</svg>",
            "",
        ]
    )
    path = Path(path)
    try:
        path.write_text(svg, encoding="utf-8")
    except OSError as exc:
        raise AnalysisError(f"cannot write {path}: {exc}") from exc
    return path


def write_representation_csv(coords, class_ids, kinds, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "kind", "x", "y"])
        for i, ((x, y), c, k) in enumerate(zip(np.asarray(coords).reshape(-1, 2), class_ids, kinds)):
            w.writerow([i, int(c), k, repr(float(x)), repr(float(y))])
