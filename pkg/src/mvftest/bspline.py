"""Univariate B-spline machinery shared by the mean and covariance smoothers.

Provides clamped B-spline bases on [0, 1] with uniform interior knots,
exact Gram matrices S = integral of B(u) B(u)^T du with their symmetric
square roots, and difference penalties for penalized regression.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import eigh

__all__ = [
    "SplineBasis",
    "GramRoot",
    "make_basis",
    "eval_basis",
    "gram_matrix",
    "difference_penalty",
]


@dataclass(frozen=True)
class SplineBasis:
    """Clamped B-spline basis on [0, 1].

    The full knot vector replicates each boundary knot ``degree + 1`` times,
    so the basis satisfies partition of unity on the closed interval and the
    dimension is ``interior_knot_count + degree + 1``.
    """

    degree: int
    interior_knot_count: int
    knots: np.ndarray

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        knots = np.asarray(self.knots, dtype=float)
        if np.any(np.diff(knots) < 0):
            raise ValueError("knot vector must be nondecreasing")
        object.__setattr__(self, "knots", knots)
        knots.flags.writeable = False

    @property
    def r(self) -> int:
        """Number of basis functions."""
        return len(self.knots) - self.degree - 1

    def design_matrix(self, t) -> np.ndarray:
        """Evaluate all basis functions at each point of `t`, shape (len(t), r)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if t.size and (t.min() < self.knots[0] or t.max() > self.knots[-1]):
            raise ValueError(
                f"evaluation points must lie in [{self.knots[0]}, {self.knots[-1]}]"
            )
        if t.size == 0:
            return np.zeros((0, self.r))
        # design_matrix wants sorted input; undo the sort afterwards
        order = np.argsort(t, kind="stable")
        rows = BSpline.design_matrix(
            t[order], self.knots, self.degree, extrapolate=False
        ).toarray()
        out = np.empty_like(rows)
        out[order] = rows
        return out


@dataclass(frozen=True)
class GramRoot:
    """Gram matrix S = int B(u) B(u)^T du with symmetric square root.

    ``S_half @ S_half`` reproduces S and ``S_half_inv`` inverts the root;
    eigenvalues are floored at ``1e-12 * max`` so the inverse always exists.
    """

    S: np.ndarray
    S_half: np.ndarray
    S_half_inv: np.ndarray


def make_basis(interior_knot_count: int, degree: int = 3) -> SplineBasis:
    """Build a clamped basis with uniformly spaced interior knots on (0, 1)."""
    if interior_knot_count < 1:
        raise ValueError("interior_knot_count must be >= 1")
    if degree < 1:
        raise ValueError("degree must be >= 1")
    interior = np.linspace(0.0, 1.0, interior_knot_count + 2)[1:-1]
    knots = np.concatenate(
        [np.zeros(degree + 1), interior, np.ones(degree + 1)]
    )
    return SplineBasis(degree=degree, interior_knot_count=interior_knot_count, knots=knots)


def eval_basis(basis: SplineBasis, t: float) -> np.ndarray:
    """Evaluate the basis at a single point, returning a length-r vector."""
    return basis.design_matrix([t])[0]


def _span_quadrature(basis: SplineBasis, nodes_per_span: int):
    """Gauss-Legendre nodes/weights over every non-degenerate knot span."""
    x, w = np.polynomial.legendre.leggauss(nodes_per_span)
    lo = basis.knots[:-1]
    hi = basis.knots[1:]
    keep = hi > lo
    lo, hi = lo[keep], hi[keep]
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def gram_matrix(basis: SplineBasis, nodes_per_span: int | None = None) -> GramRoot:
    """Exact Gram matrix of the basis by per-span Gauss-Legendre quadrature.

    ``degree + 1`` nodes per span integrate the degree-2d polynomial
    integrand exactly, so no tolerance tuning is involved.
    """
    if nodes_per_span is None:
        nodes_per_span = basis.degree + 1
    nodes, weights = _span_quadrature(basis, nodes_per_span)
    B = basis.design_matrix(nodes)
    S = B.T @ (weights[:, None] * B)
    S = 0.5 * (S + S.T)
    vals, vecs = eigh(S)
    floor = 1e-12 * vals.max()
    vals = np.maximum(vals, floor)
    S_half = (vecs * np.sqrt(vals)) @ vecs.T
    S_half_inv = (vecs / np.sqrt(vals)) @ vecs.T
    return GramRoot(S=S, S_half=0.5 * (S_half + S_half.T), S_half_inv=0.5 * (S_half_inv + S_half_inv.T))


def difference_penalty(r: int, order: int = 2) -> np.ndarray:
    """Penalty P = D^T D for the order-th difference operator on r coefficients."""
    if order < 1:
        raise ValueError("order must be >= 1")
    if order >= r:
        raise ValueError(f"order ({order}) must be smaller than the basis dimension ({r})")
    D = np.diff(np.eye(r), n=order, axis=0)
    return D.T @ D
