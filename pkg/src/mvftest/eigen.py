"""Multivariate eigendecomposition of a fitted covariance.

The eigenfunctions of the covariance operator are obtained from the
symmetric block matrix with blocks S^{1/2} Gamma_{ll'} S^{1/2}; eigenvector
coordinates V_k translate back to functions via
psi_k(t) = (I_q (x) B(t)' S^{-1/2}) V_k.  Negative eigenvalues (the fitted
surface need not be positive semidefinite) are discarded, which is the
minimal-norm PSD projection.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla

from .bspline import GramRoot, SplineBasis
from .covariance import CovarianceFit

__all__ = ["MvEigenSystem", "multivariate_eigen", "select_K_by_pve", "eval_eigenfunction", "dump_eigensystem"]


@dataclass(frozen=True)
class MvEigenSystem:
    """Retained eigenvalues/eigenvectors of the covariance operator.

    ``lambdas`` is nonincreasing and strictly positive; ``V`` has orthonormal
    columns in R^{q*r}.  ``K`` is the selected truncation (defaults to the
    full retained spectrum until a PVE rule is applied).
    ``min_discarded`` records the most negative discarded eigenvalue as a
    PSD-repair diagnostic (0 when the spectrum was clean).
    """

    q: int
    basis: SplineBasis
    gram: GramRoot
    lambdas: np.ndarray
    V: np.ndarray
    K: int
    pve_target: float
    min_discarded: float

    @property
    def K_max(self) -> int:
        return self.lambdas.size

    def with_truncation(self, K: int, pve_target: float) -> "MvEigenSystem":
        if not 1 <= K <= self.K_max:
            raise ValueError(f"K must lie in 1..{self.K_max}")
        return replace(self, K=K, pve_target=pve_target)

    def pve_path(self) -> np.ndarray:
        """Cumulative fraction of variance explained by the leading k components."""
        total = self.lambdas.sum()
        return np.cumsum(self.lambdas) / total


def _tie_ordered(vals: np.ndarray, vecs: np.ndarray):
    """Descending eigenvalue order; exact ties broken lexicographically by vector."""
    order = list(np.argsort(-vals, kind="stable"))
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and vals[order[j + 1]] == vals[order[i]]:
            j += 1
        if j > i:
            order[i:j + 1] = sorted(order[i:j + 1], key=lambda c: tuple(vecs[:, c]))
        i = j + 1
    return vals[order], vecs[:, order]


def multivariate_eigen(fit: CovarianceFit) -> MvEigenSystem:
    """Eigendecompose the block matrix S^{1/2} Gamma S^{1/2}; keep positive part."""
    q, r = fit.q, fit.basis.r
    SH = fit.gram.S_half
    M = np.kron(np.eye(q), SH) @ fit.Gamma @ np.kron(np.eye(q), SH)
    asym = np.abs(M - M.T).max()
    if asym > 1e-8:
        raise ValueError(
            f"eigensystem input asymmetric by {asym:.2e}; upstream covariance fit is broken"
        )
    vals, vecs = sla.eigh(0.5 * (M + M.T))
    vals, vecs = vals[::-1], vecs[:, ::-1]
    lam_max = vals[0] if vals.size else 0.0
    if lam_max <= 0.0:
        return MvEigenSystem(
            q=q, basis=fit.basis, gram=fit.gram,
            lambdas=np.empty(0), V=np.empty((q * r, 0)),
            K=0, pve_target=1.0, min_discarded=float(vals.min()) if vals.size else 0.0,
        )
    keep = vals > 1e-10 * lam_max
    discarded = vals[~keep]
    min_discarded = float(discarded.min()) if discarded.size else 0.0
    vals, vecs = vals[keep], vecs[:, keep]
    # deterministic sign: largest-magnitude coordinate positive
    idx = np.argmax(np.abs(vecs), axis=0)
    flips = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    vecs = vecs * flips
    vals, vecs = _tie_ordered(vals, vecs)
    return MvEigenSystem(
        q=q, basis=fit.basis, gram=fit.gram,
        lambdas=vals, V=vecs, K=vals.size, pve_target=1.0,
        min_discarded=min_discarded,
    )


def select_K_by_pve(system: MvEigenSystem, pve: float) -> int:
    """Smallest K whose cumulative eigenvalue fraction reaches the PVE target."""
    if not 0.0 < pve <= 1.0:
        raise ValueError("pve must lie in (0, 1]")
    if system.K_max == 0:
        raise ValueError("empty spectrum: the fitted covariance has no positive eigenvalues")
    K = int(np.searchsorted(system.pve_path(), pve - 1e-12) + 1)
    return min(K, system.K_max)


def eval_eigenfunction(system: MvEigenSystem, k: int, t) -> np.ndarray:
    """Values of the k-th eigenfunction (k is 1-based); shape (len(t), q).

    Component l is B(t)' S^{-1/2} V_k[l-th r-block].
    """
    if not 1 <= k <= system.K_max:
        raise ValueError(f"k must lie in 1..{system.K_max}, got {k}")
    r = system.basis.r
    coefs = system.gram.S_half_inv @ system.V[:, k - 1].reshape(system.q, r).T  # (r, q)
    return system.basis.design_matrix(t) @ coefs


def dump_eigensystem(system: MvEigenSystem, grid, path, header_lines=()) -> None:
    """Write eigenvalues and eigenfunction values on a grid as a text table."""
    grid = np.asarray(grid, dtype=float)
    with open(path, "w", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("# eigenvalues: " + ",".join(repr(v) for v in system.lambdas) + "\n")
        fh.write(f"# K={system.K} pve_target={system.pve_target!r}\n")
        cols = [f"psi_{k}_comp_{l + 1}" for k in range(1, system.K_max + 1) for l in range(system.q)]
        fh.write("t," + ",".join(cols) + "\n")
        values = [eval_eigenfunction(system, k, grid) for k in range(1, system.K_max + 1)]
        for i, t in enumerate(grid):
            row = [repr(v[i, l]) for v in values for l in range(system.q)]
            fh.write(f"{t!r}," + ",".join(row) + "\n")
