"""Cross-covariance surface estimation from raw residual products.

Each block Sigma_{ll'}(t, t') = B(t)' Gamma_{ll'} B(t') is a tensor-product
spline fitted by penalized least squares to the products of mean-fit
residuals, excluding same-time same-component products (which carry the
measurement-error variance).  Only sufficient statistics are accumulated:
for one subject with basis rows B_i the full product design contributes
kron(B_i'B_i, B_i'B_i) to X'X, so no giant design matrix is ever formed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from .bspline import GramRoot, SplineBasis, difference_penalty, gram_matrix
from .dataset import MvFunctionalDataset
from .penalized import gcv_solve

__all__ = [
    "PairProducts",
    "RawCovariances",
    "CovarianceFit",
    "raw_covariances",
    "fit_covariance",
    "estimate_noise_variance",
    "evaluate_covariance",
    "evaluate_covariance_grid",
    "dump_covariance",
]


@dataclass(frozen=True)
class PairProducts:
    """All residual cross-products for one component pair (0-based, row <= col).

    ``diagonal`` flags the same-time same-component products E_ij^2 that are
    contaminated by the noise variance tau^2.
    """

    row_component: int
    col_component: int
    t_row: np.ndarray
    t_col: np.ndarray
    value: np.ndarray
    diagonal: np.ndarray

    @property
    def count(self) -> int:
        return self.value.size


@dataclass(frozen=True)
class RawCovariances:
    """Pseudo-responses for covariance smoothing, grouped by component pair."""

    q: int
    pairs: Mapping[tuple[int, int], PairProducts]
    # per-subject (times, residual matrix) retained for the sufficient-statistic fits
    subject_times: tuple[np.ndarray, ...]
    subject_residuals: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class CovarianceFit:
    """Tensor-product coefficient blocks plus noise variances.

    ``Gamma`` is the (q*r, q*r) block matrix with Gamma_{l'l} = Gamma_{ll'}'.
    ``tau_sq`` may be None until the noise variances have been estimated.
    """

    q: int
    basis: SplineBasis
    gram: GramRoot
    Gamma: np.ndarray
    tau_sq: np.ndarray | None
    penalty_order: int
    block_lambda: dict[tuple[int, int], float]

    def block(self, l: int, lp: int) -> np.ndarray:
        r = self.basis.r
        return self.Gamma[l * r:(l + 1) * r, lp * r:(lp + 1) * r]

    def with_tau(self, tau_sq: np.ndarray) -> "CovarianceFit":
        return replace(self, tau_sq=np.asarray(tau_sq, dtype=float))


def raw_covariances(residual_data: MvFunctionalDataset) -> RawCovariances:
    """Assemble the raw covariances E_ij^l * E_ij'^l' for all pairs l <= l'."""
    q = residual_data.q
    parts: dict[tuple[int, int], list] = {
        (l, lp): ([], [], [], []) for l in range(q) for lp in range(l, q)
    }
    for subj in residual_data.subjects:
        t = subj.times
        m = t.size
        t_row = np.repeat(t, m)
        t_col = np.tile(t, m)
        same_time = np.eye(m, dtype=bool).ravel()
        for l in range(q):
            for lp in range(l, q):
                prod = np.outer(subj.values[:, l], subj.values[:, lp]).ravel()
                rows, cols, vals, diags = parts[(l, lp)]
                rows.append(t_row)
                cols.append(t_col)
                vals.append(prod)
                diags.append(same_time if l == lp else np.zeros(m * m, dtype=bool))
    pairs = {
        key: PairProducts(
            row_component=key[0],
            col_component=key[1],
            t_row=np.concatenate(rows),
            t_col=np.concatenate(cols),
            value=np.concatenate(vals),
            diagonal=np.concatenate(diags),
        )
        for key, (rows, cols, vals, diags) in parts.items()
    }
    return RawCovariances(
        q=q,
        pairs=pairs,
        subject_times=tuple(s.times for s in residual_data.subjects),
        subject_residuals=tuple(s.values for s in residual_data.subjects),
    )


def fit_covariance(
    pseudo: RawCovariances,
    basis: SplineBasis,
    penalty_order: int = 2,
    *,
    lambda_grid=None,
    estimate_noise: bool = True,
) -> CovarianceFit:
    """Fit every coefficient block by GCV-penalized tensor-product regression.

    The penalty is lambda * (P (x) S + S (x) P); same-time same-component
    products are excluded from the diagonal-block fits and the diagonal
    blocks are symmetrized afterwards.
    """
    q = pseudo.q
    r = basis.r
    gram = gram_matrix(basis)
    P = difference_penalty(r, penalty_order)
    Pen = np.kron(P, gram.S) + np.kron(gram.S, P)

    # per-subject basis quantities shared across the block fits
    basis_rows = [basis.design_matrix(t) for t in pseudo.subject_times]
    grams = [B.T @ B for B in basis_rows]
    A_full = np.zeros((r * r, r * r))
    for G in grams:
        A_full += np.kron(G, G)
    # rows kron(b_j, b_j) of the excluded same-time products, all subjects stacked
    W = np.vstack([
        np.einsum("ja,jb->jab", B, B).reshape(B.shape[0], r * r)
        for B in basis_rows
    ])
    A_diag = A_full - W.T @ W

    n_same_time = sum(t.size for t in pseudo.subject_times)
    Gamma = np.zeros((q * r, q * r))
    block_lambda: dict[tuple[int, int], float] = {}
    for l in range(q):
        for lp in range(l, q):
            diag_block = l == lp
            b = np.zeros(r * r)
            yty = 0.0
            n_rows = 0
            for B, E in zip(basis_rows, pseudo.subject_residuals):
                R = np.outer(E[:, l], E[:, lp])
                b += (B.T @ R @ B).ravel()
                yty += float(np.sum(R * R))
                n_rows += R.size
            A = A_full
            if diag_block:
                e_sq = np.concatenate([E[:, l] ** 2 for E in pseudo.subject_residuals])
                b -= W.T @ e_sq
                yty -= float(np.sum(e_sq**2))
                n_rows -= n_same_time
                A = A_diag
            if n_rows < 10 * r * r:
                warnings.warn(
                    f"covariance block ({l + 1},{lp + 1}): only {n_rows} products for "
                    f"{r * r} coefficients; the surface may be poorly identified",
                    RuntimeWarning,
                    stacklevel=2,
                )
            # all products of one subject share its scores, so the effective
            # sample size for smoothing selection is the subject count
            edf_scale = max(1.0, n_rows / len(basis_rows))
            res = gcv_solve(A, b, yty, n_rows, Pen, lambda_grid, edf_scale=edf_scale)
            block = res.coef.reshape(r, r)
            if diag_block:
                block = 0.5 * (block + block.T)
            Gamma[l * r:(l + 1) * r, lp * r:(lp + 1) * r] = block
            if not diag_block:
                Gamma[lp * r:(lp + 1) * r, l * r:(l + 1) * r] = block.T
            block_lambda[(l, lp)] = res.lam

    fit = CovarianceFit(
        q=q, basis=basis, gram=gram, Gamma=Gamma, tau_sq=None,
        penalty_order=penalty_order, block_lambda=block_lambda,
    )
    if estimate_noise:
        fit = fit.with_tau(estimate_noise_variance(pseudo, fit))
    return fit


def estimate_noise_variance(pseudo: RawCovariances, fit: CovarianceFit) -> np.ndarray:
    """tau_l^2 = max(0, mean of E_ij^2 - Sigma_ll(t_ij, t_ij)) over diagonal products."""
    tau = np.empty(pseudo.q)
    for l in range(pseudo.q):
        pp = pseudo.pairs[(l, l)]
        mask = pp.diagonal
        if not mask.any():
            raise ValueError(f"no same-time products for component {l + 1}")
        t = pp.t_row[mask]
        B = fit.basis.design_matrix(t)
        sigma_diag = np.einsum("ja,ab,jb->j", B, fit.block(l, l), B)
        tau[l] = max(0.0, float(np.mean(pp.value[mask] - sigma_diag)))
    return tau


def evaluate_covariance(fit: CovarianceFit, t: float, t_prime: float) -> np.ndarray:
    """Covariance matrix Sigma(t, t') with entries B(t)' Gamma_{ll'} B(t')."""
    return evaluate_covariance_grid(fit, [t], [t_prime])[0, 0]


def evaluate_covariance_grid(fit: CovarianceFit, ts, t_primes) -> np.ndarray:
    """Sigma over a grid; shape (len(ts), len(t_primes), q, q)."""
    r = fit.basis.r
    Bt = fit.basis.design_matrix(ts)
    Bp = fit.basis.design_matrix(t_primes)
    G4 = fit.Gamma.reshape(fit.q, r, fit.q, r)
    return np.einsum("ia,lamb,jb->ijlm", Bt, G4, Bp)


def dump_covariance(fit: CovarianceFit, grid, path, header_lines=()) -> None:
    """Write Sigma on a grid as text blocks, one per component pair.

    Each block is a matrix whose first row and first column hold the grid.
    """
    grid = np.asarray(grid, dtype=float)
    sigma = evaluate_covariance_grid(fit, grid, grid)
    with open(path, "w", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        for l in range(fit.q):
            for lp in range(fit.q):
                fh.write(f"# block outcome_{l + 1} outcome_{lp + 1}\n")
                fh.write("0.0," + ",".join(repr(g) for g in grid) + "\n")
                for i, g in enumerate(grid):
                    row = ",".join(repr(v) for v in sigma[i, :, l, lp])
                    fh.write(f"{g!r},{row}\n")
