"""Component-wise mean and group-effect estimation by penalized splines.

Each component's pooled observations are regressed on the design
[B(t), g * B(t)] under working independence with a difference penalty on
both coefficient blocks.  The two smoothing parameters are selected by GCV
on a log grid, sharing factorizations across components.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .bspline import SplineBasis, difference_penalty, make_basis
from .dataset import MvFunctionalDataset
from .penalized import LAMBDA_GRID, gcv_solve

__all__ = ["MeanFit", "fit_mean", "predict_mean", "residuals"]


@dataclass(frozen=True)
class MeanFit:
    """Fitted mean mu(t) and treatment effect eta(t) for every component.

    ``coef_eta`` is all zeros when the data contained a single group;
    ``lambda_eta`` is None in that case.
    """

    q: int
    domain: tuple[float, float]
    group_count: int
    basis: SplineBasis
    coef_mu: np.ndarray
    coef_eta: np.ndarray
    lambda_mu: np.ndarray
    lambda_eta: np.ndarray | None
    penalty_order: int = 2

    def predict(self, t, group: int) -> np.ndarray:
        """Mean curve values for the given group; shape (len(t), q)."""
        if group not in (0, 1):
            raise ValueError("group must be 0 or 1 for the two-sample mean model")
        B = self.basis.design_matrix(t)
        out = B @ self.coef_mu.T
        if group == 1:
            out = out + B @ self.coef_eta.T
        return out

    def treatment_effect(self, t) -> np.ndarray:
        """eta(t) for every component; shape (len(t), q)."""
        return self.basis.design_matrix(t) @ self.coef_eta.T


def fit_mean(
    data: MvFunctionalDataset,
    *,
    basis: SplineBasis | None = None,
    penalty_order: int = 2,
    lambda_grid=None,
) -> MeanFit:
    """Fit mu and eta per component by GCV-penalized least squares.

    Requires at most two groups; with a single group the eta block is
    dropped from the design and the effect is identically zero.
    """
    if data.n_groups > 2:
        raise ValueError(
            f"mean model mu + g*eta needs a two-group dataset, got G={data.n_groups}"
        )
    if basis is None:
        basis = make_basis(10, 3)
    grid = LAMBDA_GRID if lambda_grid is None else np.asarray(lambda_grid, dtype=float)
    t, Y, g = data.pooled()
    if np.unique(t).size < penalty_order:
        raise ValueError(
            f"need at least {penalty_order} distinct time points "
            f"(penalty null-space dimension), got {np.unique(t).size}"
        )
    r = basis.r
    B = basis.design_matrix(t)
    P = difference_penalty(r, penalty_order)
    two_groups = data.n_groups == 2

    if not two_groups:
        coef_mu = np.empty((data.q, r))
        lam_mu = np.empty(data.q)
        xtx = B.T @ B
        for comp in range(data.q):
            y = Y[:, comp]
            res = gcv_solve(xtx, B.T @ y, float(y @ y), len(y), P, grid)
            coef_mu[comp] = res.coef
            lam_mu[comp] = res.lam
        return MeanFit(
            q=data.q, domain=data.domain, group_count=1, basis=basis,
            coef_mu=coef_mu, coef_eta=np.zeros((data.q, r)),
            lambda_mu=lam_mu, lambda_eta=None, penalty_order=penalty_order,
        )

    X = np.hstack([B, g[:, None] * B])
    xtx = X.T @ X
    xty = X.T @ Y
    yty = np.einsum("nq,nq->q", Y, Y)
    n_obs = len(t)
    pen_mu = np.zeros((2 * r, 2 * r))
    pen_mu[:r, :r] = P
    pen_eta = np.zeros((2 * r, 2 * r))
    pen_eta[r:, r:] = P

    best_score = np.full(data.q, np.inf)
    best_pair = np.zeros((data.q, 2))
    try:
        for lam_mu in grid:
            A = xtx + lam_mu * pen_mu
            w, Q = sla.eigh(pen_eta, 0.5 * (A + A.T))
            w = np.maximum(w, 0.0)
            qb = Q.T @ xty
            for lam_eta in grid:
                shrink = 1.0 / (1.0 + lam_eta * w)
                U = shrink[:, None] * qb
                edf = shrink.sum()
                denom = n_obs - edf
                if denom <= 0:
                    continue
                rss = np.maximum(yty - 2.0 * np.einsum("pq,pq->q", U, qb)
                                 + np.einsum("pq,pq->q", U, U), 0.0)
                score = n_obs * rss / denom**2
                better = score < best_score
                best_score[better] = score[better]
                best_pair[better] = (lam_mu, lam_eta)
    except (sla.LinAlgError, np.linalg.LinAlgError):
        # near-singular X'X + lam*P_mu; fall back to brute-force factorization
        for lam_mu in grid:
            for lam_eta in grid:
                M = xtx + lam_mu * pen_mu + lam_eta * pen_eta
                try:
                    cf = sla.cho_factor(M, lower=True)
                except (sla.LinAlgError, np.linalg.LinAlgError):
                    continue
                beta = sla.cho_solve(cf, xty)
                edf = np.trace(sla.cho_solve(cf, xtx))
                denom = n_obs - edf
                if denom <= 0:
                    continue
                rss = np.maximum(
                    yty - 2.0 * np.einsum("pq,pq->q", beta, xty)
                    + np.einsum("pq,pq->q", beta, xtx @ beta), 0.0)
                score = n_obs * rss / denom**2
                better = score < best_score
                best_score[better] = score[better]
                best_pair[better] = (lam_mu, lam_eta)
    if not np.all(np.isfinite(best_score)):
        raise ValueError("GCV failed for every smoothing-parameter pair; design is degenerate")

    coef_mu = np.empty((data.q, r))
    coef_eta = np.empty((data.q, r))
    for comp in range(data.q):
        lam_mu, lam_eta = best_pair[comp]
        M = xtx + lam_mu * pen_mu + lam_eta * pen_eta
        beta = sla.solve(M, xty[:, comp], assume_a="sym")
        coef_mu[comp] = beta[:r]
        coef_eta[comp] = beta[r:]
    return MeanFit(
        q=data.q, domain=data.domain, group_count=2, basis=basis,
        coef_mu=coef_mu, coef_eta=coef_eta,
        lambda_mu=best_pair[:, 0].copy(), lambda_eta=best_pair[:, 1].copy(),
        penalty_order=penalty_order,
    )


def predict_mean(fit: MeanFit, t: float, group: int) -> np.ndarray:
    """Mean vector mu(t) + [group == 1] * eta(t) at a single time point."""
    return fit.predict([t], group)[0]


def residuals(fit: MeanFit, data: MvFunctionalDataset) -> MvFunctionalDataset:
    """Dataset of residuals Y_ij - mu(t_ij) - g_i * eta(t_ij)."""
    if data.q != fit.q:
        raise ValueError(f"component count mismatch: fit has q={fit.q}, data has q={data.q}")
    if data.domain != fit.domain:
        raise ValueError(f"domain mismatch: fit {fit.domain}, data {data.domain}")
    new_values = [
        subj.values - fit.predict(subj.times, group=min(subj.group, 1))
        for subj in data.subjects
    ]
    return data.with_values(new_values)
