"""Subject-level functional principal component scores.

For sparse designs the scores are best linear unbiased predictions under a
working Gaussian mixed model: with the subject's responses stacked
component-major (all times of component 1, then component 2, ...),

    xi_i = V' (I_q (x) S^{1/2}) Gamma (I_q (x) B_i') G_i^{-1} (Y_i - mu_i),
    G_i  = (I_q (x) B_i) Gamma (I_q (x) B_i') + blockdiag(tau_l^2 I_{m_i}).

For densely observed common-grid data the direct trapezoid projection onto
the eigenfunctions is available as an independent route.

The BLUP centers each subject at its own group's mean curve, so the group
difference of raw BLUP scores is nearly zero by construction.  The scores
used by the group-difference tests are projections of the predicted
trajectories about the overall mean, i.e. the BLUP scores plus
g_i * <eta_hat, psi_k>; see :func:`scores_about_overall_mean`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .covariance import CovarianceFit
from .dataset import MvFunctionalDataset, SubjectSeries
from .eigen import MvEigenSystem, eval_eigenfunction
from .meanfit import MeanFit
from .penalized import EstimationError

__all__ = [
    "ScoreMatrix",
    "blup_scores",
    "dense_scores",
    "effect_projection",
    "scores_about_overall_mean",
    "predict_trajectory",
    "write_scores",
]

_RIDGE_TAU_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    """Per-subject score vectors with their group labels.

    Row order matches the dataset's subject order.
    """

    scores: np.ndarray
    groups: np.ndarray
    subject_ids: tuple[str, ...]

    def __post_init__(self):
        scores = np.atleast_2d(np.asarray(self.scores, dtype=float))
        groups = np.asarray(self.groups, dtype=int)
        if scores.shape[0] != groups.size or len(self.subject_ids) != groups.size:
            raise ValueError("scores, groups and subject_ids must agree in length")
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "subject_ids", tuple(self.subject_ids))

    @property
    def n(self) -> int:
        return self.groups.size

    @property
    def K(self) -> int:
        return self.scores.shape[1]

    @property
    def n_groups(self) -> int:
        return int(self.groups.max()) + 1


def _check_consistency(data: MvFunctionalDataset, mean: MeanFit, cov: CovarianceFit,
                       eigen: MvEigenSystem) -> None:
    if not (data.q == mean.q == cov.q == eigen.q):
        raise ValueError("component count q differs between dataset, mean, covariance and eigensystem")
    if data.domain != mean.domain:
        raise ValueError("dataset and mean fit were built on different time domains")
    if not np.array_equal(cov.basis.knots, eigen.basis.knots):
        raise ValueError("covariance fit and eigensystem use different bases")
    if cov.tau_sq is None:
        raise ValueError("covariance fit carries no noise variances; run estimate_noise_variance")
    if np.any(cov.tau_sq < 0):
        raise ValueError("noise variances must be nonnegative")


def _psd_gamma(cov: CovarianceFit, eigen: MvEigenSystem) -> np.ndarray:
    """PSD projection of Gamma built from the retained (positive) eigenpairs.

    The raw fitted Gamma may be indefinite; the response covariance used in
    the BLUP system must be positive semidefinite, and spectral truncation
    is exactly the repair the eigensystem applies.  Retained eigenvectors
    see the same matrix either way, so the two score formulas still agree.
    """
    half_inv = np.kron(np.eye(cov.q), cov.gram.S_half_inv)
    core = (eigen.V * eigen.lambdas) @ eigen.V.T
    return half_inv @ core @ half_inv


def _blup_single(subj: SubjectSeries, mean: MeanFit, cov: CovarianceFit,
                 gamma_psd: np.ndarray, project: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """Score vector for one subject; ``project`` is V_K' (I (x) S^1/2) Gamma."""
    q, r = cov.q, cov.basis.r
    m = subj.m
    Bi = cov.basis.design_matrix(subj.times)
    G4 = gamma_psd.reshape(q, r, q, r)
    # covariance of the stacked response, component-major
    C = np.einsum("ja,lamb,kb->ljmk", Bi, G4, Bi).reshape(q * m, q * m)
    GY = C + np.diag(np.repeat(tau, m))
    ridge_applied = False
    if np.any(tau < _RIDGE_TAU_FLOOR):
        GY = GY + (_RIDGE_TAU_FLOOR * np.trace(GY) / (q * m)) * np.eye(q * m)
        ridge_applied = True
    resid = (subj.values - mean.predict(subj.times, group=min(subj.group, 1))).T.ravel()
    try:
        z = sla.cho_solve(sla.cho_factor(GY, lower=True), resid)
    except (sla.LinAlgError, np.linalg.LinAlgError):
        if not ridge_applied:
            GY = GY + (_RIDGE_TAU_FLOOR * np.trace(GY) / (q * m)) * np.eye(q * m)
            try:
                z = sla.cho_solve(sla.cho_factor(GY, lower=True), resid)
            except (sla.LinAlgError, np.linalg.LinAlgError) as exc:
                raise EstimationError(
                    f"subject {subj.subject_id!r}: response covariance not factorizable "
                    "even with ridge; the fitted covariance is pathological"
                ) from exc
        else:
            raise EstimationError(
                f"subject {subj.subject_id!r}: response covariance not factorizable "
                "even with ridge; the fitted covariance is pathological"
            )
    # (I_q (x) B_i') z, component block by component block
    collapsed = (Bi.T @ z.reshape(q, m).T).T.ravel()  # (q*r,)
    return project @ collapsed


def blup_scores(data: MvFunctionalDataset, mean: MeanFit, cov: CovarianceFit,
                eigen: MvEigenSystem) -> ScoreMatrix:
    """BLUP scores for every subject under the working Gaussian model."""
    _check_consistency(data, mean, cov, eigen)
    if eigen.K < 1:
        raise ValueError("eigensystem has no retained components")
    q = cov.q
    gamma_psd = _psd_gamma(cov, eigen)
    V_K = eigen.V[:, :eigen.K]
    project = V_K.T @ np.kron(np.eye(q), cov.gram.S_half) @ gamma_psd
    rows = np.vstack([
        _blup_single(subj, mean, cov, gamma_psd, project, cov.tau_sq)
        for subj in data.subjects
    ])
    return ScoreMatrix(scores=rows, groups=data.groups, subject_ids=data.subject_ids)


def effect_projection(mean: MeanFit, eigen: MvEigenSystem) -> np.ndarray:
    """Projections <eta_hat, psi_k> for k = 1..K, exact in the spline algebra.

    Both eta_hat and psi_k live in the spline space, so the concatenated
    inner product reduces to (stacked eta coefficients)' (I (x) S^{1/2}) V_k.
    """
    stacked = mean.coef_eta.reshape(-1)  # component-major (q*r,)
    return (stacked @ np.kron(np.eye(eigen.q), eigen.gram.S_half)) @ eigen.V[:, :eigen.K]


def scores_about_overall_mean(scores: ScoreMatrix, mean: MeanFit,
                              eigen: MvEigenSystem) -> ScoreMatrix:
    """Scores of the predicted trajectories centered at the overall mean.

    Adds g_i * <eta_hat, psi_k> to the group-centered BLUP scores, which is
    what the group-difference tests consume: their group-mean difference
    then estimates the treatment-effect projections instead of being
    annihilated by the fitted group means.
    """
    if scores.K != eigen.K:
        raise ValueError("score matrix and eigensystem truncation disagree")
    shift = effect_projection(mean, eigen)
    adjusted = scores.scores + np.minimum(scores.groups, 1)[:, None] * shift
    return ScoreMatrix(scores=adjusted, groups=scores.groups, subject_ids=scores.subject_ids)


def dense_scores(data: MvFunctionalDataset, mean: MeanFit, basis_functions,
                 K: int) -> ScoreMatrix:
    """Trapezoid-rule projections for subjects on one common dense grid.

    Subjects are centered at the overall mean (group 0 curve), so group-1
    scores carry the treatment-effect projections.  ``basis_functions`` is
    either an eigensystem or a callable ``f(k, t) -> (len(t), q)`` with
    1-based k, assumed orthonormal in the concatenated inner product.
    """
    grid = data.subjects[0].times
    for subj in data.subjects:
        if not np.array_equal(subj.times, grid):
            raise ValueError("dense_scores needs a common observation grid; use blup_scores")
    if grid.size < 50:
        raise ValueError(
            f"grid has only {grid.size} points (< 50); too sparse for direct "
            "projection, use blup_scores"
        )
    if isinstance(basis_functions, MvEigenSystem):
        phi = [eval_eigenfunction(basis_functions, k, grid) for k in range(1, K + 1)]
    else:
        phi = [np.asarray(basis_functions(k, grid), dtype=float) for k in range(1, K + 1)]
    overall = mean.predict(grid, group=0)
    rows = np.empty((data.n, K))
    for i, subj in enumerate(data.subjects):
        centered = subj.values - overall
        for k in range(K):
            rows[i, k] = np.trapezoid((centered * phi[k]).sum(axis=1), grid)
    return ScoreMatrix(scores=rows, groups=data.groups, subject_ids=data.subject_ids)


def predict_trajectory(data: MvFunctionalDataset, mean: MeanFit, cov: CovarianceFit,
                       eigen: MvEigenSystem, subject_id: str, grid) -> np.ndarray:
    """BLUP of the latent trajectory on a grid; shape (q, len(grid))."""
    _check_consistency(data, mean, cov, eigen)
    subj = data.subject(subject_id)
    gamma_psd = _psd_gamma(cov, eigen)
    V_K = eigen.V[:, :eigen.K]
    project = V_K.T @ np.kron(np.eye(cov.q), cov.gram.S_half) @ gamma_psd
    xi = _blup_single(subj, mean, cov, gamma_psd, project, cov.tau_sq)
    grid = np.asarray(grid, dtype=float)
    curve = mean.predict(grid, group=min(subj.group, 1))
    for k in range(eigen.K):
        curve = curve + xi[k] * eval_eigenfunction(eigen, k + 1, grid)
    return curve.T


def write_scores(scores: ScoreMatrix, path, header_lines=()) -> None:
    """Write the score matrix as a text table (subject, group, xi_1..xi_K)."""
    with open(path, "w", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        cols = ",".join(f"xi_{k}" for k in range(1, scores.K + 1))
        fh.write(f"subject,group,{cols}\n")
        for i in range(scores.n):
            vals = ",".join(repr(v) for v in scores.scores[i])
            fh.write(f"{scores.subject_ids[i]},{scores.groups[i]},{vals}\n")
