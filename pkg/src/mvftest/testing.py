"""Projection-based group-difference tests on functional PC scores.

Two-sample Hotelling T-squared with an F-based rejection rule (equal or
unequal group covariances), a label-permutation approximation of the null,
a Lawley-Hotelling trace MANOVA for G groups, and bootstrap simultaneous
confidence bands for the component-wise treatment effects.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .covariance import fit_covariance, raw_covariances
from .dataset import MvFunctionalDataset, SubjectSeries
from .eigen import multivariate_eigen, select_K_by_pve
from .meanfit import MeanFit, fit_mean, residuals
from .bspline import make_basis
from .scores import ScoreMatrix, blup_scores, scores_about_overall_mean

__all__ = [
    "TestReport",
    "BandResult",
    "PipelineConfig",
    "hotelling_equal",
    "hotelling_unequal",
    "permutation_test",
    "manova_lh",
    "bootstrap_band",
    "two_sample_pipeline",
    "write_report",
]


@dataclass(frozen=True)
class TestReport:
    """Outcome of one group-difference test."""

    statistic: float
    family: str
    p_value: float
    p_value_method: str
    K: int
    group_sizes: tuple[int, ...]
    df: tuple[float, float]
    alpha: float
    reject: bool
    permutation_B: int | None = None
    seed: int | None = None
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class BandResult:
    """Simultaneous confidence band for one component's treatment effect."""

    component: int
    grid: np.ndarray
    estimate: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    q_star: float
    alpha: float
    alpha_star: float
    B: int
    seed: int


@dataclass(frozen=True)
class PipelineConfig:
    """Settings for the end-to-end two-sample pipeline."""

    pve: float = 0.99
    family: str = "equal"
    alpha: float = 0.05
    knots: int = 10
    degree: int = 3
    penalty_order: int = 2
    permutation_b: int | None = None
    seed: int | None = None


def _two_group_split(scores: ScoreMatrix):
    labels = np.unique(scores.groups)
    if labels.size != 2 or not np.array_equal(labels, [0, 1]):
        raise ValueError(f"two-sample test needs group labels {{0, 1}}, got {labels.tolist()}")
    x1 = scores.scores[scores.groups == 1]
    x0 = scores.scores[scores.groups == 0]
    if len(x1) < 2 or len(x0) < 2:
        raise ValueError("each group needs at least 2 subjects")
    return x1, x0


def _hotelling_equal_statistic(x1: np.ndarray, x0: np.ndarray) -> float:
    n1, n0 = len(x1), len(x0)
    d = x1.mean(axis=0) - x0.mean(axis=0)
    pooled = ((n1 - 1) * np.cov(x1, rowvar=False, ddof=1)
              + (n0 - 1) * np.cov(x0, rowvar=False, ddof=1)) / (n1 + n0 - 2)
    pooled = np.atleast_2d(pooled)
    try:
        sol = np.linalg.solve(pooled, d)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            "pooled score covariance is singular; lower the PVE target so that "
            "K stays well below the group sizes"
        ) from exc
    return float(n1 * n0 / (n1 + n0) * d @ sol)


def _hotelling_unequal_statistic(x1: np.ndarray, x0: np.ndarray) -> tuple[float, float]:
    """Statistic and Nel-van-der-Merwe effective degrees of freedom."""
    n1, n0 = len(x1), len(x0)
    d = x1.mean(axis=0) - x0.mean(axis=0)
    W1 = np.atleast_2d(np.cov(x1, rowvar=False, ddof=1)) / n1
    W0 = np.atleast_2d(np.cov(x0, rowvar=False, ddof=1)) / n0
    W = W1 + W0
    try:
        sol = np.linalg.solve(W, d)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            "combined score covariance is singular; lower the PVE target so that "
            "K stays well below the group sizes"
        ) from exc
    stat = float(d @ sol)
    num = np.trace(W) ** 2 + np.trace(W @ W)
    den = ((np.trace(W1) ** 2 + np.trace(W1 @ W1)) / (n1 - 1)
           + (np.trace(W0) ** 2 + np.trace(W0 @ W0)) / (n0 - 1))
    return stat, float(num / den)


def hotelling_equal(scores: ScoreMatrix, alpha: float = 0.05) -> TestReport:
    """Pooled-covariance Hotelling test with the F(K, n-K-1) rule."""
    x1, x0 = _two_group_split(scores)
    n1, n0, K = len(x1), len(x0), scores.K
    n = n1 + n0
    if n - K - 1 < 1:
        raise ValueError(f"n - K - 1 = {n - K - 1} < 1; too many components for n={n}")
    t_n = _hotelling_equal_statistic(x1, x0)
    scale = (n - K - 1) / ((n - 2) * K)
    p = float(stats.f.sf(t_n * scale, K, n - K - 1))
    return TestReport(
        statistic=t_n, family="hotelling_equal", p_value=p, p_value_method="f_quantile",
        K=K, group_sizes=(n1, n0), df=(float(K), float(n - K - 1)),
        alpha=alpha, reject=p < alpha,
    )


def hotelling_unequal(scores: ScoreMatrix, alpha: float = 0.05) -> TestReport:
    """Unequal-covariance statistic with Satterthwaite-type effective df."""
    x1, x0 = _two_group_split(scores)
    n1, n0, K = len(x1), len(x0), scores.K
    stat, f_eff = _hotelling_unequal_statistic(x1, x0)
    if f_eff - K - 1 < 1:
        raise ValueError(f"effective df {f_eff:.2f} leaves f - K - 1 < 1; test not applicable")
    scale = (f_eff - K - 1) / (f_eff * K)
    p = float(stats.f.sf(stat * scale, K, f_eff - K - 1))
    return TestReport(
        statistic=stat, family="hotelling_unequal", p_value=p, p_value_method="f_quantile",
        K=K, group_sizes=(n1, n0), df=(float(K), float(f_eff - K - 1)),
        alpha=alpha, reject=p < alpha, diagnostics={"effective_df": f_eff},
    )


def permutation_test(scores: ScoreMatrix, B: int, seed: int,
                     family: str = "equal", alpha: float = 0.05) -> TestReport:
    """Approximate the null by relabeling subjects, preserving group sizes.

    The p-value is the fraction of permuted statistics strictly exceeding
    the observed one; a degenerate all-tie case (observed statistic 0) maps
    to p = 1.  Each permutation's RNG is derived from (seed, b), so the
    result does not depend on evaluation order.
    """
    if B < 100:
        raise ValueError("permutation test needs B >= 100 for a stable p-value")
    if family not in ("equal", "unequal"):
        raise ValueError(f"unknown family {family!r}")
    x1, x0 = _two_group_split(scores)
    n1 = len(x1)
    pooled = np.vstack([x1, x0])
    n = len(pooled)

    def statistic(a: np.ndarray, b: np.ndarray) -> float:
        if family == "equal":
            return _hotelling_equal_statistic(a, b)
        return _hotelling_unequal_statistic(a, b)[0]

    t_obs = statistic(x1, x0)
    exceed = 0
    for b in range(B):
        rng = np.random.default_rng((seed, b))
        perm = rng.permutation(n)
        if statistic(pooled[perm[:n1]], pooled[perm[n1:]]) > t_obs:
            exceed += 1
    p = 1.0 if t_obs == 0.0 else exceed / B
    base = hotelling_equal(scores, alpha) if family == "equal" else hotelling_unequal(scores, alpha)
    return replace(
        base, p_value=p, p_value_method="permutation", permutation_B=B, seed=seed,
        reject=p < alpha,
    )


def manova_lh(scores: ScoreMatrix, alpha: float = 0.05) -> TestReport:
    """Lawley-Hotelling trace for G-group equality of score means.

    The reported statistic is tr(Q_H Q_E^{-1}); its null law is taken as
    chi-square with K(G-1) df after the (n-G) scaling (for G=2 this matches
    (n-2) * T_LH = T_n with T_n approximately chi-square_K).
    """
    G = scores.n_groups
    if G < 2:
        raise ValueError("MANOVA needs at least two groups")
    groups = [scores.scores[scores.groups == r] for r in range(G)]
    sizes = [len(x) for x in groups]
    if min(sizes) < 2:
        raise ValueError("each group needs at least 2 subjects")
    n, K = scores.n, scores.K
    grand = scores.scores.mean(axis=0)
    Q_H = np.zeros((K, K))
    Q_E = np.zeros((K, K))
    for x, n_r in zip(groups, sizes):
        diff = x.mean(axis=0) - grand
        Q_H += n_r * np.outer(diff, diff)
        Q_E += (n_r - 1) * np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    try:
        t_lh = float(np.trace(np.linalg.solve(Q_E, Q_H)))
    except np.linalg.LinAlgError as exc:
        raise ValueError("among-units error matrix Q_E is singular; lower the PVE target") from exc
    df = K * (G - 1)
    p = float(stats.chi2.sf((n - G) * t_lh, df))
    return TestReport(
        statistic=t_lh, family="lawley_hotelling", p_value=p, p_value_method="chi_square",
        K=K, group_sizes=tuple(sizes), df=(float(df), 0.0),
        alpha=alpha, reject=p < alpha,
    )


def bootstrap_band(
    data: MvFunctionalDataset,
    mean: MeanFit,
    component: int,
    B: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
    grid_size: int = 101,
    lambda_grid=None,
) -> BandResult:
    """Simultaneous confidence band for one component's treatment effect.

    Subjects are resampled with replacement within group; the mean model is
    refitted per replicate and the band is calibrated by the (1 - alpha/q)
    quantile of the maximal standardized bootstrap deviation (Bonferroni
    across the q components).
    """
    if B < 200:
        raise ValueError("bootstrap band needs B >= 200")
    if not 1 <= component <= data.q:
        raise ValueError(f"component must lie in 1..{data.q}")
    if data.n_groups != 2:
        raise ValueError("bootstrap band needs a two-group dataset")
    grid = np.linspace(0.0, 1.0, grid_size)
    estimate = mean.treatment_effect(grid)[:, component - 1]
    by_group = {g: [s for s in data.subjects if s.group == g] for g in (0, 1)}

    curves = np.empty((B, grid_size))
    for b in range(B):
        rng = np.random.default_rng((seed, b))
        resampled = []
        for g in (0, 1):
            pool = by_group[g]
            picks = rng.integers(0, len(pool), size=len(pool))
            for j, idx in enumerate(picks):
                s = pool[idx]
                resampled.append(SubjectSeries(f"b{g}_{j}", s.group, s.times, s.values))
        boot_data = MvFunctionalDataset(q=data.q, domain=data.domain, subjects=tuple(resampled))
        refit = fit_mean(boot_data, basis=mean.basis, penalty_order=mean.penalty_order,
                         lambda_grid=lambda_grid)
        curves[b] = refit.treatment_effect(grid)[:, component - 1]

    se = curves.std(axis=0, ddof=1)
    if np.any(se <= 0):
        raise ValueError("degenerate bootstrap: zero standard error on the grid")
    center = curves.mean(axis=0)
    max_dev = (np.abs(curves - center) / se).max(axis=1)
    alpha_star = alpha / data.q
    q_star = float(np.quantile(max_dev, 1.0 - alpha_star))
    return BandResult(
        component=component, grid=grid, estimate=estimate, se=se,
        lower=estimate - q_star * se, upper=estimate + q_star * se,
        q_star=q_star, alpha=alpha, alpha_star=alpha_star, B=B, seed=seed,
    )


def two_sample_pipeline(data: MvFunctionalDataset, config: PipelineConfig = PipelineConfig()) -> TestReport:
    """Full pipeline: mean fit, covariance, eigensystem, BLUP scores, test."""
    if data.n_groups != 2:
        raise ValueError("two-sample pipeline needs a two-group dataset")
    basis = make_basis(config.knots, config.degree)
    mean = fit_mean(data, basis=basis, penalty_order=config.penalty_order)
    resid = residuals(mean, data)
    pseudo = raw_covariances(resid)
    cov = fit_covariance(pseudo, basis, config.penalty_order)
    system = multivariate_eigen(cov)
    K = select_K_by_pve(system, config.pve)
    system = system.with_truncation(K, config.pve)
    scores = scores_about_overall_mean(blup_scores(data, mean, cov, system), mean, system)
    if config.permutation_b is not None:
        seed = 0 if config.seed is None else config.seed
        report = permutation_test(scores, config.permutation_b, seed,
                                  family=config.family, alpha=config.alpha)
    elif config.family == "equal":
        report = hotelling_equal(scores, config.alpha)
    elif config.family == "unequal":
        report = hotelling_unequal(scores, config.alpha)
    else:
        raise ValueError(f"unknown family {config.family!r}")
    diagnostics = dict(report.diagnostics)
    diagnostics.update({
        "eigenvalues": system.lambdas.tolist(),
        "pve_path": system.pve_path().tolist(),
        "pve_target": config.pve,
        "tau_sq": cov.tau_sq.tolist(),
        "min_discarded_eigenvalue": system.min_discarded,
        "mean_lambda_mu": mean.lambda_mu.tolist(),
        "mean_lambda_eta": mean.lambda_eta.tolist() if mean.lambda_eta is not None else None,
    })
    return replace(report, diagnostics=diagnostics)


def write_report(report: TestReport, path, header_lines=()) -> None:
    """Serialize a report as `key = value` lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write(f"family = {report.family}\n")
        fh.write(f"statistic = {report.statistic!r}\n")
        fh.write(f"p_value = {report.p_value!r}\n")
        fh.write(f"p_value_method = {report.p_value_method}\n")
        fh.write(f"K = {report.K}\n")
        fh.write(f"group_sizes = {','.join(str(s) for s in report.group_sizes)}\n")
        fh.write(f"df = {report.df[0]!r},{report.df[1]!r}\n")
        fh.write(f"alpha = {report.alpha!r}\n")
        fh.write(f"reject = {report.reject}\n")
        if report.permutation_B is not None:
            fh.write(f"permutation_B = {report.permutation_B}\n")
        if report.seed is not None:
            fh.write(f"seed = {report.seed}\n")
        for key in sorted(report.diagnostics):
            fh.write(f"{key} = {report.diagnostics[key]!r}\n")
