"""Synthetic three-component functional data and Monte-Carlo studies.

The generator draws, per subject, a group label, a number of visits from
the chosen sparsity band, visit times from an equidistant grid without
replacement, and a Karhunen-Loeve sample

    Y_ij = mu(t_ij) + g_i * eta(t_ij) + sum_k xi_ik psi_k(t_ij) + eps_ij

with score variances (6, 3, 1.5).  The trio of sinusoid eigenfunctions is
orthonormalized by Gram-Schmidt (see ``true_eigenfunctions``) so that the
stated variances really are the covariance operator's eigenvalues and the
hidden per-subject scores can be recovered by projection.
"""

from __future__ import annotations

from dataclasses import dataclass, replace as dc_replace
from functools import lru_cache

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from .dataset import MvFunctionalDataset, SubjectSeries
from .testing import PipelineConfig, two_sample_pipeline

__all__ = [
    "SimConfig",
    "SimTruth",
    "StudyRow",
    "SPARSITY_SUPPORTS",
    "LAMBDA_TRUE",
    "true_mean",
    "treatment_effect_curve",
    "true_eigenfunctions",
    "true_covariance",
    "generate_dataset",
    "size_study",
    "power_study",
    "write_study_table",
    "write_truth",
]

SPARSITY_SUPPORTS = {"high": (4, 7), "medium": (8, 12), "low": (15, 20)}
LAMBDA_TRUE = (6.0, 3.0, 1.5)
_Q = 3
_K_TRUE = 3


@dataclass(frozen=True)
class SimConfig:
    """One simulation cell; q = 3 and three score components are fixed."""

    n: int
    sparsity: str = "medium"
    score_dist: str = "gaussian"
    delta: float = 0.0
    sigma_e: float = 0.2
    grid_size: int = 51
    seed: int | tuple[int, ...] = 0

    def __post_init__(self):
        if self.sparsity not in SPARSITY_SUPPORTS:
            raise ValueError(f"sparsity must be one of {sorted(SPARSITY_SUPPORTS)}")
        if self.score_dist not in ("gaussian", "mixture"):
            raise ValueError("score_dist must be 'gaussian' or 'mixture'")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        lo, hi = SPARSITY_SUPPORTS[self.sparsity]
        if hi > self.grid_size:
            raise ValueError(
                f"sparsity band {self.sparsity} needs up to {hi} distinct times but "
                f"the grid has only {self.grid_size} points"
            )


@dataclass(frozen=True)
class SimTruth:
    """Hidden truth recorded alongside a generated dataset."""

    scores: np.ndarray
    groups: np.ndarray
    m: np.ndarray
    times: tuple[np.ndarray, ...]
    delta: float
    lambda_true: tuple[float, float, float]


@dataclass(frozen=True)
class StudyRow:
    n: int
    sparsity: str
    dist: str
    alpha: float
    delta: float
    rejection_rate: float
    se: float
    replications: int


def _raw_trio(t: np.ndarray) -> np.ndarray:
    """The three sinusoid triplets before orthogonalization; shape (len(t), 3, 3)."""
    c = np.sqrt(2.0 / 3.0)
    out = np.empty((t.size, 3, _Q))
    out[:, 0, 0] = np.sin(2 * np.pi * t)
    out[:, 0, 1] = np.cos(4 * np.pi * t)
    out[:, 0, 2] = np.sin(4 * np.pi * t)
    out[:, 1, 0] = np.sin(np.pi * t / 2)
    out[:, 1, 1] = np.sin(3 * np.pi * t / 2)
    out[:, 1, 2] = np.sin(5 * np.pi * t / 2)
    out[:, 2, 0] = np.sin(np.pi * t)
    out[:, 2, 1] = np.sin(2 * np.pi * t)
    out[:, 2, 2] = np.sin(3 * np.pi * t)
    return c * out


@lru_cache(maxsize=1)
def _ortho_coef() -> np.ndarray:
    """Gram-Schmidt coefficients turning the raw trio into an orthonormal set.

    The raw triplets are unit-norm but not mutually orthogonal in the
    concatenated L2 inner product; psi'_k = sum_{j<=k} C[k, j] raw_j with
    C = (L^-1) for the Cholesky factor L of their Gram matrix, so the first
    function is kept as-is and the others are corrected in order.
    """
    x, w = np.polynomial.legendre.leggauss(200)
    t = 0.5 * (x + 1.0)
    wt = 0.5 * w
    raw = _raw_trio(t)
    gram = np.einsum("nkl,njl,n->kj", raw, raw, wt)
    L = np.linalg.cholesky(gram)
    C = np.linalg.inv(L)
    C.flags.writeable = False
    return C


def true_eigenfunctions(k: int, t) -> np.ndarray:
    """k-th orthonormal eigenfunction (1-based); shape (len(t), 3) or (3,) for scalar t.

    psi_1 is exactly sqrt(2/3) [sin(2 pi t), cos(4 pi t), sin(4 pi t)]; the
    other two are Gram-Schmidt corrections of their sinusoid triplets.
    """
    if k not in (1, 2, 3):
        raise ValueError(f"k must be 1, 2 or 3, got {k}")
    scalar = np.isscalar(t)
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if t_arr.size and (t_arr.min() < 0.0 or t_arr.max() > 1.0):
        raise ValueError("t must lie in [0, 1]")
    C = _ortho_coef()
    vals = np.einsum("j,njl->nl", C[k - 1], _raw_trio(t_arr))
    return vals[0] if scalar else vals


def _eigen_matrix(t: np.ndarray) -> np.ndarray:
    """All three orthonormal eigenfunctions at once; shape (len(t), 3, q)."""
    return np.einsum("kj,njl->nkl", _ortho_coef(), _raw_trio(t))


def true_mean(t) -> np.ndarray:
    """Overall mean (5 sin(2 pi t), 5 cos(2 pi t), 5 (t-1)^2); shape (len(t), 3)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    return np.stack(
        [5 * np.sin(2 * np.pi * t), 5 * np.cos(2 * np.pi * t), 5 * (t - 1.0) ** 2],
        axis=-1,
    )


def treatment_effect_curve(t, delta: float) -> np.ndarray:
    """Group effect 5 delta (t/4 - 0.5)^3, identical for all components."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    eta = 5.0 * delta * (t / 4.0 - 0.5) ** 3
    return np.repeat(eta[:, None], _Q, axis=1)


def true_covariance(s, t) -> np.ndarray:
    """Covariance matrix sum_k lambda_k psi_k(s) psi_k(t)' at two time points."""
    ps = _eigen_matrix(np.atleast_1d(np.asarray(s, dtype=float)))[0]
    pt = _eigen_matrix(np.atleast_1d(np.asarray(t, dtype=float)))[0]
    return np.einsum("k,kl,km->lm", np.array(LAMBDA_TRUE), ps, pt)


def _draw_scores(rng: np.random.Generator, dist: str, n: int) -> np.ndarray:
    lam = np.array(LAMBDA_TRUE)
    if dist == "gaussian":
        return rng.normal(0.0, np.sqrt(lam), size=(n, _K_TRUE))
    # two-point-mean Gaussian mixture: mean 0, variance lambda_k overall
    signs = rng.integers(0, 2, size=(n, _K_TRUE)) * 2 - 1
    return signs * np.sqrt(lam / 2.0) + rng.normal(0.0, np.sqrt(lam / 2.0), size=(n, _K_TRUE))


def generate_dataset(config: SimConfig) -> tuple[MvFunctionalDataset, SimTruth]:
    """Generate one dataset plus its hidden truth, fully determined by the seed."""
    rng = np.random.default_rng(config.seed)
    lo, hi = SPARSITY_SUPPORTS[config.sparsity]
    grid = np.linspace(0.0, 1.0, config.grid_size)
    width = len(str(config.n))

    groups = rng.integers(0, 2, size=config.n)
    m = rng.integers(lo, hi + 1, size=config.n)
    scores = _draw_scores(rng, config.score_dist, config.n)

    subjects = []
    times_record = []
    for i in range(config.n):
        t_i = np.sort(rng.choice(grid, size=m[i], replace=False))
        latent = (
            true_mean(t_i)
            + groups[i] * treatment_effect_curve(t_i, config.delta)
            + np.einsum("k,nkl->nl", scores[i], _eigen_matrix(t_i))
        )
        noise = rng.normal(0.0, config.sigma_e, size=(m[i], _Q))
        subjects.append(
            SubjectSeries(f"s{i + 1:0{width}d}", int(groups[i]), t_i, latent + noise)
        )
        times_record.append(t_i)
    data = MvFunctionalDataset(q=_Q, domain=(0.0, 1.0), subjects=tuple(subjects))
    truth = SimTruth(
        scores=scores, groups=groups.copy(), m=m.copy(),
        times=tuple(times_record), delta=config.delta, lambda_true=LAMBDA_TRUE,
    )
    return data, truth


def _replicate_pvalue(config: SimConfig, rep: int, test_config: PipelineConfig) -> float:
    """p-value of one study replicate; seeded by (cell seed, replicate index)."""
    rep_config = dc_replace(config, seed=_rep_seed(config.seed, rep))
    with threadpool_limits(limits=1):
        data, _ = generate_dataset(rep_config)
        return two_sample_pipeline(data, test_config).p_value


def _rep_seed(seed, rep: int) -> tuple[int, ...]:
    base = (seed,) if np.isscalar(seed) else tuple(seed)
    return base + (rep,)


def _cell_pvalues(config: SimConfig, replications: int, test_config: PipelineConfig,
                  workers: int) -> np.ndarray:
    if workers == 1:
        ps = [_replicate_pvalue(config, rep, test_config) for rep in range(replications)]
    else:
        ps = Parallel(n_jobs=workers)(
            delayed(_replicate_pvalue)(config, rep, test_config)
            for rep in range(replications)
        )
    return np.asarray(ps)


def _rates(pvalues: np.ndarray, alpha: float) -> tuple[float, float]:
    rate = float(np.mean(pvalues < alpha))
    se = float(np.sqrt(rate * (1.0 - rate) / pvalues.size))
    return rate, se


def size_study(
    configs,
    alphas,
    replications: int,
    *,
    test_config: PipelineConfig | None = None,
    workers: int = 1,
) -> list[StudyRow]:
    """Empirical rejection rates under the null for a grid of cells.

    Every config must have delta = 0; each cell reports one row per alpha
    with the binomial standard error of the rate.
    """
    for config in configs:
        if config.delta != 0.0:
            raise ValueError(f"size study requires delta = 0, got {config.delta}")
    if test_config is None:
        test_config = PipelineConfig()
    rows = []
    for config in configs:
        pvalues = _cell_pvalues(config, replications, test_config, workers)
        for alpha in alphas:
            rate, se = _rates(pvalues, alpha)
            rows.append(StudyRow(
                n=config.n, sparsity=config.sparsity, dist=config.score_dist,
                alpha=float(alpha), delta=0.0, rejection_rate=rate, se=se,
                replications=replications,
            ))
    return rows


def power_study(
    configs,
    alpha: float,
    replications: int,
    *,
    test_config: PipelineConfig | None = None,
    workers: int = 1,
) -> list[StudyRow]:
    """Rejection rates across cells (typically a delta grid), in input order."""
    if test_config is None:
        test_config = PipelineConfig()
    rows = []
    for config in configs:
        pvalues = _cell_pvalues(config, replications, test_config, workers)
        rate, se = _rates(pvalues, alpha)
        rows.append(StudyRow(
            n=config.n, sparsity=config.sparsity, dist=config.score_dist,
            alpha=float(alpha), delta=config.delta, rejection_rate=rate, se=se,
            replications=replications,
        ))
    return rows


def write_study_table(rows, path, header_lines=()) -> None:
    """Plot-ready delimited table of study results."""
    with open(path, "w", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("n,sparsity,dist,alpha,delta,rejection_rate,se,replications\n")
        for row in rows:
            fh.write(
                f"{row.n},{row.sparsity},{row.dist},{row.alpha!r},{row.delta!r},"
                f"{row.rejection_rate!r},{row.se!r},{row.replications}\n"
            )


def write_truth(data: MvFunctionalDataset, truth: SimTruth, path, header_lines=()) -> None:
    """Record the hidden truth: per-observation group effect and subject scores."""
    with open(path, "w", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write(f"# lambda_true={','.join(repr(v) for v in truth.lambda_true)} delta={truth.delta!r}\n")
        xi_cols = ",".join(f"xi_{k}" for k in range(1, _K_TRUE + 1))
        eta_cols = ",".join(f"eta_{l}" for l in range(1, _Q + 1))
        fh.write(f"subject,group,time,{xi_cols},{eta_cols}\n")
        for i, subj in enumerate(data.subjects):
            eta = treatment_effect_curve(subj.times, truth.delta)
            xi = ",".join(repr(v) for v in truth.scores[i])
            for j in range(subj.m):
                eta_row = ",".join(repr(v) for v in eta[j])
                fh.write(f"{subj.subject_id},{subj.group},{subj.times[j]!r},{xi},{eta_row}\n")
