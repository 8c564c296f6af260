"""Gaussian-mixture estimation, sample energy, and the classical EM oracle.

Two routes compute the same mixture statistics:

* ``estimate_gmm`` builds them inside the autodiff graph from soft
  memberships, so gradients flow back into both the latent batch and
  the membership matrix during training.
* ``em_fit`` / ``_m_step`` are a plain-numpy classical EM implementation,
  written independently, whose M-step must agree with ``estimate_gmm``
  to 1e-12 on identical responsibilities (``cross_check_estimation``).

Energies are computed in log space with log-sum-exp; evaluating the
mixture density directly underflows for samples far from every
component.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidInputError, NumericError, VerificationError

DEFAULT_COV_EPS = 1e-6
DEGENERATE_MASS = 1e-12
LOG_TWO_PI = float(np.log(2.0 * np.pi))


@dataclass
class GmmParams:
    """Mixture weights, means, and full covariance matrices.

    All fields are graph tensors so downstream energies stay
    differentiable; use ``from_arrays`` to wrap plain numpy values
    (e.g. parameters loaded from a checkpoint).
    """

    alpha: Tensor               # [K]
    means: list                 # K tensors of shape [d]
    covariances: list           # K tensors of shape [d, d]

    @property
    def n_components(self) -> int:
        return self.alpha.shape[0]

    @property
    def dim(self) -> int:
        return self.means[0].shape[0]

    @classmethod
    def from_arrays(cls, alpha: np.ndarray, means: np.ndarray, covariances: np.ndarray) -> "GmmParams":
        return cls(
            alpha=Tensor(alpha),
            means=[Tensor(means[k]) for k in range(len(alpha))],
            covariances=[Tensor(covariances[k]) for k in range(len(alpha))],
        )

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        alpha = self.alpha.data.copy()
        means = np.stack([m.data for m in self.means])
        covs = np.stack([c.data for c in self.covariances])
        return alpha, means, covs

    def validate(self, atol: float = 1e-9) -> None:
        """Raise NumericError if any invariant fails.

        Weights nonnegative and summing to 1, covariances symmetric and
        positive definite (Cholesky must succeed).
        """
        alpha, means, covs = self.as_arrays()
        if np.any(alpha < -atol) or abs(alpha.sum() - 1.0) > atol:
            raise NumericError(f"mixture weights invalid: {alpha}")
        if not np.all(np.isfinite(means)):
            raise NumericError("non-finite mixture mean")
        for k in range(self.n_components):
            if np.max(np.abs(covs[k] - covs[k].T)) > atol:
                raise NumericError(f"covariance {k} is not symmetric")
            try:
                np.linalg.cholesky(covs[k])
            except np.linalg.LinAlgError as err:
                raise NumericError(f"covariance {k} is not positive definite") from err


def estimate_gmm(z: Tensor, gamma: Tensor, eps: float = DEFAULT_COV_EPS) -> GmmParams:
    """Mixture statistics of a batch from soft memberships, differentiable.

    For each component k with responsibility mass s_k = Σ_i γ_ik:

        weight_k     = s_k / n
        mean_k       = Σ_i γ_ik z_i / s_k
        covariance_k = Σ_i γ_ik (z_i - mean_k)(z_i - mean_k)ᵀ / s_k + eps·I

    A component whose mass falls below 1e-12 is reset to the batch mean
    with covariance eps·I so that one dead mixture slot cannot abort
    training.
    """
    if z.ndim != 2 or gamma.ndim != 2 or z.shape[0] != gamma.shape[0]:
        raise InvalidInputError(f"incompatible latent/membership shapes {z.shape} and {gamma.shape}")
    n, d = z.shape
    k_components = gamma.shape[1]
    if n < 2:
        raise InvalidInputError("mixture estimation needs at least 2 samples")
    if eps < 0.0:
        raise InvalidInputError("covariance floor must be nonnegative")

    eye = Tensor(np.eye(d) * eps)
    alpha = ad.mul(ad.sum_axis(gamma, 0), 1.0 / n)

    means = []
    covariances = []
    global_mean = None
    zt = ad.transpose(z)
    for k in range(k_components):
        resp_k = ad.select_col(gamma, k)
        mass_k = ad.tensor_sum(resp_k)
        if mass_k.item() < DEGENERATE_MASS:
            if global_mean is None:
                global_mean = ad.mul(ad.sum_axis(z, 0), 1.0 / n)
            means.append(global_mean)
            covariances.append(Tensor(np.eye(d) * eps))
            continue
        inv_mass = ad.div(Tensor(1.0), mass_k)
        mean_k = ad.mul(ad.reshape(ad.matmul(zt, ad.reshape(resp_k, (n, 1))), (d,)), inv_mass)
        centered = ad.sub_rowvec(z, mean_k)
        weighted = ad.scale_rows(centered, resp_k)
        scatter = ad.mul(ad.matmul(ad.transpose(weighted), centered), inv_mass)
        covariances.append(ad.add(ad.symmetrize(scatter), eye))
        means.append(mean_k)

    return GmmParams(alpha=alpha, means=means, covariances=covariances)


def component_log_densities(z: Tensor, params: GmmParams) -> Tensor:
    """Per-sample, per-component log(weight_k · N(z; mean_k, cov_k)) as [n x K]."""
    zb = z if z.ndim == 2 else ad.reshape(z, (1, z.shape[0]))
    d = params.dim
    log_alpha = ad.log(ad.clip(params.alpha, 1e-300, np.inf))
    cols = []
    for k in range(params.n_components):
        diff = ad.sub_rowvec(zb, params.means[k])
        inv_cov = ad.matrix_inverse_psd(params.covariances[k])
        quad = ad.sum_axis(ad.mul(ad.matmul(diff, inv_cov), diff), 1)
        log_norm = ad.mul(ad.add(ad.logdet_psd(params.covariances[k]), d * LOG_TWO_PI), -0.5)
        log_weight = ad.take(log_alpha, k)
        cols.append(ad.add(ad.mul(quad, -0.5), ad.add(log_norm, log_weight)))
    return ad.stack_cols(cols)


def energy_batch(z: Tensor, params: GmmParams) -> Tensor:
    """Negative log mixture density for each row of a latent batch [n x d]."""
    return ad.neg(ad.logsumexp_rows(component_log_densities(z, params)))


def energy(z: Tensor, params: GmmParams) -> Tensor:
    """Negative log mixture density of one latent vector [d]."""
    if z.ndim != 1:
        raise InvalidInputError(f"energy expects a single vector, got shape {z.shape}")
    return ad.take(energy_batch(z, params), 0)


def estimation_loss(
    z_batch: Tensor,
    gamma: Tensor,
    params: GmmParams,
    lambda1: float,
    lambda2: float,
) -> Tensor:
    """Summed batch energy plus the covariance-diagonal penalty.

        lambda1 · Σ_i E(z_i) + lambda2 · Σ_k Σ_j 1 / covariance_k[j, j]

    ``params`` must come from ``estimate_gmm`` on the same (z_batch,
    gamma) so that both terms stay differentiable end to end.  The
    penalty pushes covariance diagonals away from zero; without it the
    mixture can collapse onto single samples.
    """
    total_energy = ad.tensor_sum(energy_batch(z_batch, params))
    penalty = None
    for cov in params.covariances:
        term = ad.tensor_sum(ad.div(Tensor(1.0), ad.diag_part(cov)))
        penalty = term if penalty is None else ad.add(penalty, term)
    return ad.add(ad.mul(total_energy, lambda1), ad.mul(penalty, lambda2))


# ---------------------------------------------------------------------------
# classical EM (plain numpy): the independent oracle for the batch statistics
# ---------------------------------------------------------------------------

def _log_gaussian(z: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = z.shape[1]
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as err:
        raise NumericError("covariance is not positive definite") from err
    solved = np.linalg.solve(chol, (z - mean).T)
    quad = (solved * solved).sum(axis=0)
    logdet = 2.0 * np.log(np.diagonal(chol)).sum()
    return -0.5 * (quad + d * LOG_TWO_PI + logdet)


def mixture_log_pdf(z: np.ndarray, alpha: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """Log density of the mixture at each row of z, via log-sum-exp."""
    with np.errstate(divide="ignore"):
        logs = np.stack(
            [np.log(alpha[k]) + _log_gaussian(z, means[k], covs[k]) for k in range(len(alpha))],
            axis=1,
        )
    m = logs.max(axis=1, keepdims=True)
    m[~np.isfinite(m)] = 0.0
    return (m + np.log(np.exp(logs - m).sum(axis=1, keepdims=True))).reshape(-1)


def _m_step(z: np.ndarray, resp: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Maximization step: same degenerate-component rule as estimate_gmm."""
    n, d = z.shape
    k_components = resp.shape[1]
    mass = resp.sum(axis=0)
    alpha = mass / n
    means = np.empty((k_components, d))
    covs = np.empty((k_components, d, d))
    for k in range(k_components):
        if mass[k] < DEGENERATE_MASS:
            means[k] = z.mean(axis=0)
            covs[k] = np.eye(d) * eps
            continue
        means[k] = np.einsum("i,id->d", resp[:, k], z) / mass[k]
        centered = z - means[k]
        cov = np.einsum("i,id,ie->de", resp[:, k], centered, centered) / mass[k]
        covs[k] = (cov + cov.T) / 2.0 + np.eye(d) * eps
    return alpha, means, covs


@dataclass
class EmResult:
    params: GmmParams
    log_likelihood: list = field(default_factory=list)  # mean log density per iteration


def em_fit(
    z: np.ndarray,
    k_components: int,
    seed: int,
    iters: int = 50,
    eps: float = DEFAULT_COV_EPS,
) -> EmResult:
    """Classical EM with distance-weighted (k-means++ style) seeding.

    The mean log likelihood is recorded each iteration and must be
    non-decreasing up to 1e-9 slack; a violation indicates a broken
    E/M step and raises VerificationError.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise InvalidInputError(f"em_fit expects a sample matrix, got shape {z.shape}")
    n = z.shape[0]
    if n <= k_components:
        raise InvalidInputError(f"need more samples ({n}) than components ({k_components})")
    if iters < 1:
        raise InvalidInputError("iters must be >= 1")
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite samples")

    rng = np.random.default_rng(seed)
    centers = [z[rng.integers(n)]]
    for _ in range(1, k_components):
        d2 = np.min([((z - c) ** 2).sum(axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0.0:
            centers.append(z[rng.integers(n)])
            continue
        centers.append(z[rng.choice(n, p=d2 / total)])
    centers = np.stack(centers)

    # Hard assignment to the nearest seed center gives the initial responsibilities.
    d2 = ((z[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    resp = np.zeros((n, k_components))
    resp[np.arange(n), d2.argmin(axis=1)] = 1.0
    alpha, means, covs = _m_step(z, resp, eps)

    history: list[float] = []
    for _ in range(iters):
        logs = np.stack(
            [np.log(np.maximum(alpha[k], 1e-300)) + _log_gaussian(z, means[k], covs[k]) for k in range(k_components)],
            axis=1,
        )
        m = logs.max(axis=1, keepdims=True)
        log_mix = m + np.log(np.exp(logs - m).sum(axis=1, keepdims=True))
        history.append(float(log_mix.mean()))
        if len(history) > 1 and history[-1] < history[-2] - 1e-9:
            raise VerificationError(
                f"EM log-likelihood decreased: {history[-2]} -> {history[-1]}"
            )
        resp = np.exp(logs - log_mix)
        alpha, means, covs = _m_step(z, resp, eps)

    return EmResult(params=GmmParams.from_arrays(alpha, means, covs), log_likelihood=history)


# ---------------------------------------------------------------------------
# cross-check between the two routes
# ---------------------------------------------------------------------------

@dataclass
class CrossCheckReport:
    max_weight_diff: float
    max_mean_diff: float
    max_cov_diff: float
    tolerance: float
    ok: bool

    def __str__(self) -> str:
        status = "OK" if self.ok else "MISMATCH"
        return (
            f"membership-statistics cross-check [{status}] tol={self.tolerance:g} "
            f"weights={self.max_weight_diff:.3e} means={self.max_mean_diff:.3e} "
            f"covariances={self.max_cov_diff:.3e}"
        )


def cross_check_estimation(
    z: np.ndarray,
    gamma: np.ndarray,
    eps: float = DEFAULT_COV_EPS,
    tolerance: float = 1e-12,
) -> CrossCheckReport:
    """Compare estimate_gmm against one EM M-step on identical responsibilities."""
    z = np.asarray(z, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    graph_params = estimate_gmm(Tensor(z), Tensor(gamma), eps=eps)
    g_alpha, g_means, g_covs = graph_params.as_arrays()
    e_alpha, e_means, e_covs = _m_step(z, gamma, eps)
    report = CrossCheckReport(
        max_weight_diff=float(np.max(np.abs(g_alpha - e_alpha))),
        max_mean_diff=float(np.max(np.abs(g_means - e_means))),
        max_cov_diff=float(np.max(np.abs(g_covs - e_covs))),
        tolerance=tolerance,
        ok=True,
    )
    report.ok = max(report.max_weight_diff, report.max_mean_diff, report.max_cov_diff) <= tolerance
    return report
