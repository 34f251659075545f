"""Particle-based scan matching: Stein variational Newton (and plain SVGD) over SE(3) twists.

Each particle ``xi_k`` is a right perturbation of the prior pose, ``T_k = T_prior exp(xi_k)``.
Per iteration every particle gets its own restricted nearest-neighbour correspondences and
Gauss-Newton terms; the kernel couples them into a common update. The final pose is the prior
moved by the mean twist and the particle scatter is the measurement covariance.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, SingularSystemError
from .icp_core import CloudTerms, cloud_terms, solve_spd
from .manifold import Pose, adjoint, se3_exp, se3_log, twist_compose
from .pointcloud import KDTree, PointCloud, RestrictedSearch, build_sub_targets

log = logging.getLogger(__name__)

BANDWIDTH_FLOOR = 1e-6
NOISE_MODELS = ("sandwich", "residual", "unit")


@dataclass(frozen=True)
class SolverConfig:
    particle_count: int = 30
    init_sigma: tuple = (0.01, 0.01, 0.01, 0.1, 0.1, 0.1)
    max_iterations: int = 100
    early_stop_eps: float = 1e-6
    bandwidth: float | None = None  # None selects the median heuristic
    mode: str = "svn"
    svgd_step_size: float = 0.01
    adam_betas: tuple = (0.9, 0.999)
    prior_weight: str = "off"
    neighborhood_size: int = 20
    huber_delta: float | None = 0.5
    max_corr_dist: float | None = 2.0
    noise_model: str = "residual"
    min_noise_var: float = 1e-8
    karcher_mean: bool = False
    threads: int = 1
    record_history: bool = False

    def __post_init__(self):
        object.__setattr__(self, "init_sigma", tuple(float(s) for s in self.init_sigma))
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        if self.particle_count < 1:
            raise ConfigError("particle_count must be >= 1")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if not self.early_stop_eps > 0:
            raise ConfigError("early_stop_eps must be > 0")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ConfigError("fixed bandwidth must be > 0")
        if len(self.init_sigma) != 6 or any(s < 0 for s in self.init_sigma):
            raise ConfigError("init_sigma must be six non-negative values")
        if self.mode not in ("svn", "svgd"):
            raise ConfigError(f"mode must be 'svn' or 'svgd', got {self.mode!r}")
        if self.prior_weight not in ("off", "gaussian"):
            raise ConfigError(f"prior_weight must be 'off' or 'gaussian', got {self.prior_weight!r}")
        if self.noise_model not in NOISE_MODELS:
            raise ConfigError(f"noise_model must be one of {NOISE_MODELS}, got {self.noise_model!r}")
        if self.neighborhood_size < 1:
            raise ConfigError("neighborhood_size must be >= 1")
        if not self.svgd_step_size > 0:
            raise ConfigError("svgd_step_size must be > 0")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


@dataclass
class ParticleSet:
    twists: np.ndarray
    iteration: int = 0
    terms: list = field(default_factory=list)
    frozen: np.ndarray | None = None

    def __len__(self) -> int:
        return self.twists.shape[0]


@dataclass(frozen=True)
class PoseWithCovariance:
    """A pose with a 6x6 covariance in [theta, p] ordering.

    ``covariance`` is expressed for a left (world-frame) perturbation. Solver outputs
    additionally carry the body-frame particle statistics ``mean_twist``/``icp_covariance``.
    """

    pose: Pose
    covariance: np.ndarray
    mean_twist: np.ndarray = field(default_factory=lambda: np.zeros(6))
    icp_covariance: np.ndarray = field(default_factory=lambda: np.zeros((6, 6)))
    iterations: int = 0
    converged: bool = True
    update_norms: tuple = ()
    particles: np.ndarray | None = None
    final_rms: float = 0.0
    frozen_events: int = 0
    history: tuple = ()

    @classmethod
    def certain(cls, pose: Pose) -> PoseWithCovariance:
        return cls(pose, np.zeros((6, 6)))


def init_particles(config: SolverConfig, seed: int) -> ParticleSet:
    rng = np.random.default_rng(seed)
    sigma = np.asarray(config.init_sigma)
    xi = rng.standard_normal((config.particle_count, 6)) * sigma
    return ParticleSet(xi, frozen=np.zeros(config.particle_count, dtype=bool))


def rbf_kernel(xi_a: np.ndarray, xi_b: np.ndarray, h: float) -> tuple[float, np.ndarray]:
    """``k = exp(-|a-b|^2 / h)`` and its gradient with respect to ``a``."""
    d = np.asarray(xi_a, dtype=float) - np.asarray(xi_b, dtype=float)
    k = float(np.exp(-(d @ d) / h))
    return k, -(2.0 / h) * d * k


def kernel_matrices(xi: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """``K[l, k] = k(xi_l, xi_k)`` and ``G[l, k] = grad_{xi_l} k(xi_l, xi_k)``."""
    diff = xi[:, None, :] - xi[None, :, :]
    Kmat = np.exp(-np.einsum("lkd,lkd->lk", diff, diff) / h)
    G = -(2.0 / h) * diff * Kmat[:, :, None]
    return Kmat, G


def median_bandwidth(particles) -> float:
    xi = np.asarray(getattr(particles, "twists", particles), dtype=float)
    K = xi.shape[0]
    if K < 2:
        return BANDWIDTH_FLOOR
    iu = np.triu_indices(K, k=1)
    diff = xi[:, None, :] - xi[None, :, :]
    d = np.sqrt(np.einsum("lkd,lkd->lk", diff, diff))[iu]
    med = float(np.median(d))
    return max(med * med / np.log(K + 1.0), BANDWIDTH_FLOOR)


def svgd_direction(particles, gradients: np.ndarray, h: float) -> np.ndarray:
    """phi_k = (1/K) sum_l [k(xi_l, xi_k) b_l + grad_{xi_l} k(xi_l, xi_k)]."""
    xi = np.asarray(getattr(particles, "twists", particles), dtype=float)
    Kmat, G = kernel_matrices(xi, h)
    K = xi.shape[0]
    return (Kmat.T @ np.asarray(gradients) + G.sum(axis=0)) / K


def svn_hessian(particles, hessians: np.ndarray, h: float, k: int | None = None) -> np.ndarray:
    """Kernel-averaged Hessian for particle ``k`` (or all particles as (K, 6, 6))."""
    xi = np.asarray(getattr(particles, "twists", particles), dtype=float)
    Kmat, G = kernel_matrices(xi, h)
    K = xi.shape[0]
    Hs = np.asarray(hessians)
    out = (
        np.einsum("lk,lij->kij", Kmat * Kmat, Hs) + np.einsum("lki,lkj->kij", G, G)
    ) / K
    out = 0.5 * (out + np.transpose(out, (0, 2, 1)))
    return out if k is None else out[k]


def sample_mean_cov(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and unbiased covariance (zero for a single sample), two-pass."""
    K = xi.shape[0]
    mean = xi.mean(axis=0)
    if K < 2:
        return mean, np.zeros((6, 6))
    c = xi - mean
    cov = c.T @ c / (K - 1)
    return mean, 0.5 * (cov + cov.T)


def karcher_mean(xi: np.ndarray, iterations: int = 20, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Intrinsic mean of ``exp(xi_k)`` on SE(3) and the covariance of the residual twists."""
    mu = xi.mean(axis=0)
    for _ in range(iterations):
        base_inv = se3_exp(mu).inverse()
        res = np.array([se3_log(base_inv @ se3_exp(x)) for x in xi])
        step = res.mean(axis=0)
        mu = twist_compose(mu, step)
        if step @ step < tol:
            break
    base_inv = se3_exp(mu).inverse()
    res = np.array([se3_log(base_inv @ se3_exp(x)) for x in xi])
    _, cov = sample_mean_cov(res)
    return mu, cov


class _Problem:
    """Per-scan-pair data shared by all particles."""

    def __init__(self, prior: Pose, source: PointCloud, target: PointCloud, tree: KDTree, cfg: SolverConfig):
        self.prior = prior
        self.src = source.points
        self.target = target.points
        sub = build_sub_targets(source, tree, cfg.neighborhood_size, prior)
        self.search = RestrictedSearch(prior.apply(self.src), sub, self.target)
        self.cfg = cfg

    def evaluate(self, xi: np.ndarray) -> CloudTerms:
        pose = self.prior @ se3_exp(xi)
        moved = pose.apply(self.src)
        idx = self.search.query(moved)
        return cloud_terms(
            pose,
            self.src,
            self.target[idx],
            self.cfg.huber_delta,
            self.cfg.max_corr_dist,
            with_score_cov=self.cfg.noise_model == "sandwich",
        )


def _scaled_terms(terms: list[CloudTerms], cfg: SolverConfig) -> tuple[np.ndarray, np.ndarray]:
    """Turn least-squares terms into log-density gradients and Hessians.

    ``unit``: the loss itself is the negative log-density.
    ``residual``: divide by a pooled isotropic residual variance.
    ``sandwich``: precision ``H S^-1 H`` with ``S`` the pooled outer product of per-point
    gradients, so the implied covariance is the robust ``H^-1 S H^-1``.
    """
    b = np.array([t.gradient for t in terms])
    H = np.array([t.hessian for t in terms])
    if cfg.noise_model == "unit":
        return b, H
    dof = 3.0 * sum(t.n_matched for t in terms)
    var = max(sum(t.loss for t in terms) / dof, cfg.min_noise_var)
    if cfg.noise_model == "residual":
        return b / var, H / var
    S = sum(t.score_cov for t in terms) / len(terms)
    # floor keeps S invertible when residuals vanish (noise-free, point-identical clouds)
    S = S + cfg.min_noise_var * np.mean(H, axis=0)
    W = np.linalg.inv(0.5 * (S + S.T))
    HW = H @ W
    Hs = HW @ H
    return np.einsum("kij,kj->ki", HW, b), 0.5 * (Hs + np.transpose(Hs, (0, 2, 1)))


def _body_prior_information(prior: PoseWithCovariance) -> np.ndarray:
    Ad_inv = adjoint(prior.pose.inverse())
    cov = Ad_inv @ prior.covariance @ Ad_inv.T
    cov = 0.5 * (cov + cov.T)
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ConfigError("gaussian prior requires a positive-definite prior covariance") from None
    info = np.linalg.inv(cov)
    return 0.5 * (info + info.T)


def solve_icp(
    prior: PoseWithCovariance | Pose,
    source: PointCloud,
    target: PointCloud,
    config: SolverConfig | None = None,
    seed: int = 0,
    target_tree: KDTree | None = None,
) -> PoseWithCovariance:
    """Align ``source`` to ``target`` starting from ``prior``.

    Returns the corrected pose with covariance ``prior.cov + Ad cov_icp Ad^T``.
    """
    cfg = config or SolverConfig()
    if isinstance(prior, Pose):
        prior = PoseWithCovariance.certain(prior)
    tree = target_tree if target_tree is not None else KDTree(target.points)
    problem = _Problem(prior.pose, source, target, tree, cfg)
    info_prior = _body_prior_information(prior) if cfg.prior_weight == "gaussian" else None

    ps = init_particles(cfg, seed)
    xi = ps.twists
    K = xi.shape[0]
    beta1, beta2 = cfg.adam_betas
    m1 = np.zeros_like(xi)
    m2 = np.zeros_like(xi)
    norms: list[float] = []
    history = [xi.copy()] if cfg.record_history else []
    frozen_events = 0
    converged = False
    iterations = cfg.max_iterations
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 and K > 1 else None

    try:
        for it in range(1, cfg.max_iterations + 1):
            # every particle is evaluated against the iteration-start state
            if pool is not None:
                terms = list(pool.map(problem.evaluate, list(xi)))
            else:
                terms = [problem.evaluate(x) for x in xi]
            b, H = _scaled_terms(terms, cfg)
            if info_prior is not None:
                b = b - xi @ info_prior.T
                H = H + info_prior

            h = cfg.bandwidth if cfg.bandwidth is not None else median_bandwidth(xi)
            phi = svgd_direction(xi, b, h)

            if cfg.mode == "svn":
                Ht = svn_hessian(xi, H, h)
                delta = np.zeros_like(xi)
                for k in range(K):
                    try:
                        delta[k] = solve_spd(Ht[k], phi[k])
                    except SingularSystemError:
                        try:
                            delta[k] = solve_spd(Ht[k], phi[k], 1e-9 * np.trace(Ht[k]) / 6.0)
                        except SingularSystemError:
                            frozen_events += 1
                            log.debug("particle %d frozen at iteration %d", k, it)
            else:
                # Adam moments on phi, which already points uphill in log-density
                m1 = beta1 * m1 + (1 - beta1) * phi
                m2 = beta2 * m2 + (1 - beta2) * phi * phi
                mhat = m1 / (1 - beta1**it)
                vhat = m2 / (1 - beta2**it)
                delta = cfg.svgd_step_size * mhat / (np.sqrt(vhat) + 1e-8)

            xi = np.array([twist_compose(x, d) for x, d in zip(xi, delta)])
            if cfg.record_history:
                history.append(xi.copy())
            sq = float(np.mean(np.einsum("kd,kd->k", delta, delta)))
            norms.append(sq)
            if not np.all(np.isfinite(xi)):
                raise SingularSystemError("particle state became non-finite")
            if sq < cfg.early_stop_eps:
                converged = True
                iterations = it
                break
    finally:
        if pool is not None:
            pool.shutdown()

    if cfg.karcher_mean and K > 1:
        mean, cov = karcher_mean(xi)
    else:
        mean, cov = sample_mean_cov(xi)
    pose = prior.pose @ se3_exp(mean)
    Ad = adjoint(prior.pose)
    sigma = prior.covariance + Ad @ cov @ Ad.T
    sigma = 0.5 * (sigma + sigma.T)
    final = problem.evaluate(mean)
    rms = float(np.sqrt(final.loss / final.n_matched))
    return PoseWithCovariance(
        pose=pose,
        covariance=sigma,
        mean_twist=mean,
        icp_covariance=cov,
        iterations=iterations,
        converged=converged,
        update_norms=tuple(norms),
        particles=xi,
        final_rms=rms,
        frozen_events=frozen_events,
        history=tuple(history),
    )


def with_overrides(cfg: SolverConfig, **kw) -> SolverConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
