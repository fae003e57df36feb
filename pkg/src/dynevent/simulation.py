"""
Panel simulation from the joint data-generating process.

Each unit owns an independent random stream derived from ``(seed, unit index)``, so a
panel is identical whatever the chunking or thread count. Within a period the covariate
is drawn from the feedback law before the outcome shock enters, which is what makes
X_it predetermined with respect to U_it.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model_core import (
    NEVER,
    AdmissibilityError,
    DesignError,
    DimensionError,
    EventDesign,
    FeedbackModel,
    HeterogeneityModel,
    PanelData,
    StructuralParams,
    delta_path,
    psd_factor,
)

CHUNK = 512

# stream domains; keeps simulation and counterfactual draws disjoint for the same seed
SIM_STREAM = 0
SCENARIO_STREAM = 1
PERTURB_STREAM = 2

_LOG2PI = np.log(2.0 * np.pi)


def unit_rng(seed: int, domain: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(domain, int(index)))))


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("DYNEVENT_THREADS", "1")))
    except ValueError:
        return 1


def chunked_map(fn, n: int, threads: int = 1, chunk: int = CHUNK):
    """Apply ``fn(lo, hi)`` over fixed unit chunks; results in chunk order."""
    bounds = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
    if threads <= 1 or len(bounds) <= 1:
        return [fn(lo, hi) for lo, hi in bounds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda b: fn(*b), bounds))


@dataclass(frozen=True, eq=False)
class InitialLaw:
    """Gaussian law of (Y0, X0'); a zero covariance gives fixed initial conditions."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.cov, dtype=float).reshape(mean.size, mean.size)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def fixed(cls, Y0: float, X0) -> "InitialLaw":
        mean = np.concatenate([[Y0], np.atleast_1d(X0)])
        return cls(mean, np.zeros((mean.size, mean.size)))


@dataclass(frozen=True, eq=False)
class LatentRecord:
    alpha: np.ndarray  # (N,)
    delta0: np.ndarray  # (N,)
    eps: np.ndarray  # (N, J_max)
    U: np.ndarray  # (N, T)
    eta: np.ndarray  # (N, T, K) covariate innovations

    def lambdas(self) -> np.ndarray:
        return np.column_stack([self.alpha, self.delta0])

    def delta(self, rho_delta: float) -> np.ndarray:
        return delta_path(self.delta0, self.eps, rho_delta)


@dataclass(frozen=True, eq=False)
class SimConfig:
    N: int
    design: EventDesign
    theta: StructuralParams
    het: HeterogeneityModel
    feedback: FeedbackModel
    initial_law: InitialLaw
    cohort_law: np.ndarray  # probabilities over (1, ..., T, NEVER)
    seed: int = 0
    # optional hook (Y0, X0) -> cohort probabilities, to let adoption depend on I0
    cohort_hook: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        object.__setattr__(self, "cohort_law", np.asarray(self.cohort_law, dtype=float))
        self.validate()

    def validate(self):
        d = self.design
        if int(self.N) < 1:
            raise DesignError("N must be >= 1")
        if self.cohort_law.shape != (d.T + 1,):
            raise DimensionError(f"cohort_law must have length T + 1 = {d.T + 1}")
        if np.any(self.cohort_law < 0) or abs(self.cohort_law.sum() - 1.0) > 1e-12:
            raise AdmissibilityError("cohort_law must be a probability vector")
        if self.theta.K != d.K or self.het.K != d.K or self.feedback.K != d.K:
            raise DimensionError("theta, heterogeneity and feedback must share K")
        self.theta.gamma_or_zeros(d.T)
        if self.feedback.a_d.shape != (d.K, d.n_events):
            raise DimensionError(f"a_d must have shape ({d.K}, {d.n_events})")
        if self.initial_law.mean.shape != (1 + d.K,):
            raise DimensionError(f"initial_law mean must have length {1 + d.K}")
        psd_factor(self.het.cov, "heterogeneity cov")
        psd_factor(self.initial_law.cov, "initial_law cov")

    def replace(self, **changes) -> "SimConfig":
        kw = {k: getattr(self, k) for k in
              ("N", "design", "theta", "het", "feedback", "initial_law", "cohort_law", "seed",
               "cohort_hook")}
        kw.update(changes)
        return SimConfig(**kw)


def n_shocks(design: EventDesign) -> int:
    """Standard normals per unit path: lambda (2), eps (J_max), then per period eta (K) and U (1)."""
    return 2 + design.J_max + design.T * (design.K + 1)


def split_shocks(z: np.ndarray, design: EventDesign):
    """Views of a (..., n_shocks) block as (lambda, eps, eta, u) standard normals."""
    J, T, K = design.J_max, design.T, design.K
    lam = z[..., :2]
    eps = z[..., 2:2 + J]
    per = z[..., 2 + J:].reshape(z.shape[:-1] + (T, K + 1))
    return lam, eps, per[..., :K], per[..., K]


def roll_forward(theta: StructuralParams, design: EventDesign, Y0, X0, t0, alpha, delta,
                 u, feedback: Optional[FeedbackModel] = None, eta=None, x_path=None):
    """Iterate the outcome recursion in calendar time.

    ``delta`` is (n, J_max + 1), ``u`` (n, T) scaled outcome shocks, ``eta`` (n, T, K)
    scaled covariate innovations. If ``x_path`` is given the covariates are held at it and
    the feedback law is not used. Returns (Y, X) with shapes (n, T) and (n, T, K).
    """
    T, K = design.T, design.K
    t0 = np.asarray(t0, dtype=np.int64)
    n = t0.shape[0]
    gamma = theta.gamma_or_zeros(T)
    Y = np.empty((n, T))
    X = np.empty((n, T, K))
    y_prev = np.asarray(Y0, dtype=float).reshape(n)
    x_prev = np.asarray(X0, dtype=float).reshape(n, K)
    for t in range(1, T + 1):
        D = design.indicators(t0, t)
        if x_path is None:
            x_t = feedback.mean(x_prev, y_prev, D) + eta[:, t - 1]
        else:
            x_t = x_path[:, t - 1]
        effect = np.sum(D * delta, axis=1)
        y_t = theta.rho_Y * y_prev + alpha + x_t @ theta.beta + gamma[t - 1] + effect + u[:, t - 1]
        X[:, t - 1] = x_t
        Y[:, t - 1] = y_t
        x_prev, y_prev = x_t, y_t
    return Y, X


def _draw_cohorts(cfg: SimConfig, u: np.ndarray, Y0: np.ndarray, X0: np.ndarray) -> np.ndarray:
    T = cfg.design.T
    values = np.array(list(range(1, T + 1)) + [NEVER], dtype=np.int64)
    if cfg.cohort_hook is None:
        probs = np.broadcast_to(cfg.cohort_law, (u.shape[0], T + 1))
    else:
        probs = np.asarray(cfg.cohort_hook(Y0, X0), dtype=float).reshape(u.shape[0], T + 1)
    cdf = np.cumsum(probs, axis=1)
    idx = (u[:, None] >= cdf).sum(axis=1)
    return values[np.minimum(idx, T)]


def _simulate_chunk(cfg: SimConfig, lo: int, hi: int):
    d = cfg.design
    n = hi - lo
    m = n_shocks(d)
    u_cohort = np.empty(n)
    z_init = np.empty((n, 1 + d.K))
    z = np.empty((n, m))
    for r, i in enumerate(range(lo, hi)):
        rng = unit_rng(cfg.seed, SIM_STREAM, i)
        z_init[r] = rng.standard_normal(1 + d.K)
        u_cohort[r] = rng.random()
        z[r] = rng.standard_normal(m)

    init = cfg.initial_law.mean + z_init @ psd_factor(cfg.initial_law.cov).T
    Y0, X0 = init[:, 0], init[:, 1:]
    t0 = _draw_cohorts(cfg, u_cohort, Y0, X0)

    z_lam, z_eps, z_eta, z_u = split_shocks(z, d)
    lam = cfg.het.mean(Y0, X0, t0) + z_lam @ psd_factor(cfg.het.cov).T
    eps = np.sqrt(cfg.theta.sigma2_eps) * z_eps
    delta = delta_path(lam[:, 1], eps, cfg.theta.rho_delta)
    eta = z_eta @ cfg.feedback.factor.T
    U = np.sqrt(cfg.theta.sigma2_U) * z_u
    Y, X = roll_forward(cfg.theta, d, Y0, X0, t0, lam[:, 0], delta, U, cfg.feedback, eta)
    return Y0, X0, t0, Y, X, lam, eps, U, eta


def simulate_panel(cfg: SimConfig, threads: Optional[int] = None) -> tuple[PanelData, LatentRecord]:
    """Draw a panel and the latent record that generated it."""
    threads = default_threads() if threads is None else threads
    parts = chunked_map(lambda lo, hi: _simulate_chunk(cfg, lo, hi), cfg.N, threads)
    Y0, X0, t0, Y, X, lam, eps, U, eta = (np.concatenate(p) for p in zip(*parts))
    panel = PanelData(Y0=Y0, X0=X0, t0=t0, Y=Y, X=X)
    latent = LatentRecord(alpha=lam[:, 0], delta0=lam[:, 1], eps=eps, U=U, eta=eta)
    return panel, latent


def _gauss_logpdf(resid: np.ndarray, var: float) -> np.ndarray:
    return -0.5 * (_LOG2PI + np.log(var) + resid**2 / var)


def joint_logdensity(panel: PanelData, latent: LatentRecord, theta: StructuralParams,
                     feedback: FeedbackModel, design: EventDesign):
    """Per-unit log factors given lambda: (outcome block, feedback block g).

    The outcome block is the product over t of N(Y_it; conditional mean, sigma2_U) given
    lambda and the realised treatment effects; g is the product of covariate transition
    densities and never looks at lambda. Both arrays have shape (N,).
    """
    panel.check_design(design)
    T, K = design.T, design.K
    if latent.alpha.shape != (panel.N,) or latent.eps.shape != (panel.N, design.J_max):
        raise DimensionError("latent record does not match the panel")
    gamma = theta.gamma_or_zeros(T)
    delta = latent.delta(theta.rho_delta)
    try:
        S_chol = np.linalg.cholesky(feedback.Sigma_X)
    except np.linalg.LinAlgError:
        raise AdmissibilityError("Sigma_X must be positive definite to evaluate densities") from None
    S_logdet = 2.0 * np.log(np.diag(S_chol)).sum()

    logf = np.zeros(panel.N)
    logg = np.zeros(panel.N)
    y_prev, x_prev = panel.Y0, panel.X0
    for t in range(1, T + 1):
        D = design.indicators(panel.t0, t)
        x_t = panel.X[:, t - 1]
        y_t = panel.Y[:, t - 1]
        r_x = x_t - feedback.mean(x_prev, y_prev, D)
        w = np.linalg.solve(S_chol, r_x.T)
        logg += -0.5 * (K * _LOG2PI + S_logdet + np.sum(w**2, axis=0))
        m_y = (theta.rho_Y * y_prev + latent.alpha + x_t @ theta.beta + gamma[t - 1]
               + np.sum(D * delta, axis=1))
        logf += _gauss_logpdf(y_t - m_y, theta.sigma2_U)
        y_prev, x_prev = y_t, x_t
    return logf, logg
