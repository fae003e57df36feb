"""
Integrated Gaussian likelihood of outcome paths given covariate paths and initial conditions.

With the feedback factor divided out, each unit's outcome path is Gaussian given
(X path, I0): lambda, eps and U all enter linearly, so the heterogeneity distribution is
integrated in closed form. The covariance depends on the unit only through its adoption
period, so it is factorised once per cohort.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .model_core import (
    DimensionError,
    EventDesign,
    HeterogeneityModel,
    ModelError,
    PanelData,
    SingularCovarianceError,
    StructuralParams,
    build_loadings,
    effect_propagator,
    initial_propagation,
    persistence_matrix,
    treatment_loadings,
)

_LOG2PI = np.log(2.0 * np.pi)
JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass(frozen=True, eq=False)
class MarginalGaussian:
    mean: np.ndarray
    cov: np.ndarray
    cov_factor: np.ndarray

    def logpdf(self, y) -> float:
        w = solve_triangular(self.cov_factor, np.asarray(y, dtype=float) - self.mean, lower=True)
        logdet = 2.0 * np.log(np.diag(self.cov_factor)).sum()
        return float(-0.5 * (self.mean.size * _LOG2PI + logdet + w @ w))


def robust_cholesky(cov: np.ndarray, unit=None) -> np.ndarray:
    """Cholesky with escalating diagonal jitter (relative to the mean diagonal)."""
    scale = max(float(np.mean(np.diag(cov))), np.finfo(float).tiny)
    for jitter in JITTERS:
        try:
            a = cov if jitter == 0.0 else cov + jitter * scale * np.eye(cov.shape[0])
            return np.linalg.cholesky(a)
        except np.linalg.LinAlgError:
            continue
    where = "" if unit is None else f" for unit {unit}"
    raise SingularCovarianceError(f"outcome covariance is numerically singular{where}", unit=unit)


def cohort_covariance(theta: StructuralParams, het: HeterogeneityModel, design: EventDesign,
                      t0: int, L_U=None):
    """(L_lambda, cov) shared by every unit with adoption period t0."""
    if L_U is None:
        L_U = persistence_matrix(theta.rho_Y, design.T)
    L_delta0, L_eps = treatment_loadings(theta.rho_Y, theta.rho_delta, design, t0, L_U)
    L_lam = np.column_stack([L_U.sum(axis=1), L_delta0])
    cov = (L_lam @ het.cov @ L_lam.T + theta.sigma2_eps * (L_eps @ L_eps.T)
           + theta.sigma2_U * (L_U @ L_U.T))
    return L_lam, 0.5 * (cov + cov.T)


def marginal_of_unit(theta: StructuralParams, het: HeterogeneityModel, design: EventDesign,
                     Y0: float, X0, t0: int, X, unit=None) -> MarginalGaussian:
    """Law of Y_1..Y_T given the covariate path and I0, lambda integrated out."""
    ld = build_loadings(theta, design, Y0, X0, t0, X)
    mu_lam = het.mean([Y0], np.reshape(X0, (1, -1)), [t0])[0]
    L_lam, cov = cohort_covariance(theta, het, design, t0, ld.L_U)
    return MarginalGaussian(mean=ld.b + L_lam @ mu_lam, cov=cov,
                            cov_factor=robust_cholesky(cov, unit))


def outcome_baseline(theta: StructuralParams, design: EventDesign, panel: PanelData,
                     L_U=None) -> np.ndarray:
    """b for every unit, shape (N, T)."""
    if L_U is None:
        L_U = persistence_matrix(theta.rho_Y, design.T)
    drive = panel.X @ theta.beta + theta.gamma_or_zeros(design.T)
    return panel.Y0[:, None] * initial_propagation(theta.rho_Y, design.T) + drive @ L_U.T


def unit_logliks(theta: StructuralParams, het: HeterogeneityModel, panel: PanelData,
                 design: EventDesign) -> np.ndarray:
    panel.check_design(design)
    if theta.K != design.K or het.K != design.K:
        raise DimensionError("parameter dimensions do not match the design")
    T = design.T
    L_U = persistence_matrix(theta.rho_Y, T)
    resid = panel.Y - outcome_baseline(theta, design, panel, L_U)
    mu = het.mean(panel.Y0, panel.X0, panel.t0)
    out = np.empty(panel.N)
    for c in np.unique(panel.t0):
        idx = np.flatnonzero(panel.t0 == c)
        L_lam, cov = cohort_covariance(theta, het, design, int(c), L_U)
        chol = robust_cholesky(cov, unit=int(idx[0]))
        r = resid[idx] - mu[idx] @ L_lam.T
        w = solve_triangular(chol, r.T, lower=True)
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        out[idx] = -0.5 * (T * _LOG2PI + logdet + np.sum(w * w, axis=0))
    return out


def loglik(theta: StructuralParams, het: HeterogeneityModel, panel: PanelData,
           design: EventDesign) -> float:
    """Sum over units of log N(Y_i; mean_i, cov_i). The feedback block is excluded."""
    return float(np.sum(unit_logliks(theta, het, panel, design)))


def lambda_posterior(theta: StructuralParams, het: HeterogeneityModel, design: EventDesign,
                     panel: PanelData):
    """Gaussian conditional of lambda given each unit's observed path.

    Returns means (N, 2) and covariances (N, 2, 2).
    """
    panel.check_design(design)
    L_U = persistence_matrix(theta.rho_Y, design.T)
    resid = panel.Y - outcome_baseline(theta, design, panel, L_U)
    mu = het.mean(panel.Y0, panel.X0, panel.t0)
    means = np.empty((panel.N, 2))
    covs = np.empty((panel.N, 2, 2))
    S = het.cov
    for c in np.unique(panel.t0):
        idx = np.flatnonzero(panel.t0 == c)
        L_lam, cov = cohort_covariance(theta, het, design, int(c), L_U)
        chol = robust_cholesky(cov, unit=int(idx[0]))
        G = solve_triangular(chol, L_lam @ S, lower=True)  # chol^-1 L_lam S
        r = resid[idx] - mu[idx] @ L_lam.T
        w = solve_triangular(chol, r.T, lower=True)
        means[idx] = mu[idx] + (G.T @ w).T
        post = S - G.T @ G
        covs[idx] = 0.5 * (post + post.T)
    return means, covs


@dataclass(frozen=True, eq=False)
class CrossSectionMeans:
    Y_bar: np.ndarray  # (T,)
    X_bar: np.ndarray  # (T, K)
    Y0_bar: float
    X0_bar: np.ndarray  # (K,)


def _demean_columns(a: np.ndarray, rel_tol: float = 1e-12, max_pass: int = 10):
    """Subtract column means until each is negligible against the column's mean magnitude.

    The output always meets the stopping rule, so demeaning it again is a no-op and the
    transform is idempotent bitwise.
    """
    out = a.copy()
    total = np.zeros(a.shape[1:])
    for _ in range(max_pass):
        m = out.mean(axis=0)
        m = np.where(np.abs(m) > rel_tol * np.abs(out).mean(axis=0), m, 0.0)
        if not np.any(m):
            break
        out = out - m
        total += m
    return out, total


def demean_panel(panel: PanelData) -> tuple[PanelData, CrossSectionMeans]:
    """Cross-sectional demeaning of outcomes, covariates and initial conditions.

    The demeaned outcome equation holds exactly, with the cross-sectional mean of the effect
    term as an extra regressor. Treating demeaned units as independent is only approximate at
    finite N, since every unit shares the subtracted means.
    """
    if panel.N < 2:
        raise ModelError("demeaning needs at least two units")
    Y, Ybar = _demean_columns(panel.Y)
    X, Xbar = _demean_columns(panel.X)
    Y0, Y0bar = _demean_columns(panel.Y0)
    X0, X0bar = _demean_columns(panel.X0)
    out = PanelData(Y0=Y0, X0=X0, t0=panel.t0, Y=Y, X=X)
    return out, CrossSectionMeans(Y_bar=Ybar, X_bar=Xbar, Y0_bar=float(Y0bar), X0_bar=X0bar)


def _dpersistence(rho_Y: float, T: int) -> np.ndarray:
    """Elementwise derivative of the persistence matrix in rho_Y."""
    idx = np.arange(T)
    lag = idx[:, None] - idx[None, :]
    out = np.zeros((T, T))
    mask = lag >= 1
    out[mask] = lag[mask] * float(rho_Y) ** (lag[mask] - 1)
    return out


def _dpropagator(rho_delta: float, J_max: int) -> np.ndarray:
    n = J_max + 1
    dP = np.zeros((n, n))
    for j in range(1, n):
        dP[j, 0] = j * rho_delta ** (j - 1)
        for k in range(1, j):
            dP[j, k] = (j - k) * rho_delta ** (j - k - 1)
    return dP


def _tr(A: np.ndarray, B: np.ndarray) -> float:
    return float(np.sum(A * B.T))


def loglik_gradient(z, layout, panel: PanelData, design: EventDesign):
    """Log-likelihood and its gradient in the packed coordinates of ``layout``.

    Uses d loglik = 1/2 tr(A dSigma) + sum_i q_i' dm_i per cohort, with q_i = Sigma^-1 r_i
    and A = Sigma^-1 (sum_i r_i r_i') Sigma^-1 - n_c Sigma^-1.
    """
    theta, het = layout.unpack(z)
    panel.check_design(design)
    T, K = design.T, design.K
    s = layout.slices
    rY, rD = theta.rho_Y, theta.rho_delta
    L_U = persistence_matrix(rY, T)
    dL_U = _dpersistence(rY, T)
    P = effect_propagator(rD, design.J_max)
    dP = _dpropagator(rD, design.J_max)
    gamma = theta.gamma_or_zeros(T)
    drive = panel.X @ theta.beta + gamma  # (N, T)
    tpow = initial_propagation(rY, T)
    dtpow = np.arange(1, T + 1) * float(rY) ** np.arange(0, T)
    b = panel.Y0[:, None] * tpow + drive @ L_U.T
    db_rY = panel.Y0[:, None] * dtpow + drive @ dL_U.T
    Xreg = het.regressors(panel.Y0, panel.X0, panel.t0)
    mu = Xreg @ het.mean_coef.T
    S = het.cov
    ones = np.ones(T)

    total = 0.0
    g_rY = g_rD = g_sU = g_sE = 0.0
    g_beta = np.zeros(K)
    g_gamma = np.zeros(T)
    g_B = np.zeros_like(het.mean_coef)
    G_S = np.zeros((2, 2))
    for c in np.unique(panel.t0):
        idx = np.flatnonzero(panel.t0 == c)
        n_c = idx.size
        E = design.indicator_matrix(int(c))
        M = L_U @ E @ P
        dM_rY = dL_U @ E @ P
        dM_rD = L_U @ E @ dP
        L_lam = np.column_stack([L_U @ ones, M[:, 0]])
        L_e = M[:, 1:]
        cov = (L_lam @ S @ L_lam.T + theta.sigma2_eps * (L_e @ L_e.T)
               + theta.sigma2_U * (L_U @ L_U.T))
        cov = 0.5 * (cov + cov.T)
        chol = robust_cholesky(cov, unit=int(idx[0]))
        r = panel.Y[idx] - b[idx] - mu[idx] @ L_lam.T
        w = solve_triangular(chol, r.T, lower=True)
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        total += float(np.sum(-0.5 * (T * _LOG2PI + logdet + np.sum(w * w, axis=0))))

        Q = solve_triangular(chol.T, w, lower=False).T  # rows q_i = Sigma^-1 r_i
        W = solve_triangular(chol.T, solve_triangular(chol, np.eye(T), lower=True), lower=False)
        A = Q.T @ Q - n_c * W
        A = 0.5 * (A + A.T)

        QL = Q @ L_U
        g_beta += np.einsum("it,itk->k", QL, panel.X[idx])
        g_gamma += QL.sum(axis=0)
        g_B += (Q @ L_lam).T @ Xreg[idx]
        g_sU += 0.5 * _tr(A, L_U @ L_U.T)
        g_sE += 0.5 * _tr(A, L_e @ L_e.T)
        G_S += L_lam.T @ A @ L_lam

        for which, dM, dlam_a in (("rD", dM_rD, np.zeros(T)), ("rY", dM_rY, dL_U @ ones)):
            dL_lam = np.column_stack([dlam_a, dM[:, 0]])
            dL_e = dM[:, 1:]
            val = _tr(A, dL_lam @ S @ L_lam.T) + theta.sigma2_eps * _tr(A, dL_e @ L_e.T)
            dm = mu[idx] @ dL_lam.T
            if which == "rY":
                val += theta.sigma2_U * _tr(A, dL_U @ L_U.T)
                dm = dm + db_rY[idx]
            val += float(np.sum(Q * dm))
            if which == "rD":
                g_rD += val
            else:
                g_rY += val

    L = np.linalg.cholesky(S)
    GL = G_S @ L  # d loglik / d L_ij = (G_S L)_ij with G_S = L_lam' A L_lam summed over cohorts
    grad = np.zeros(layout.size)
    grad[s["rho_Y"]] = g_rY * (1.0 - rY**2)
    grad[s["rho_delta"]] = g_rD * (1.0 - rD**2)
    grad[s["beta"]] = g_beta
    grad[s["sigma2_U"]] = g_sU * theta.sigma2_U
    grad[s["sigma2_eps"]] = g_sE * theta.sigma2_eps
    grad[s["mean_coef"]] = g_B.ravel()
    grad[s["cov_lambda"]] = [GL[0, 0] * L[0, 0], GL[1, 0], GL[1, 1] * L[1, 1]]
    if layout.gamma_mode == "free":
        grad[s["gamma"]] = g_gamma[1:]
    return total, grad
