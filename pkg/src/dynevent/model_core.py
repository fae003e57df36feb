"""
Domain types and closed-form building blocks for the dynamic event-study model.

Outcome process (calendar time t = 1..T)::

    Y_it = rho_Y Y_i,t-1 + alpha_i + X_it' beta + gamma_t + sum_j D_it^j delta_ij + U_it

Treatment effects follow an AR(1) in event time::

    delta_ij = rho_delta delta_i,j-1 + eps_ij,   j = 1..J_max

Event times are the contiguous set {0, ..., J_max}; the effect is zero outside it.
Never-treated units carry the ``NEVER`` sentinel as their adoption period.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

#: Adoption period of a never-treated unit. Large enough that t - t0 is never in J.
NEVER = 10**9


class ModelError(ValueError):
    """Base class for structured errors raised by the package."""


class DimensionError(ModelError):
    pass


class AdmissibilityError(ModelError):
    pass


class SingularCovarianceError(ModelError):
    def __init__(self, message: str, unit: Optional[int] = None):
        super().__init__(message)
        self.unit = unit


class DesignError(ModelError):
    pass


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EventDesign:
    T: int
    K: int
    J_max: int

    def __post_init__(self):
        if int(self.T) < 1:
            raise DesignError(f"T must be >= 1, got {self.T}")
        if int(self.K) < 1:
            raise DesignError(f"K must be >= 1, got {self.K}")
        if int(self.J_max) < 0:
            raise DesignError(f"J_max must be >= 0, got {self.J_max}")

    @property
    def J_set(self) -> tuple[int, ...]:
        return tuple(range(self.J_max + 1))

    @property
    def n_events(self) -> int:
        return self.J_max + 1

    def valid_t0(self, t0) -> np.ndarray:
        t0 = np.asarray(t0)
        return ((t0 >= 1) & (t0 <= self.T)) | (t0 == NEVER)

    def indicators(self, t0, t: int) -> np.ndarray:
        """D_it^j for calendar period ``t``; shape (n, J_max + 1)."""
        j = t - np.asarray(t0, dtype=np.int64)
        return (j[:, None] == np.arange(self.n_events)[None, :]).astype(float)

    def indicator_matrix(self, t0: int) -> np.ndarray:
        """E[s, j] = 1{s - t0 = j} for one unit; shape (T, J_max + 1)."""
        E = np.zeros((self.T, self.n_events))
        if t0 != NEVER:
            for j in range(self.n_events):
                s = t0 + j
                if 1 <= s <= self.T:
                    E[s - 1, j] = 1.0
        return E


@dataclass(frozen=True, eq=False)
class StructuralParams:
    rho_Y: float
    rho_delta: float
    beta: np.ndarray
    sigma2_U: float
    sigma2_eps: float
    gamma: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        if self.gamma is not None:
            object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=float))
        if not self.sigma2_U > 0:
            raise AdmissibilityError(f"sigma2_U must be > 0, got {self.sigma2_U}")
        if not self.sigma2_eps >= 0:
            raise AdmissibilityError(f"sigma2_eps must be >= 0, got {self.sigma2_eps}")
        vals = [self.rho_Y, self.rho_delta, self.sigma2_U, self.sigma2_eps]
        if not (np.all(np.isfinite(vals)) and np.all(np.isfinite(self.beta))):
            raise AdmissibilityError("structural parameters must be finite")

    @property
    def K(self) -> int:
        return self.beta.shape[0]

    def gamma_or_zeros(self, T: int) -> np.ndarray:
        if self.gamma is None:
            return np.zeros(T)
        if self.gamma.shape != (T,):
            raise DimensionError(f"gamma has shape {self.gamma.shape}, expected ({T},)")
        return self.gamma

    def replace(self, **changes) -> "StructuralParams":
        kw = dict(rho_Y=self.rho_Y, rho_delta=self.rho_delta, beta=self.beta,
                  sigma2_U=self.sigma2_U, sigma2_eps=self.sigma2_eps, gamma=self.gamma)
        kw.update(changes)
        return StructuralParams(**kw)


@dataclass(frozen=True)
class Lambda:
    alpha: float
    delta0: float

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.delta0])


@dataclass(frozen=True, eq=False)
class HeterogeneityModel:
    """Gaussian correlated random effects for lambda = (alpha, delta0).

    The conditional mean is ``mean_coef @ [1, Y0, X0', cohort dummies]``; one dummy per
    entry of ``cohorts`` (adoption periods, ``NEVER`` allowed).
    """

    mean_coef: np.ndarray
    cov: np.ndarray
    cohorts: tuple[int, ...] = ()

    def __post_init__(self):
        mc = np.atleast_2d(np.asarray(self.mean_coef, dtype=float))
        cov = np.asarray(self.cov, dtype=float)
        object.__setattr__(self, "mean_coef", mc)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "cohorts", tuple(int(c) for c in self.cohorts))
        if mc.shape[0] != 2 or mc.shape[1] < 2 + len(self.cohorts) + 1:
            raise DimensionError(f"mean_coef has shape {mc.shape}")
        if cov.shape != (2, 2):
            raise DimensionError(f"cov has shape {cov.shape}, expected (2, 2)")
        if not np.allclose(cov, cov.T, atol=1e-12, rtol=0):
            raise AdmissibilityError("heterogeneity cov must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-12 * max(1.0, np.abs(cov).max()):
            raise AdmissibilityError("heterogeneity cov must be positive semidefinite")
        if not np.all(np.isfinite(mc)):
            raise AdmissibilityError("mean_coef must be finite")

    @property
    def C(self) -> int:
        return len(self.cohorts)

    @property
    def K(self) -> int:
        return self.mean_coef.shape[1] - 2 - self.C

    def regressors(self, Y0, X0, t0) -> np.ndarray:
        """Rows [1, Y0, X0', cohort dummies]; shape (n, 2 + K + C)."""
        Y0 = np.atleast_1d(np.asarray(Y0, dtype=float))
        X0 = np.asarray(X0, dtype=float).reshape(Y0.shape[0], -1)
        t0 = np.atleast_1d(np.asarray(t0, dtype=np.int64))
        if X0.shape[1] != self.K:
            raise DimensionError(f"X0 has {X0.shape[1]} columns, model expects K={self.K}")
        dummies = (t0[:, None] == np.asarray(self.cohorts, dtype=np.int64)[None, :]).astype(float)
        return np.column_stack([np.ones_like(Y0), Y0, X0, dummies])

    def mean(self, Y0, X0, t0) -> np.ndarray:
        return self.regressors(Y0, X0, t0) @ self.mean_coef.T


@dataclass(frozen=True, eq=False)
class FeedbackModel:
    """First-order linear-Gaussian covariate transition.

    X_it = c + A_x X_i,t-1 + a_y Y_i,t-1 + a_d D_it + eta_it,  eta_it ~ N(0, Sigma_X)
    """

    A_x: np.ndarray
    a_y: np.ndarray
    a_d: np.ndarray
    c: np.ndarray
    Sigma_X: np.ndarray
    _factor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        A_x = np.atleast_2d(np.asarray(self.A_x, dtype=float))
        K = A_x.shape[0]
        a_y = np.asarray(self.a_y, dtype=float).reshape(K)
        a_d = np.asarray(self.a_d, dtype=float).reshape(K, -1)
        c = np.asarray(self.c, dtype=float).reshape(K)
        S = np.asarray(self.Sigma_X, dtype=float).reshape(K, K)
        for name, val in [("A_x", A_x), ("a_y", a_y), ("a_d", a_d), ("c", c), ("Sigma_X", S)]:
            if not np.all(np.isfinite(val)):
                raise AdmissibilityError(f"feedback {name} must be finite")
        if A_x.shape != (K, K):
            raise DimensionError(f"A_x has shape {A_x.shape}")
        if not np.allclose(S, S.T, atol=1e-12, rtol=0):
            raise AdmissibilityError("Sigma_X must be symmetric")
        object.__setattr__(self, "A_x", A_x)
        object.__setattr__(self, "a_y", a_y)
        object.__setattr__(self, "a_d", a_d)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "Sigma_X", S)
        object.__setattr__(self, "_factor", psd_factor(S, what="Sigma_X"))

    @property
    def K(self) -> int:
        return self.A_x.shape[0]

    @property
    def factor(self) -> np.ndarray:
        """Lower factor F with F F' = Sigma_X (zero columns allowed for singular Sigma_X)."""
        return self._factor

    def mean(self, X_prev, Y_prev, D) -> np.ndarray:
        return self.c + X_prev @ self.A_x.T + np.outer(Y_prev, self.a_y) + D @ self.a_d.T

    @classmethod
    def independent(cls, K: int, n_events: int, Sigma_X=None, A_x=None, c=None) -> "FeedbackModel":
        """No outcome or treatment feedback; X follows its own AR(1)."""
        return cls(
            A_x=np.zeros((K, K)) if A_x is None else A_x,
            a_y=np.zeros(K),
            a_d=np.zeros((K, n_events)),
            c=np.zeros(K) if c is None else c,
            Sigma_X=np.eye(K) if Sigma_X is None else Sigma_X,
        )


@dataclass(frozen=True, eq=False)
class PanelData:
    """Balanced panel with initial conditions.

    Y0 (N,), X0 (N, K), t0 (N,) int, Y (N, T), X (N, T, K).
    """

    Y0: np.ndarray
    X0: np.ndarray
    t0: np.ndarray
    Y: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        Y = np.atleast_2d(np.array(self.Y, dtype=float))
        N, T = Y.shape
        X = np.array(self.X, dtype=float)
        if X.ndim == 2:
            X = X.reshape(N, T, 1)
        Y0 = np.array(self.Y0, dtype=float).reshape(N)
        X0 = np.array(self.X0, dtype=float).reshape(N, -1)
        t0 = np.array(self.t0).reshape(N).astype(np.int64)
        if X.shape[:2] != (N, T):
            raise DimensionError(f"X has shape {X.shape}, expected ({N}, {T}, K)")
        if X0.shape[1] != X.shape[2]:
            raise DimensionError("X0 and X disagree on K")
        bad = ~(((t0 >= 1) & (t0 <= T)) | (t0 == NEVER))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DesignError(f"unit {i}: invalid adoption period t0={t0[i]}")
        for name, arr in [("Y0", Y0), ("X0", X0), ("Y", Y), ("X", X)]:
            if not np.all(np.isfinite(arr)):
                raise DimensionError(f"{name} contains missing or non-finite values")
        for name, arr in [("Y0", Y0), ("X0", X0), ("t0", t0), ("Y", Y), ("X", X)]:
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def N(self) -> int:
        return self.Y.shape[0]

    @property
    def T(self) -> int:
        return self.Y.shape[1]

    @property
    def K(self) -> int:
        return self.X.shape[2]

    def check_design(self, design: EventDesign):
        if (self.T, self.K) != (design.T, design.K):
            raise DimensionError(
                f"panel has T={self.T}, K={self.K}; design expects T={design.T}, K={design.K}"
            )

    def subset(self, idx) -> "PanelData":
        return PanelData(self.Y0[idx], self.X0[idx], self.t0[idx], self.Y[idx], self.X[idx])

    def cohort_counts(self) -> dict[int, int]:
        vals, counts = np.unique(self.t0, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts)}


@dataclass(frozen=True, eq=False)
class UnitLoadings:
    b: np.ndarray
    L_alpha: np.ndarray
    L_delta0: np.ndarray
    L_eps: np.ndarray
    L_U: np.ndarray

    @property
    def L_lambda(self) -> np.ndarray:
        return np.column_stack([self.L_alpha, self.L_delta0])

    def reconstruct(self, alpha, delta0, eps, U) -> np.ndarray:
        return (self.b + self.L_alpha * alpha + self.L_delta0 * delta0
                + self.L_eps @ np.asarray(eps, dtype=float) + self.L_U @ np.asarray(U, dtype=float))


# ---------------------------------------------------------------------------
# Closed forms
# ---------------------------------------------------------------------------


def psd_factor(S: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Square-root factor F of a symmetric PSD matrix with F F' = S."""
    S = np.asarray(S, dtype=float)
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        pass
    w, V = np.linalg.eigh(S)
    if w.min() < -1e-12 * max(1.0, np.abs(S).max()):
        raise AdmissibilityError(f"{what} is not positive semidefinite (min eigenvalue {w.min():.3g})")
    return V * np.sqrt(np.clip(w, 0.0, None))


def delta_path(delta0, eps, rho_delta: float) -> np.ndarray:
    """(delta_0, ..., delta_J) from the event-time recursion.

    Vectorised: ``delta0`` of shape (n,) with ``eps`` of shape (n, J) gives (n, J + 1).
    """
    eps = np.asarray(eps, dtype=float)
    delta0 = np.asarray(delta0, dtype=float)
    out = np.empty(eps.shape[:-1] + (eps.shape[-1] + 1,))
    out[..., 0] = delta0
    for j in range(1, eps.shape[-1] + 1):
        out[..., j] = rho_delta * out[..., j - 1] + eps[..., j - 1]
    return out


def effect_propagator(rho_delta: float, J_max: int) -> np.ndarray:
    """P with (delta_0..delta_J)' = P (delta_0, eps_1..eps_J)'."""
    n = J_max + 1
    P = np.zeros((n, n))
    for j in range(n):
        P[j, 0] = rho_delta ** j
        for k in range(1, j + 1):
            P[j, k] = rho_delta ** (j - k)
    return P


def persistence_matrix(rho_Y: float, T: int) -> np.ndarray:
    """L_U[t, s] = rho_Y^(t - s) for s <= t."""
    idx = np.arange(T)
    lag = idx[:, None] - idx[None, :]
    L = np.zeros((T, T))
    mask = lag >= 0
    L[mask] = float(rho_Y) ** lag[mask]
    return L


def treatment_loadings(rho_Y: float, rho_delta: float, design: EventDesign, t0: int,
                       L_U: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Loadings of Y on delta_0 (T,) and on eps_1..eps_J (T, J_max) for adoption period t0."""
    if L_U is None:
        L_U = persistence_matrix(rho_Y, design.T)
    M = L_U @ design.indicator_matrix(int(t0)) @ effect_propagator(rho_delta, design.J_max)
    return M[:, 0], M[:, 1:]


def initial_propagation(rho_Y: float, T: int) -> np.ndarray:
    return float(rho_Y) ** np.arange(1, T + 1)


def build_loadings(theta: StructuralParams, design: EventDesign, Y0: float, X0, t0: int,
                   X) -> UnitLoadings:
    """Stacked solution Y = b + L_alpha alpha + L_delta0 delta0 + L_eps eps + L_U U."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1) if design.K == 1 else X.reshape(1, -1)
    if X.shape != (design.T, design.K):
        raise DimensionError(f"X path has shape {X.shape}, expected ({design.T}, {design.K})")
    if theta.K != design.K:
        raise DimensionError(f"beta has length {theta.K}, design expects K={design.K}")
    if np.asarray(X0).size != design.K:
        raise DimensionError(f"X0 has size {np.asarray(X0).size}, expected {design.K}")
    if not design.valid_t0([t0])[0]:
        raise DesignError(f"invalid adoption period t0={t0}")
    T = design.T
    L_U = persistence_matrix(theta.rho_Y, T)
    drive = X @ theta.beta + theta.gamma_or_zeros(T)
    b = initial_propagation(theta.rho_Y, T) * float(Y0) + L_U @ drive
    L_delta0, L_eps = treatment_loadings(theta.rho_Y, theta.rho_delta, design, t0, L_U)
    return UnitLoadings(b=b, L_alpha=L_U.sum(axis=1), L_delta0=L_delta0, L_eps=L_eps, L_U=L_U)


def cohort_dummy_levels(t0: Sequence[int]) -> tuple[int, ...]:
    """Cohort values that receive a dummy column.

    The earliest treated cohort is the omitted baseline (absorbed by the intercept).
    """
    levels = sorted(set(int(v) for v in np.asarray(t0).ravel()))
    treated = [v for v in levels if v != NEVER]
    baseline = treated[0] if treated else levels[0]
    return tuple(v for v in levels if v != baseline)


# ---------------------------------------------------------------------------
# Parameter transforms
# ---------------------------------------------------------------------------

GAMMA_MODES = ("none", "free")


@dataclass(frozen=True)
class ParamLayout:
    """Unconstrained coordinates for (theta, heterogeneity, time effects).

    Order: atanh rho_Y, atanh rho_delta, beta, log sigma2_U, log sigma2_eps,
    mean_coef (row-major), log-Cholesky of the lambda covariance, gamma_2..gamma_T.
    With ``gamma_mode="free"`` gamma_1 is normalised to zero.
    """

    K: int
    T: int
    cohorts: tuple[int, ...]
    gamma_mode: str = "free"

    def __post_init__(self):
        if self.gamma_mode not in GAMMA_MODES:
            raise ValueError(f"gamma_mode must be one of {GAMMA_MODES}")

    @property
    def n_reg(self) -> int:
        return 2 + self.K + len(self.cohorts)

    @property
    def slices(self) -> dict[str, slice]:
        K, R = self.K, self.n_reg
        out, pos = {}, 0
        for name, n in [("rho_Y", 1), ("rho_delta", 1), ("beta", K), ("sigma2_U", 1),
                        ("sigma2_eps", 1), ("mean_coef", 2 * R), ("cov_lambda", 3),
                        ("gamma", self.T - 1 if self.gamma_mode == "free" else 0)]:
            out[name] = slice(pos, pos + n)
            pos += n
        return out

    @property
    def size(self) -> int:
        return self.slices["gamma"].stop

    @property
    def names(self) -> list[str]:
        regs = ["const", "y0"] + [f"x0_{k + 1}" for k in range(self.K)] + [
            "cohort_never" if c == NEVER else f"cohort_{c}" for c in self.cohorts]
        names = ["rho_Y", "rho_delta"] + [f"beta_{k + 1}" for k in range(self.K)]
        names += ["sigma2_U", "sigma2_eps"]
        names += [f"mu_{lat}_{r}" for lat in ("alpha", "delta0") for r in regs]
        names += ["chol_alpha", "chol_cross", "chol_delta0"]
        if self.gamma_mode == "free":
            names += [f"gamma_{t}" for t in range(2, self.T + 1)]
        return names

    def default_fixed_mask(self) -> np.ndarray:
        """Coordinates held fixed: the delta0 mean shift of never-treated units is not identified."""
        mask = np.zeros(self.size, dtype=bool)
        if NEVER in self.cohorts:
            col = 2 + self.K + self.cohorts.index(NEVER)
            mask[self.slices["mean_coef"].start + self.n_reg + col] = True
        return mask

    def pack(self, theta: StructuralParams, het: HeterogeneityModel) -> np.ndarray:
        if theta.K != self.K or het.K != self.K or het.cohorts != self.cohorts:
            raise DimensionError("parameters do not match the layout dimensions")
        if not abs(theta.rho_Y) < 1:
            raise AdmissibilityError(f"|rho_Y| must be < 1 for estimation, got {theta.rho_Y}")
        if not abs(theta.rho_delta) < 1:
            raise AdmissibilityError(
                f"|rho_delta| must be < 1 on the estimation scale, got {theta.rho_delta}")
        if not theta.sigma2_eps > 0:
            raise AdmissibilityError("sigma2_eps must be > 0 on the estimation scale")
        try:
            L = np.linalg.cholesky(het.cov)
        except np.linalg.LinAlgError:
            raise AdmissibilityError("heterogeneity cov must be positive definite to pack") from None
        gamma = theta.gamma_or_zeros(self.T)
        z = np.empty(self.size)
        s = self.slices
        z[s["rho_Y"]] = np.arctanh(theta.rho_Y)
        z[s["rho_delta"]] = np.arctanh(theta.rho_delta)
        z[s["beta"]] = theta.beta
        z[s["sigma2_U"]] = np.log(theta.sigma2_U)
        z[s["sigma2_eps"]] = np.log(theta.sigma2_eps)
        z[s["mean_coef"]] = het.mean_coef.ravel()
        z[s["cov_lambda"]] = [np.log(L[0, 0]), L[1, 0], np.log(L[1, 1])]
        if self.gamma_mode == "free":
            if gamma[0] != 0:
                raise AdmissibilityError("gamma_1 must be 0 (level normalisation)")
            z[s["gamma"]] = gamma[1:]
        elif np.any(gamma != 0):
            raise AdmissibilityError("gamma_mode='none' requires zero time effects")
        return z

    def unpack(self, z) -> tuple[StructuralParams, HeterogeneityModel]:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.size,):
            raise DimensionError(f"packed vector has shape {z.shape}, expected ({self.size},)")
        s = self.slices
        l11, l21, l22 = z[s["cov_lambda"]]
        L = np.array([[np.exp(l11), 0.0], [l21, np.exp(l22)]])
        gamma = None
        if self.gamma_mode == "free":
            gamma = np.concatenate([[0.0], z[s["gamma"]]])
        theta = StructuralParams(
            rho_Y=float(np.tanh(z[s["rho_Y"]][0])),
            rho_delta=float(np.tanh(z[s["rho_delta"]][0])),
            beta=z[s["beta"]].copy(),
            sigma2_U=float(np.exp(z[s["sigma2_U"]][0])),
            sigma2_eps=float(np.exp(z[s["sigma2_eps"]][0])),
            gamma=gamma,
        )
        het = HeterogeneityModel(mean_coef=z[s["mean_coef"]].reshape(2, self.n_reg),
                                 cov=L @ L.T, cohorts=self.cohorts)
        return theta, het


def pack_params(theta: StructuralParams, het: HeterogeneityModel, gamma_mode: str = "free",
                T: Optional[int] = None) -> tuple[np.ndarray, ParamLayout]:
    if T is None:
        if theta.gamma is None:
            raise DimensionError("T is required when theta carries no time effects")
        T = theta.gamma.shape[0]
    layout = ParamLayout(K=theta.K, T=T, cohorts=het.cohorts, gamma_mode=gamma_mode)
    return layout.pack(theta, het), layout


def unpack_params(z, layout: ParamLayout) -> tuple[StructuralParams, HeterogeneityModel]:
    return layout.unpack(z)
