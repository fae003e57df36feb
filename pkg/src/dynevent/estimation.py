"""
Two-step estimation.

Step 1 maximises the integrated outcome likelihood over (theta, heterogeneity, time
effects); step 2 fits the covariate transition by least squares. The two blocks share no
parameters, so step 1 never looks at the feedback model.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .likelihood import loglik, loglik_gradient
from .model_core import (
    NEVER,
    DesignError,
    EventDesign,
    FeedbackModel,
    HeterogeneityModel,
    ModelError,
    PanelData,
    ParamLayout,
    StructuralParams,
    cohort_dummy_levels,
)
from .simulation import PERTURB_STREAM, LatentRecord, SimConfig, joint_logdensity, simulate_panel, unit_rng

logger = logging.getLogger(__name__)

THETA_NAMES = ("rho_Y", "rho_delta", "beta", "sigma2_U", "sigma2_eps")


class RankDeficiencyError(ModelError):
    def __init__(self, message: str, columns: Sequence[str]):
        super().__init__(message)
        self.columns = list(columns)


@dataclass
class FitOptions:
    start: Optional[tuple[StructuralParams, HeterogeneityModel]] = None
    max_iter: int = 1000
    tol: float = 1e-9  # polish stop: relative objective change
    xtol: float = 1e-7  # polish stop: simplex size on the packed scale
    grad_tol: float = 1e-5  # convergence: gradient sup-norm, objective per observation
    n_starts: int = 3
    perturb_scale: float = 0.1
    seed: int = 0
    gamma_mode: str = "free"
    fixed: dict = field(default_factory=dict)  # natural-scale values for held parameters
    gradient: str = "analytic"  # or "fd"
    polish: bool = True
    polish_max_fev: Optional[int] = None
    hessian_seed: bool = True  # seed BFGS with the inverse Hessian at the start when it is PD


@dataclass(eq=False)
class StandardErrors:
    names: list[str]
    packed: np.ndarray
    natural_names: list[str]
    natural: np.ndarray
    cov_packed: np.ndarray
    hessian_pd: bool
    condition_number: float
    warnings: list[str] = field(default_factory=list)

    def natural_dict(self) -> dict[str, float]:
        return dict(zip(self.natural_names, self.natural.tolist()))


@dataclass(eq=False)
class FitResult:
    theta_hat: StructuralParams
    het_hat: HeterogeneityModel
    gamma_hat: np.ndarray
    layout: ParamLayout
    z_hat: np.ndarray
    free_mask: np.ndarray
    loglik_Y: float
    converged: bool
    iterations: int  # quasi-Newton iterations
    trace: list[tuple[int, float]]
    polish_iterations: int = 0
    message: str = ""
    feedback_hat: Optional[FeedbackModel] = None
    loglik_X: Optional[float] = None
    se: Optional[StandardErrors] = None

    def theta_vector(self) -> dict[str, float]:
        return theta_dict(self.theta_hat)


def theta_dict(theta: StructuralParams) -> dict[str, float]:
    out = {"rho_Y": theta.rho_Y, "rho_delta": theta.rho_delta}
    for k, b in enumerate(theta.beta):
        out[f"beta_{k + 1}"] = float(b)
    out["sigma2_U"] = theta.sigma2_U
    out["sigma2_eps"] = theta.sigma2_eps
    return out


# ---------------------------------------------------------------------------
# Step 1: outcome model
# ---------------------------------------------------------------------------


def natural_names(layout: ParamLayout) -> list[str]:
    names = layout.names
    s = layout.slices
    return (names[:s["mean_coef"].stop] + ["cov_alpha", "cov_alpha_delta0", "cov_delta0"]
            + names[s["gamma"]])


def natural_vector(z, layout: ParamLayout) -> np.ndarray:
    theta, het = layout.unpack(z)
    parts = [[theta.rho_Y, theta.rho_delta], theta.beta, [theta.sigma2_U, theta.sigma2_eps],
             het.mean_coef.ravel(), [het.cov[0, 0], het.cov[1, 0], het.cov[1, 1]]]
    if layout.gamma_mode == "free":
        parts.append(theta.gamma[1:])
    return np.concatenate([np.atleast_1d(np.asarray(p, dtype=float)) for p in parts])


def default_start(panel: PanelData, design: EventDesign, layout: ParamLayout):
    """rho's at 0, beta from pooled OLS of first differences, variances from residual moments."""
    dY = np.diff(np.column_stack([panel.Y0, panel.Y]), axis=1).ravel()
    dX = np.diff(np.concatenate([panel.X0[:, None, :], panel.X], axis=1), axis=1).reshape(-1, design.K)
    Z = np.column_stack([np.ones_like(dY), dX])
    coef, *_ = np.linalg.lstsq(Z, dY, rcond=None)
    e = dY - Z @ coef
    v = max(float(np.var(e)), 1e-8)
    theta = StructuralParams(rho_Y=0.0, rho_delta=0.0, beta=coef[1:], sigma2_U=v / 2.0,
                             sigma2_eps=v / 4.0,
                             gamma=np.zeros(design.T) if layout.gamma_mode == "free" else None)
    het = HeterogeneityModel(mean_coef=np.zeros((2, layout.n_reg)), cov=0.1 * np.eye(2),
                             cohorts=layout.cohorts)
    return theta, het


def _apply_fixed(theta: StructuralParams, layout: ParamLayout, fixed: dict):
    """Overwrite start values with held ones; return theta and the extra fixed mask."""
    mask = np.zeros(layout.size, dtype=bool)
    changes = {}
    for name, value in fixed.items():
        if name not in THETA_NAMES:
            raise ModelError(f"cannot hold '{name}' fixed; choose from {THETA_NAMES}")
        changes[name] = np.asarray(value, dtype=float) if name == "beta" else float(value)
        mask[layout.slices[name]] = True
    return theta.replace(**changes), mask


class OutcomeObjective:
    """Negative log-likelihood per observation on the free packed coordinates."""

    def __init__(self, panel: PanelData, design: EventDesign, layout: ParamLayout,
                 z_full: np.ndarray, free: np.ndarray, gradient: str = "analytic"):
        self.panel, self.design, self.layout = panel, design, layout
        self.z_full = np.array(z_full, dtype=float)
        self.free = free
        self.scale = 1.0 / (panel.N * design.T)
        self.gradient = gradient
        self.n_eval = 0

    def full(self, x) -> np.ndarray:
        z = self.z_full.copy()
        z[self.free] = x
        return z

    def __call__(self, x) -> float:
        self.n_eval += 1
        try:
            theta, het = self.layout.unpack(self.full(x))
            return -loglik(theta, het, self.panel, self.design) * self.scale
        except (ModelError, FloatingPointError, np.linalg.LinAlgError):
            return np.inf

    def value_and_grad(self, x):
        if self.gradient == "fd":
            return self(x), fd_gradient(self, x)
        self.n_eval += 1
        try:
            ll, g = loglik_gradient(self.full(x), self.layout, self.panel, self.design)
        except (ModelError, FloatingPointError, np.linalg.LinAlgError):
            return np.inf, np.zeros_like(x)
        return -ll * self.scale, -g[self.free] * self.scale


def fd_gradient(f: Callable, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.empty_like(x)
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def _inverse_hessian_seed(obj: OutcomeObjective, x: np.ndarray, h: float = 1e-5):
    """Inverse of the finite-difference Hessian of the objective, if positive definite."""
    H = np.empty((x.size, x.size))
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = step
        H[i] = (obj.value_and_grad(x + e)[1] - obj.value_and_grad(x - e)[1]) / (2 * step)
    H = 0.5 * (H + H.T)
    if not np.all(np.isfinite(H)):
        return None
    w, V = np.linalg.eigh(H)
    if w.min() <= 1e-8 * max(w.max(), 1e-300):
        return None
    hinv = (V / w) @ V.T
    return 0.5 * (hinv + hinv.T)


def _quasi_newton(obj: OutcomeObjective, x0: np.ndarray, opts: FitOptions):
    trace = [(0, float(obj(x0)))]

    def record(xk):
        trace.append((len(trace), float(obj(xk))))

    bfgs_opts = dict(maxiter=opts.max_iter, gtol=opts.grad_tol * 0.1, xrtol=0.0)
    if opts.hessian_seed:
        hinv = _inverse_hessian_seed(obj, x0)
        if hinv is not None:
            bfgs_opts["hess_inv0"] = hinv
    res = minimize(obj.value_and_grad, x0, jac=True, method="BFGS", callback=record,
                   options=bfgs_opts)
    return res, trace


def _polish(obj: OutcomeObjective, x: np.ndarray, f: float, opts: FitOptions, trace):
    p = x.size
    simplex = np.vstack([x] + [x + 1e-3 * max(1.0, abs(x[i])) * np.eye(p)[i] for i in range(p)])
    max_fev = opts.polish_max_fev or 40 * p
    res = minimize(obj, x, method="Nelder-Mead",
                   options=dict(initial_simplex=simplex, xatol=opts.xtol,
                                fatol=opts.tol * max(1.0, abs(f)), maxfev=max_fev, adaptive=True))
    if res.fun < f:
        trace.append((trace[-1][0] + 1, float(res.fun)))
        return res.x, float(res.fun), res.nit
    return x, f, res.nit


def _perturbed(x0: np.ndarray, k: int, opts: FitOptions) -> np.ndarray:
    rng = unit_rng(opts.seed, PERTURB_STREAM, k)
    return x0 + opts.perturb_scale * rng.standard_normal(x0.size)


def outcome_layout(panel: PanelData, gamma_mode: str = "free") -> ParamLayout:
    return ParamLayout(K=panel.K, T=panel.T, cohorts=cohort_dummy_levels(panel.t0),
                       gamma_mode=gamma_mode)


def check_identification(panel: PanelData, design: EventDesign, layout: ParamLayout):
    treated = panel.t0 != NEVER
    if not treated.any():
        raise DesignError("no treated unit: treatment-effect parameters are not identified")
    if not ((panel.t0 > 1) | ~treated).any():
        raise DesignError("no untreated observations: every unit is treated from period 1")
    if panel.N < layout.n_reg:
        raise DesignError(f"need at least {layout.n_reg} units, got {panel.N}")


def fit_outcome_model(panel: PanelData, design: EventDesign,
                      options: Optional[FitOptions] = None) -> FitResult:
    """Maximise the integrated outcome likelihood.

    Runs BFGS from the default start and ``n_starts - 1`` deterministic perturbations,
    keeps the best, and polishes it with Nelder-Mead.
    """
    opts = options or FitOptions()
    panel.check_design(design)
    layout = outcome_layout(panel, opts.gamma_mode)
    check_identification(panel, design, layout)
    if opts.start is None:
        theta0, het0 = default_start(panel, design, layout)
    else:
        theta0, het0 = opts.start
        if opts.gamma_mode == "free" and theta0.gamma is None:
            theta0 = theta0.replace(gamma=np.zeros(design.T))
        if het0.cohorts != layout.cohorts:
            raise ModelError(f"start cohorts {het0.cohorts} differ from the data's {layout.cohorts}")
    theta0, held = _apply_fixed(theta0, layout, opts.fixed)
    z0 = layout.pack(theta0, het0)
    free = ~(layout.default_fixed_mask() | held)
    obj = OutcomeObjective(panel, design, layout, z0, free, opts.gradient)

    x0 = z0[free]
    best = None
    for k in range(max(1, opts.n_starts)):
        xs = x0 if k == 0 else _perturbed(x0, k, opts)
        if not np.isfinite(obj(xs)):
            continue
        res, trace = _quasi_newton(obj, xs, opts)
        if best is None or res.fun < best[0].fun:
            best = (res, trace)
    if best is None:
        raise ModelError("objective is not finite at any starting value")
    res, trace = best
    x, f, nit = res.x, float(res.fun), int(res.nit)
    polish_it = 0
    if opts.polish:
        x, f, polish_it = _polish(obj, x, f, opts, trace)

    _, g = obj.value_and_grad(x)
    grad_inf = float(np.max(np.abs(g))) if g.size else 0.0
    diffs = np.diff([v for _, v in trace])
    monotone = bool(np.all(diffs <= 1e-12 * max(1.0, abs(f))))
    converged = bool(np.isfinite(f) and grad_inf < opts.grad_tol and res.nit < opts.max_iter
                     and monotone)
    z_hat = obj.full(x)
    theta, het = layout.unpack(z_hat)
    message = f"{res.message}; gradient inf-norm {grad_inf:.3g}"
    if not converged:
        logger.warning("outcome model did not converge: %s", message)
    return FitResult(theta_hat=theta, het_hat=het, gamma_hat=theta.gamma_or_zeros(design.T),
                     layout=layout, z_hat=z_hat, free_mask=free,
                     loglik_Y=loglik(theta, het, panel, design), converged=converged,
                     iterations=nit, polish_iterations=int(polish_it), trace=trace,
                     message=message)


def _hessian(panel, design, layout, z, free, h=1e-5) -> np.ndarray:
    """Central differences of the analytic gradient of the log-likelihood."""
    idx = np.flatnonzero(free)
    H = np.empty((idx.size, idx.size))
    for a, i in enumerate(idx):
        step = h * max(1.0, abs(z[i]))
        zp, zm = z.copy(), z.copy()
        zp[i] += step
        zm[i] -= step
        gp = loglik_gradient(zp, layout, panel, design)[1][idx]
        gm = loglik_gradient(zm, layout, panel, design)[1][idx]
        H[a] = (gp - gm) / (2 * step)
    return 0.5 * (H + H.T)


def standard_errors(fit: FitResult, panel: PanelData, design: EventDesign) -> StandardErrors:
    """Inverse negative Hessian on the packed scale, delta method to natural parameters."""
    layout, z, free = fit.layout, fit.z_hat, fit.free_mask
    H = _hessian(panel, design, layout, z, free)
    notes = []
    negH = -H
    eig = np.linalg.eigvalsh(negH)
    pd = bool(eig.min() > 0)
    cond = float(eig.max() / eig.min()) if pd else np.inf
    if pd:
        cov_free = np.linalg.inv(negH)
    else:
        notes.append("negative Hessian not positive definite; pseudo-inverse used")
        warnings.warn(notes[-1], RuntimeWarning)
        cov_free = np.linalg.pinv(negH)
    p = layout.size
    cov = np.zeros((p, p))
    cov[np.ix_(free, free)] = 0.5 * (cov_free + cov_free.T)
    se_packed = np.where(free, np.sqrt(np.clip(np.diag(cov), 0.0, None)), np.nan)

    base = natural_vector(z, layout)
    J = np.zeros((base.size, p))
    for i in np.flatnonzero(free):
        step = 1e-6 * max(1.0, abs(z[i]))
        zp, zm = z.copy(), z.copy()
        zp[i] += step
        zm[i] -= step
        J[:, i] = (natural_vector(zp, layout) - natural_vector(zm, layout)) / (2 * step)
    cov_nat = J @ cov @ J.T
    se_nat = np.sqrt(np.clip(np.diag(cov_nat), 0.0, None))
    held = np.all(J[:, free] == 0, axis=1) if free.any() else np.ones(base.size, bool)
    se_nat = np.where(held, np.nan, se_nat)
    return StandardErrors(names=layout.names, packed=se_packed, natural_names=natural_names(layout),
                          natural=se_nat, cov_packed=cov, hessian_pd=pd, condition_number=cond,
                          warnings=notes)


# ---------------------------------------------------------------------------
# Step 2: feedback model
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class FeedbackFit:
    model: FeedbackModel
    coef: np.ndarray  # (p, K)
    se: np.ndarray  # (p, K)
    columns: list[str]
    n_obs: int

    def tstats(self) -> np.ndarray:
        return self.coef / self.se


def feedback_design_matrix(panel: PanelData, design: EventDesign):
    """Stacked regressors [1, X_t-1, Y_t-1, D_t] and responses X_t over (i, t)."""
    T, K = design.T, design.K
    X_prev = np.concatenate([panel.X0[:, None, :], panel.X[:, :-1]], axis=1)
    Y_prev = np.column_stack([panel.Y0, panel.Y[:, :-1]])
    D = np.stack([design.indicators(panel.t0, t) for t in range(1, T + 1)], axis=1)
    Z = np.concatenate([np.ones((panel.N, T, 1)), X_prev, Y_prev[:, :, None], D], axis=2)
    columns = ["const"] + [f"x{k + 1}_lag" for k in range(K)] + ["y_lag"] + [
        f"d{j}" for j in design.J_set]
    return Z.reshape(-1, Z.shape[2]), panel.X.reshape(-1, K), columns


def feedback_regression(panel: PanelData, design: EventDesign) -> FeedbackFit:
    panel.check_design(design)
    Z, R, columns = feedback_design_matrix(panel, design)
    n, p = Z.shape
    if n < p + 5:
        raise ModelError(f"{n} observations are too few for {p} regressors per equation")
    U, sv, Vt = np.linalg.svd(Z, full_matrices=False)
    tol = sv.max() * max(Z.shape) * np.finfo(float).eps * 1e3
    null = Vt[sv <= tol]
    if null.shape[0] > 0:
        involved = np.flatnonzero(np.any(np.abs(null) > 1e-8, axis=0))
        cols = [columns[i] for i in involved]
        raise RankDeficiencyError(f"feedback regressors are collinear: {', '.join(cols)}", cols)
    ZtZ_inv = np.linalg.inv(Z.T @ Z)
    coef = ZtZ_inv @ Z.T @ R
    resid = R - Z @ coef
    Sigma = resid.T @ resid / (n - p)
    Sigma = 0.5 * (Sigma + Sigma.T)
    se = np.sqrt(np.outer(np.diag(ZtZ_inv), np.diag(Sigma)))
    K = design.K
    model = FeedbackModel(A_x=coef[1:1 + K].T, a_y=coef[1 + K], a_d=coef[2 + K:].T, c=coef[0],
                          Sigma_X=Sigma)
    return FeedbackFit(model=model, coef=coef, se=se, columns=columns, n_obs=n)


def fit_feedback(panel: PanelData, design: EventDesign) -> FeedbackModel:
    """Equation-by-equation least squares of X_t on [1, X_t-1, Y_t-1, D_t]."""
    return feedback_regression(panel, design).model


def feedback_loglik(panel: PanelData, design: EventDesign, feedback: FeedbackModel) -> float:
    """log g summed over units; lambda does not enter, so a zero placeholder is passed."""
    zeros = LatentRecord(alpha=np.zeros(panel.N), delta0=np.zeros(panel.N),
                         eps=np.zeros((panel.N, design.J_max)), U=np.zeros((panel.N, design.T)),
                         eta=np.zeros((panel.N, design.T, design.K)))
    dummy = StructuralParams(0.0, 0.0, np.zeros(design.K), 1.0, 0.0)
    _, logg = joint_logdensity(panel, zeros, dummy, feedback, design)
    return float(np.sum(logg))


def fit_two_step(panel: PanelData, design: EventDesign, options: Optional[FitOptions] = None,
                 with_se: bool = True) -> FitResult:
    fit = fit_outcome_model(panel, design, options)
    if with_se:
        fit.se = standard_errors(fit, panel, design)
    fit.feedback_hat = fit_feedback(panel, design)
    fit.loglik_X = feedback_loglik(panel, design, fit.feedback_hat)
    return fit


# ---------------------------------------------------------------------------
# Naive comparator
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class NaiveFit:
    names: list[str]
    coef: np.ndarray
    se: np.ndarray

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.coef.tolist()))

    def se_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.se.tolist()))


def naive_least_squares(panel: PanelData, design: EventDesign) -> NaiveFit:
    """Two-way fixed-effects least squares of Y_t on [Y_t-1, X_t, D_t].

    Treats X as strictly exogenous and the event-time effects as common across units.
    Standard errors are clustered by unit.
    """
    N, T, K = panel.N, design.T, design.K
    Y_prev = np.column_stack([panel.Y0, panel.Y[:, :-1]])
    D = np.stack([design.indicators(panel.t0, t) for t in range(1, T + 1)], axis=1)
    Z = np.concatenate([Y_prev[:, :, None], panel.X, D], axis=2)
    names = ["rho_Y"] + [f"beta_{k + 1}" for k in range(K)] + [f"delta_{j}" for j in design.J_set]

    def two_way(a):
        return a - a.mean(axis=1, keepdims=True) - a.mean(axis=0, keepdims=True) + a.mean(axis=(0, 1), keepdims=True)

    y = two_way(panel.Y)
    Zt = two_way(Z)
    keep = np.any(Zt.reshape(-1, Zt.shape[2]) != 0, axis=0)
    Zf = Zt.reshape(-1, Zt.shape[2])[:, keep]
    yf = y.ravel()
    bread = np.linalg.pinv(Zf.T @ Zf)
    coef_k = bread @ Zf.T @ yf
    e = (yf - Zf @ coef_k).reshape(N, T)
    scores = np.einsum("itp,it->ip", Zf.reshape(N, T, -1), e)
    dof = N / max(N - 1, 1) * (N * T - 1) / max(N * T - Zf.shape[1] - N - T + 1, 1)
    V = dof * bread @ (scores.T @ scores) @ bread
    coef = np.full(Z.shape[2], np.nan)
    se = np.full(Z.shape[2], np.nan)
    coef[keep] = coef_k
    se[keep] = np.sqrt(np.clip(np.diag(V), 0.0, None))
    return NaiveFit(names=names, coef=coef, se=se)


# ---------------------------------------------------------------------------
# Monte Carlo harness
# ---------------------------------------------------------------------------

ESTIMATORS = ("mle", "naive")


@dataclass(eq=False)
class StudyCell:
    name: str
    config: SimConfig  # its seed is replaced per replication


@dataclass(eq=False)
class MonteCarloStudy:
    cells: list[StudyCell]
    replications: int
    estimators: tuple[str, ...] = ESTIMATORS
    seed: int = 0
    fit_options: FitOptions = field(default_factory=lambda: FitOptions(n_starts=1))
    max_fail_share: float = 0.2


@dataclass(eq=False)
class StudyResult:
    table: list[dict]
    replications: list[dict]


TABLE_COLUMNS = ("cell", "estimator", "parameter", "truth", "n_ok", "n_failed", "mean", "bias",
                 "sd", "rmse", "mae", "coverage", "cell_failed")


def replication_seed(seed: int, r: int) -> int:
    """Same seed for replication r in every cell, so cells are paired."""
    return int(np.random.SeedSequence(int(seed), spawn_key=(3, r)).generate_state(1, np.uint64)[0])


def _run_replication(cell: StudyCell, r: int, study: MonteCarloStudy) -> list[dict]:
    cfg = cell.config.replace(seed=replication_seed(study.seed, r))
    panel, _ = simulate_panel(cfg)
    design = cfg.design
    truth = theta_dict(cfg.theta)
    records = []
    for est in study.estimators:
        rec = {"cell": cell.name, "replication": r, "estimator": est, "ok": False, "error": "",
               "estimates": {}, "se": {}, "truth": truth}
        try:
            if est == "mle":
                fit = fit_outcome_model(panel, design, study.fit_options)
                se = standard_errors(fit, panel, design).natural_dict()
                rec["estimates"] = theta_dict(fit.theta_hat)
                rec["se"] = {k: se.get(k, np.nan) for k in rec["estimates"]}
                rec["ok"] = fit.converged
                if not fit.converged:
                    rec["error"] = "not converged: " + fit.message
            elif est == "naive":
                nf = naive_least_squares(panel, design)
                keys = [k for k in nf.names if k in truth]
                rec["estimates"] = {k: nf.as_dict()[k] for k in keys}
                rec["se"] = {k: nf.se_dict()[k] for k in keys}
                rec["ok"] = True
            else:
                raise ModelError(f"unknown estimator '{est}'")
        except (ModelError, np.linalg.LinAlgError, FloatingPointError) as exc:
            rec["error"] = f"{type(exc).__name__}: {exc}"
        records.append(rec)
    return records


def summarise_cell(cell_name: str, records: list[dict], estimators, max_fail_share: float,
                   z: float = 1.959963984540054) -> list[dict]:
    rows = []
    for est in estimators:
        recs = [r for r in records if r["estimator"] == est]
        ok = [r for r in recs if r["ok"]]
        n_fail = len(recs) - len(ok)
        failed = n_fail > max_fail_share * max(len(recs), 1)
        params = list(ok[0]["estimates"]) if ok else []
        for name in params:
            truth = ok[0]["truth"][name]
            est_vals = np.array([r["estimates"][name] for r in ok])
            se_vals = np.array([r["se"][name] for r in ok])
            err = est_vals - truth
            sd = float(np.std(est_vals, ddof=1)) if est_vals.size > 1 else 0.0
            rows.append({
                "cell": cell_name, "estimator": est, "parameter": name, "truth": truth,
                "n_ok": len(ok), "n_failed": n_fail, "mean": float(est_vals.mean()),
                "bias": float(err.mean()), "sd": sd, "rmse": float(np.sqrt(np.mean(err**2))),
                "mae": float(np.mean(np.abs(err))),
                "coverage": float(np.mean(np.abs(err) <= z * se_vals)), "cell_failed": failed,
            })
        if not params:
            rows.append({"cell": cell_name, "estimator": est, "parameter": "", "truth": np.nan,
                         "n_ok": 0, "n_failed": n_fail, "mean": np.nan, "bias": np.nan,
                         "sd": np.nan, "rmse": np.nan, "mae": np.nan, "coverage": np.nan,
                         "cell_failed": True})
    return rows


def monte_carlo(study: MonteCarloStudy,
                on_cell: Optional[Callable[[list[dict]], None]] = None) -> StudyResult:
    """Bias, RMSE and coverage per cell, estimator and parameter.

    ``on_cell`` receives each finished cell's rows, so callers can persist partial results.
    """
    if not study.cells:
        raise ModelError("empty study grid")
    if study.replications < 1:
        raise ModelError("replications must be >= 1")
    table, reps = [], []
    for cell in study.cells:
        records = []
        for r in range(study.replications):
            records.extend(_run_replication(cell, r, study))
        rows = summarise_cell(cell.name, records, study.estimators, study.max_fail_share)
        table.extend(rows)
        reps.extend(records)
        if on_cell is not None:
            on_cell(rows)
    return StudyResult(table=table, replications=reps)
