import numpy as np
import pytest

from conftest import make_config
from dynevent.estimation import (
    TABLE_COLUMNS,
    FitOptions,
    MonteCarloStudy,
    OutcomeObjective,
    RankDeficiencyError,
    StudyCell,
    feedback_regression,
    fit_feedback,
    fit_outcome_model,
    fit_two_step,
    monte_carlo,
    naive_least_squares,
    outcome_layout,
    standard_errors,
    summarise_cell,
    theta_dict,
)
from dynevent.likelihood import loglik
from dynevent.model_core import NEVER, DesignError, PanelData
from dynevent.simulation import simulate_panel

ONE_START = FitOptions(n_starts=1)


@pytest.fixture(scope="module")
def reference_fit():
    cfg = make_config(N=4000, seed=21)
    panel, _ = simulate_panel(cfg)
    fit = fit_outcome_model(panel, cfg.design)
    fit.se = standard_errors(fit, panel, cfg.design)
    return cfg, panel, fit


def test_reference_fit_recovers_theta(reference_fit):
    cfg, _, fit = reference_fit
    assert fit.converged
    truth, est, se = theta_dict(cfg.theta), theta_dict(fit.theta_hat), fit.se.natural_dict()
    for name in truth:
        assert abs(est[name] - truth[name]) < 3 * se[name], name
    assert se["sigma2_U"] > 0
    assert fit.se.hessian_pd


def test_fit_reports_consistent_loglik_and_trace(reference_fit):
    cfg, panel, fit = reference_fit
    assert fit.loglik_Y == pytest.approx(loglik(fit.theta_hat, fit.het_hat, panel, cfg.design), rel=1e-12)
    values = [v for _, v in fit.trace]
    assert np.all(np.diff(values) <= 1e-12 * abs(values[-1]))
    assert fit.gamma_hat[0] == 0.0


def test_start_at_truth_converges_quickly(reference_fit):
    cfg, panel, fit = reference_fit
    opts = FitOptions(start=(cfg.theta, cfg.het), n_starts=1)
    at_truth = fit_outcome_model(panel, cfg.design, opts)
    assert at_truth.converged
    assert at_truth.iterations <= 5
    err_truth = np.abs(at_truth.theta_hat.rho_Y - cfg.theta.rho_Y)
    assert err_truth <= np.abs(fit.theta_hat.rho_Y - cfg.theta.rho_Y) + 1e-4


def test_degenerate_dgp_recovers_persistence():
    # no effect innovations, no heterogeneity, beta held at its known value 0
    errors = []
    for r in range(20):
        cfg = make_config(N=4000, T=6, J_max=3, rho_Y=0.5, beta=0.0, sigma2_eps=0.0,
                          lam_cov=np.zeros((2, 2)), seed=300 + r)
        panel, _ = simulate_panel(cfg)
        fit = fit_outcome_model(panel, cfg.design, FitOptions(n_starts=1, fixed={"beta": [0.0]}))
        errors.append(fit.theta_hat.rho_Y - 0.5)
        assert fit.theta_hat.beta[0] == 0.0
    errors = np.abs(errors)
    print(f"degenerate DGP: MAE(rho_Y) = {errors.mean():.4f}, max = {errors.max():.4f}")
    assert errors.max() <= 0.03


def test_iteration_cap_reports_non_convergence():
    cfg = make_config(N=500, seed=22)
    panel, _ = simulate_panel(cfg)
    fit = fit_outcome_model(panel, cfg.design, FitOptions(n_starts=1, max_iter=2, polish=False))
    assert not fit.converged
    assert len(fit.trace) >= 2


def test_no_treated_units_is_a_design_error():
    cfg = make_config(N=200, cohorts=[NEVER], probs=np.r_[np.zeros(8), 1.0])
    panel, _ = simulate_panel(cfg)
    with pytest.raises(DesignError):
        fit_outcome_model(panel, cfg.design, ONE_START)


def test_objective_invariant_to_pack_round_trip():
    cfg = make_config(N=300, seed=23)
    panel, _ = simulate_panel(cfg)
    layout = outcome_layout(panel)
    z = layout.pack(cfg.theta, cfg.het)
    free = np.ones(layout.size, bool)
    obj = OutcomeObjective(panel, cfg.design, layout, z, free)
    z2 = layout.pack(*layout.unpack(z))
    assert obj(z2) == pytest.approx(obj(z), rel=1e-13)


def test_outcome_step_ignores_feedback_block():
    cfg = make_config(N=1500, seed=24)
    panel, _ = simulate_panel(cfg)
    alone = fit_outcome_model(panel, cfg.design, ONE_START)
    both = fit_two_step(panel, cfg.design, ONE_START, with_se=False)
    assert np.array_equal(alone.z_hat, both.z_hat)
    assert both.feedback_hat is not None and np.isfinite(both.loglik_X)

    # same realised (Y, X) produced under a different feedback law: the step-1 input is identical
    other = cfg.replace(feedback=make_config(a_y=-0.4, a_d=1.0, A_x=0.1).feedback)
    regen, _ = simulate_panel(other)
    copied = PanelData(panel.Y0, panel.X0, panel.t0, panel.Y, panel.X)
    assert not np.array_equal(regen.X, panel.X)
    again = fit_outcome_model(copied, cfg.design, ONE_START)
    assert np.array_equal(again.z_hat, alone.z_hat)


def test_standard_errors_shrink_with_sample_size():
    ratios = []
    se = {}
    for N in (2000, 4000):
        cfg = make_config(N=N, seed=25)
        panel, _ = simulate_panel(cfg)
        fit = fit_outcome_model(panel, cfg.design, ONE_START)
        se[N] = standard_errors(fit, panel, cfg.design).natural_dict()
    for name in theta_dict(make_config().theta):
        ratios.append(se[4000][name] / se[2000][name])
    assert abs(np.median(ratios) / np.sqrt(0.5) - 1) < 0.15


# --- feedback -------------------------------------------------------------------


def test_feedback_recovery():
    # each event-time dummy is seen at most once per unit, so its SE is sigma_eta / sqrt(N);
    # sigma_eta = 0.4 makes the 0.02 band about three standard errors wide
    cfg = make_config(N=5000, T=6, J_max=2, cohorts=[2, 3, 4, NEVER], a_y=0.3, a_d=0.0, A_x=0.5,
                      Sigma_X=0.16, seed=26)
    panel, _ = simulate_panel(cfg)
    fb = fit_feedback(panel, cfg.design)
    truth = cfg.feedback
    for name in ("A_x", "a_y", "a_d", "c"):
        assert np.max(np.abs(getattr(fb, name) - getattr(truth, name))) <= 0.02, name


def test_feedback_t_statistics_have_nominal_size():
    rejections, total = 0, 0
    for r in range(50):
        cfg = make_config(N=1000, T=6, a_y=0.0, a_d=0.0, seed=400 + r)
        panel, _ = simulate_panel(cfg)
        res = feedback_regression(panel, cfg.design)
        idx = [i for i, c in enumerate(res.columns) if c == "y_lag" or c.startswith("d")]
        t = np.abs(res.tstats()[idx, 0])
        rejections += int(np.sum(t > 2))
        total += t.size
    print(f"feedback size: {rejections}/{total} rejections")
    assert rejections / total <= 0.10


def test_duplicated_covariate_is_reported():
    cfg = make_config(N=300, seed=27)
    panel, _ = simulate_panel(cfg)
    X = np.concatenate([panel.X, panel.X], axis=2)
    X0 = np.column_stack([panel.X0, panel.X0])
    dup = PanelData(panel.Y0, X0, panel.t0, panel.Y, X)
    design = make_config(K=2).design
    with pytest.raises(RankDeficiencyError) as err:
        feedback_regression(dup, design)
    assert {"x1_lag", "x2_lag"} <= set(err.value.columns)


# --- naive comparator and Monte Carlo -------------------------------------------


def test_naive_agrees_without_feedback():
    for r in range(3):
        cfg = make_config(N=4000, a_y=0.0, a_d=0.0, seed=500 + r)
        panel, _ = simulate_panel(cfg)
        mle = fit_outcome_model(panel, cfg.design, ONE_START).theta_hat.beta[0]
        naive = naive_least_squares(panel, cfg.design)
        assert abs(naive.as_dict()["beta_1"] - mle) < 2 * naive.se_dict()["beta_1"]


def test_single_replication_table():
    cfg = make_config(N=300, T=4, J_max=2, cohorts=[2, 3, NEVER], seed=0)
    study = MonteCarloStudy(cells=[StudyCell("tiny", cfg)], replications=1, seed=5)
    res = monte_carlo(study)
    assert all(set(row) == set(TABLE_COLUMNS) for row in res.table)
    for row in res.table:
        assert row["sd"] == 0.0
        assert row["n_ok"] + row["n_failed"] == 1
    assert {row["estimator"] for row in res.table} == {"mle", "naive"}


def test_cell_fails_when_too_many_replications_fail():
    ok = {"estimator": "mle", "ok": True, "estimates": {"rho_Y": 0.5}, "se": {"rho_Y": 0.1},
          "truth": {"rho_Y": 0.5}}
    bad = {"estimator": "mle", "ok": False, "estimates": {}, "se": {}, "truth": {"rho_Y": 0.5}}
    rows = summarise_cell("c", [ok] * 4 + [bad], ["mle"], 0.2)
    assert not rows[0]["cell_failed"]
    rows = summarise_cell("c", [ok] * 3 + [bad] * 2, ["mle"], 0.2)
    assert rows[0]["cell_failed"]


def test_empty_grid_rejected():
    with pytest.raises(Exception):
        monte_carlo(MonteCarloStudy(cells=[], replications=2))
