import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_het, random_theta
from dynevent.model_core import (
    NEVER,
    AdmissibilityError,
    DesignError,
    DimensionError,
    EventDesign,
    HeterogeneityModel,
    PanelData,
    ParamLayout,
    StructuralParams,
    build_loadings,
    cohort_dummy_levels,
    delta_path,
    pack_params,
    unpack_params,
)
from dynevent.simulation import roll_forward


# --- delta_path ---------------------------------------------------------------


@pytest.mark.parametrize("d0,eps,rho,expected", [
    (2.0, [0.0, 0.0], 1.0, [2.0, 2.0, 2.0]),
    (1.0, [0.0, 0.0, 0.0], 0.5, [1.0, 0.5, 0.25, 0.125]),
    (0.0, [1.0, 1.0], 0.5, [0.0, 1.0, 1.5]),
])
def test_delta_path_hand_values(d0, eps, rho, expected):
    assert np.array_equal(delta_path(d0, eps, rho), expected)


@given(d0=st.floats(-5, 5), rho=st.floats(-1.05, 1.05), J=st.integers(0, 12), seed=st.integers(0, 2**32 - 1))
def test_delta_path_matches_closed_form(d0, rho, J, seed):
    eps = np.random.default_rng(seed).normal(size=J)
    closed = np.array([rho**j * d0 + sum(rho ** (j - k) * eps[k - 1] for k in range(1, j + 1))
                       for j in range(J + 1)])
    assert np.max(np.abs(delta_path(d0, eps, rho) - closed)) <= 1e-12


def test_delta_path_vectorised_rows():
    rng = np.random.default_rng(0)
    d0, eps = rng.normal(size=5), rng.normal(size=(5, 3))
    out = delta_path(d0, eps, 0.7)
    for i in range(5):
        assert np.array_equal(out[i], delta_path(d0[i], eps[i], 0.7))


# --- loadings -----------------------------------------------------------------


def test_no_persistence_gives_identity_loadings():
    d = EventDesign(T=4, K=1, J_max=2)
    th = StructuralParams(0.0, 0.5, [1.0], 1.0, 0.1)
    ld = build_loadings(th, d, 1.0, [0.0], 2, np.zeros((4, 1)))
    assert np.array_equal(ld.L_U, np.eye(4))
    assert np.array_equal(ld.L_alpha, np.ones(4))


def test_never_treated_geometric_partial_sums():
    d = EventDesign(T=3, K=1, J_max=2)
    th = StructuralParams(0.5, 0.9, [1.0], 1.0, 0.1)
    ld = build_loadings(th, d, 0.0, [0.0], NEVER, np.zeros((3, 1)))
    assert np.allclose(ld.L_alpha, [1.0, 1.5, 1.75], rtol=0, atol=1e-15)
    assert np.array_equal(ld.L_delta0, np.zeros(3))
    assert np.array_equal(ld.L_eps, np.zeros((3, 2)))


def test_persistence_matrix_structure():
    d = EventDesign(T=5, K=2, J_max=1)
    th = StructuralParams(-0.7, 0.2, [1.0, 2.0], 1.0, 0.1)
    ld = build_loadings(th, d, 0.0, [0.0, 0.0], 3, np.zeros((5, 2)))
    assert np.array_equal(np.diag(ld.L_U), np.ones(5))
    assert np.array_equal(np.triu(ld.L_U, 1), np.zeros((5, 5)))
    for t in range(5):
        for s in range(t + 1):
            assert ld.L_U[t, s] == pytest.approx((-0.7) ** (t - s), abs=1e-15)


def test_eps_rows_zero_before_adoption():
    d = EventDesign(T=6, K=1, J_max=3)
    th = StructuralParams(0.4, 0.8, [0.3], 1.0, 0.2)
    ld = build_loadings(th, d, 0.0, [0.0], 4, np.zeros((6, 1)))
    assert np.array_equal(ld.L_eps[:3], np.zeros((3, 3)))
    assert np.array_equal(ld.L_delta0[:3], np.zeros(3))
    assert ld.L_delta0[3] == 1.0


@given(seed=st.integers(0, 2**32 - 1))
def test_loadings_reproduce_recursion(seed):
    rng = np.random.default_rng(seed)
    d = EventDesign(T=int(rng.integers(1, 10)), K=int(rng.integers(1, 4)), J_max=int(rng.integers(0, 6)))
    th = random_theta(rng, d)
    t0 = int(rng.choice(list(range(1, d.T + 1)) + [NEVER]))
    Y0, X0, X = rng.normal(), rng.normal(size=d.K), rng.normal(size=(d.T, d.K))
    alpha, d0 = rng.normal(size=2)
    eps, U = rng.normal(size=d.J_max), rng.normal(size=d.T)
    ld = build_loadings(th, d, Y0, X0, t0, X)
    delta = delta_path(d0, eps, th.rho_delta)[None]
    Y, _ = roll_forward(th, d, [Y0], X0[None], [t0], [alpha], delta, U[None], x_path=X[None])
    assert np.max(np.abs(ld.reconstruct(alpha, d0, eps, U) - Y[0])) <= 1e-12


def test_build_loadings_dimension_errors():
    d = EventDesign(T=3, K=2, J_max=1)
    th = StructuralParams(0.2, 0.2, [1.0, 1.0], 1.0, 0.1)
    with pytest.raises(DimensionError):
        build_loadings(th, d, 0.0, [0.0, 0.0], 1, np.zeros((4, 2)))
    with pytest.raises(DimensionError):
        build_loadings(th, d, 0.0, [0.0], 1, np.zeros((3, 2)))
    with pytest.raises(DesignError):
        build_loadings(th, d, 0.0, [0.0, 0.0], 7, np.zeros((3, 2)))


# --- domain types -------------------------------------------------------------


def test_design_validation():
    with pytest.raises(DesignError):
        EventDesign(T=0, K=1, J_max=1)
    with pytest.raises(DesignError):
        EventDesign(T=3, K=0, J_max=1)
    d = EventDesign(T=3, K=1, J_max=2)
    assert d.J_set == (0, 1, 2)
    assert list(d.valid_t0([0, 1, 3, 4, NEVER])) == [False, True, True, False, True]


def test_structural_params_admissibility():
    with pytest.raises(AdmissibilityError):
        StructuralParams(0.5, 0.5, [1.0], 0.0, 0.1)
    with pytest.raises(AdmissibilityError):
        StructuralParams(0.5, 0.5, [1.0], 1.0, -0.1)
    StructuralParams(1.3, 1.0, [1.0], 1.0, 0.0)  # simulation accepts any finite values


def test_heterogeneity_requires_psd():
    with pytest.raises(AdmissibilityError):
        HeterogeneityModel(np.zeros((2, 3)), [[1.0, 2.0], [2.0, 1.0]], ())
    HeterogeneityModel(np.zeros((2, 3)), np.zeros((2, 2)), ())


def test_panel_rejects_bad_t0_and_does_not_alias_input():
    Y = np.zeros((2, 3))
    with pytest.raises(DesignError):
        PanelData(np.zeros(2), np.zeros((2, 1)), [0, 1], Y, np.zeros((2, 3, 1)))
    p = PanelData(np.zeros(2), np.zeros((2, 1)), [1, NEVER], Y, np.zeros((2, 3, 1)))
    Y[0, 0] = 5.0
    assert p.Y[0, 0] == 0.0
    assert not p.Y.flags.writeable


def test_cohort_levels_drop_earliest_treated():
    assert cohort_dummy_levels([4, 2, NEVER, 2, 3]) == (3, 4, NEVER)
    assert cohort_dummy_levels([NEVER, 5]) == (NEVER,)


# --- transforms ---------------------------------------------------------------


def _layout_point(rng, T=5, K=2):
    d = EventDesign(T=T, K=K, J_max=2)
    th = random_theta(rng, d)
    th = th.replace(sigma2_eps=max(th.sigma2_eps, 1e-3))
    het = random_het(rng, d, [2, 3, NEVER])
    return th, het


def test_pack_reference_values():
    th = StructuralParams(0.0, 0.3, [0.5], 1.0, 0.2, gamma=np.array([0.0, 0.1, 0.2]))
    het = HeterogeneityModel(np.zeros((2, 4)), np.eye(2), (NEVER,))
    z, layout = pack_params(th, het, "free")
    s = layout.slices
    assert z[s["sigma2_U"]][0] == 0.0
    assert z[s["rho_Y"]][0] == 0.0
    assert layout.names[:5] == ["rho_Y", "rho_delta", "beta_1", "sigma2_U", "sigma2_eps"]
    assert layout.size == len(layout.names)


@given(seed=st.integers(0, 2**32 - 1))
def test_pack_unpack_round_trip(seed):
    th, het = _layout_point(np.random.default_rng(seed))
    z, layout = pack_params(th, het, "free")
    th2, het2 = unpack_params(z, layout)
    err = max(abs(th2.rho_Y - th.rho_Y), abs(th2.rho_delta - th.rho_delta),
              np.max(np.abs(th2.beta - th.beta)), abs(th2.sigma2_U - th.sigma2_U),
              abs(th2.sigma2_eps - th.sigma2_eps), np.max(np.abs(th2.gamma - th.gamma)),
              np.max(np.abs(het2.mean_coef - het.mean_coef)), np.max(np.abs(het2.cov - het.cov)))
    assert err <= 1e-10
    assert np.allclose(layout.pack(th2, het2), z, rtol=0, atol=1e-10)


@pytest.mark.parametrize("change", [
    dict(sigma2_eps=0.0), dict(rho_Y=1.0), dict(rho_delta=-1.0),
])
def test_pack_rejects_boundary(change):
    th, het = _layout_point(np.random.default_rng(3))
    with pytest.raises(AdmissibilityError):
        pack_params(th.replace(**change), het, "free")


def test_pack_rejects_nonzero_first_time_effect():
    th, het = _layout_point(np.random.default_rng(4))
    g = th.gamma.copy()
    g[0] = 0.1
    with pytest.raises(AdmissibilityError):
        pack_params(th.replace(gamma=g), het, "free")


def test_never_cohort_delta_mean_is_pinned():
    layout = ParamLayout(K=1, T=4, cohorts=(3, NEVER))
    mask = layout.default_fixed_mask()
    assert [n for n, m in zip(layout.names, mask) if m] == ["mu_delta0_cohort_never"]
