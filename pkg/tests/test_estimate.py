"""Likelihood evaluation, MLE fitting, standard errors, bootstrap, and the
profile surface over the interaction coefficients."""

import numpy as np
import pytest
from scipy.special import logsumexp

from blockdp import (
    BootstrapError,
    ConfigError,
    EstimationError,
    FailureHazard,
    NeighborBinning,
    NeighborProcess,
    Panel,
    StateSpec,
    StructuralParams,
    asymptotic_se,
    block_bootstrap,
    build_likelihood_context,
    build_state_space,
    default_init,
    fit_mle,
    information_criteria,
    likelihood_surface,
    lr_test,
    negative_log_likelihood,
    null_nll,
    pseudo_r2,
)
from blockdp.estimate import _resample_panel, fd_hessian

from conftest import FAST_OPT, TOY_TRUTH

TABLE_NLLS = (8955.90, 8886.746)  # restricted (k=5) and spatial (k=7) reference fits
TABLE_N = 378_124


def _space(age_max, n_cages, binning=NeighborBinning.NONE):
    return build_state_space(StateSpec(age_max=age_max, n_cages=n_cages, binning=binning))


def _panel(rows):
    arr = np.asarray(rows, dtype=np.int64)
    return Panel(*(arr[:, j] for j in range(arr.shape[1])))


def _tiny_ctx(rows, hazard_table=((0.3,), (0.6,))):
    space = _space(1, 1)
    return build_likelihood_context(
        _panel(rows),
        space,
        hazard=FailureHazard.from_table(np.asarray(hazard_table)),
        nbr_process=NeighborProcess.trivial(1, 1),
    )


# ------------------------------------------------------------ likelihood

def test_nll_equal_utilities_is_n_log2(toy_ctx):
    params = StructuralParams((0.0, 0.0), 0.0, 0.0, (0.0,), (0.0,), beta=0.0)
    nll = negative_log_likelihood(toy_ctx, params)
    assert nll == pytest.approx(toy_ctx.n_obs * np.log(2.0), rel=1e-12)


def test_nll_single_observation_known_probability():
    # myopic, theta_rc = -ln 9: P(continue) = 0.9 at every state
    ctx = _tiny_ctx([(0, 0, 0, 0, 0, 0, 0)])
    params = StructuralParams((0.0,), 0.0, -np.log(9.0), beta=0.0)
    assert negative_log_likelihood(ctx, params) == pytest.approx(
        -np.log(0.9), rel=1e-12
    )


def test_nll_matches_brute_force_recomputation():
    rng = np.random.default_rng(42)
    rows = [
        (n, n % 5, 0, rng.integers(0, 2), 0, rng.integers(0, 2), rng.integers(0, 2))
        for n in range(50)
    ]
    ctx = _tiny_ctx(rows)
    params = StructuralParams((-0.3,), -1.0, -2.0, beta=0.8)

    # independent dense solve at 1e-14, then a direct sum over observations
    from blockdp import CONTINUE, REPLACE, flow_utility_table

    u = flow_utility_table(ctx.space, params)
    pc = ctx.kernel.matrix(CONTINUE).toarray()
    pr = ctx.kernel.matrix(REPLACE).toarray()
    ev = np.zeros(ctx.space.size)
    for _ in range(30_000):
        v = np.stack([u[:, 0] + 0.8 * pc @ ev, u[:, 1] + 0.8 * pr @ ev])
        ev_new = logsumexp(v, axis=0)
        if np.max(np.abs(ev_new - ev)) <= 1e-14:
            break
        ev = ev_new
    log_p = v - ev_new
    oracle = -sum(log_p[a, s] for s, a in zip(ctx.state_ids, ctx.actions))
    assert negative_log_likelihood(ctx, params) == pytest.approx(oracle, abs=1e-9)


def test_nll_bitwise_deterministic(toy_ctx):
    a = negative_log_likelihood(toy_ctx, TOY_TRUTH)
    b = negative_log_likelihood(toy_ctx, TOY_TRUTH)
    assert a == b


def test_null_nll_hand_count(toy_ctx):
    n = toy_ctx.n_obs
    n1 = int(toy_ctx.actions.sum())
    want = -(n1 * np.log(n1 / n) + (n - n1) * np.log((n - n1) / n))
    assert null_nll(toy_ctx) == pytest.approx(want, rel=1e-12)


# ---------------------------------------------- information criteria / LR

def test_information_criteria_formula():
    aic, bic = information_criteria(0.0, 1, 1)
    assert aic == 2.0 and bic == 0.0
    aic, bic = information_criteria(100.0, 3, 1000)
    assert aic == pytest.approx(206.0)
    assert bic == pytest.approx(3 * np.log(1000) + 200.0)
    with pytest.raises(ConfigError):
        information_criteria(1.0, 0, 10)
    with pytest.raises(ConfigError):
        information_criteria(1.0, 2, 0)


def test_pseudo_r2_values():
    assert pseudo_r2(50.0, 50.0) == 0.0
    assert pseudo_r2(0.0, 123.4) == 1.0
    assert pseudo_r2(TABLE_NLLS[1], 21897.07) == pytest.approx(0.594, abs=1e-3)
    with pytest.raises(ZeroDivisionError):
        pseudo_r2(1.0, 0.0)
    with pytest.raises(ConfigError):
        pseudo_r2(1.0, -2.0)


def test_lr_statistic_reference_value():
    res = lr_test(TABLE_NLLS[0], TABLE_NLLS[1], df=2)
    assert res.statistic == pytest.approx(138.31, abs=0.01)
    assert res.p_value < 1e-3
    assert res.df == 2
    assert set(res.to_dict()) == {"statistic", "df", "p_value"}


def test_lr_chi2_closed_form():
    # with 2 degrees of freedom the survival function is exp(-x / 2)
    res = lr_test(10.0, 10.0 - 5.991 / 2.0, df=2)
    assert res.statistic == pytest.approx(5.991, rel=1e-12)
    assert res.p_value == pytest.approx(np.exp(-5.991 / 2.0), rel=1e-10)


def test_lr_identical_models_and_nesting_violation():
    res = lr_test(77.7, 77.7, df=1)
    assert res.statistic == 0.0 and res.p_value == 1.0
    # tiny inversions inside the slack clamp to zero
    assert lr_test(77.7, 77.7 + 1e-8, df=1).statistic == 0.0
    with pytest.raises(EstimationError, match="not nested"):
        lr_test(50.0, 51.0, df=1)


# ------------------------------------------------------------------ fits

def test_fit_metadata_consistency(toy_ctx, toy_fit):
    assert toy_fit.trace.converged
    assert toy_fit.k == 6
    assert toy_fit.n_obs == toy_ctx.n_obs
    aic, bic = information_criteria(toy_fit.nll, toy_fit.k, toy_fit.n_obs)
    assert toy_fit.aic == aic and toy_fit.bic == bic
    assert 0.0 < toy_fit.pseudo_r2 < 1.0
    assert set(toy_fit.se_asymptotic) == set(toy_fit.params_hat.names())
    assert all(se > 0 for se in toy_fit.se_asymptotic.values())
    d = toy_fit.to_dict()
    assert d["k"] == 6 and d["optimizer"]["converged"] is True


def test_restricted_fits_never_beat_full(toy_ctx, toy_fit):
    init = TOY_TRUTH.with_vector(np.array([-0.01, -0.01, -5.0, -8.0, 0.0, 0.0]))
    nlls, ks = {}, {}
    for fixed in (("gamma_lag",), ("gamma_fail",), ("gamma_lag", "gamma_fail")):
        fit = fit_mle(toy_ctx, init, FAST_OPT, fixed=fixed, compute_se=False)
        assert fit.trace.converged
        nlls[fixed], ks[fixed] = fit.nll, fit.k
        # pinned coefficients stay at their init values and drop out of k
        for name in fixed:
            assert getattr(fit.params_hat, name) == (0.0,)
    assert ks[("gamma_lag",)] == 5 and ks[("gamma_lag", "gamma_fail")] == 4
    for fixed, nll_r in nlls.items():
        assert nll_r >= toy_fit.nll - 1e-6
    both = nlls[("gamma_lag", "gamma_fail")]
    assert both >= nlls[("gamma_lag",)] - 1e-6
    assert both >= nlls[("gamma_fail",)] - 1e-6


def test_fit_rerun_is_bit_identical(toy_ctx, toy_fit):
    init = TOY_TRUTH.with_vector(np.array([-0.01, -0.01, -5.0, -8.0, 0.0, 0.0]))
    again = fit_mle(toy_ctx, init, FAST_OPT)
    np.testing.assert_array_equal(
        again.params_hat.as_vector(), toy_fit.params_hat.as_vector()
    )
    assert again.nll == toy_fit.nll
    assert again.trace.evaluations == toy_fit.trace.evaluations


def test_fit_rejects_bad_fixed_names(toy_ctx):
    init = default_init(2, 1, 0.9)
    with pytest.raises(ConfigError, match="unknown fixed"):
        fit_mle(toy_ctx, init, FAST_OPT, fixed=("bogus",))
    with pytest.raises(ConfigError, match="no free parameters"):
        fit_mle(toy_ctx, init, FAST_OPT, fixed=tuple(init.names()))


def test_default_init_values():
    init = default_init(3, 1, 0.95)
    assert init.theta_age == (-0.01, -0.01, -0.01)
    assert init.theta_fail == -5.0 and init.theta_rc == -8.0
    assert init.gamma_lag == (0.0,) and init.gamma_fail == (0.0,)
    assert init.beta == 0.95
    assert default_init(1, 0, 0.9).n_params == 3


# -------------------------------------------------------- standard errors

def test_asymptotic_se_quadratic_closed_form():
    template = StructuralParams((-0.1,), -1.0, -2.0, beta=0.9)

    def f(x):  # free vector is (theta_fail, theta_rc) after fixing the age slope
        return 0.5 * (4.0 * (x[0] + 1.0) ** 2 + 25.0 * (x[1] + 2.0) ** 2)

    se = asymptotic_se(f, template, fixed=("theta_age_c0",))
    assert se["theta_fail"] == pytest.approx(1.0 / 2.0, rel=1e-6)
    assert se["theta_rc"] == pytest.approx(1.0 / 5.0, rel=1e-6)


def test_fd_hessian_matches_analytic():
    def f(x):
        return np.exp(x[0]) * np.cos(x[1])

    x = np.array([0.3, 0.7])
    h = fd_hessian(f, x, steps=np.array([1e-4, 1e-4]))
    e, c, s = np.exp(0.3), np.cos(0.7), np.sin(0.7)
    analytic = np.array([[e * c, -e * s], [-e * s, -e * c]])
    np.testing.assert_allclose(h, analytic, rtol=1e-5, atol=1e-7)


def test_asymptotic_se_rejects_non_positive_definite():
    template = StructuralParams((-0.1,), -1.0, -2.0, beta=0.9)

    def f(x):  # concave along theta_rc: a maximum, not a minimum
        return -0.5 * (x[0] + 2.0) ** 2

    with pytest.raises(EstimationError, match="eigenvalues"):
        asymptotic_se(f, template, fixed=("theta_age_c0", "theta_fail"))


# --------------------------------------------------------------- bootstrap

def test_bootstrap_reproducible_with_prefix_property(toy_ctx, toy_fit):
    kw = dict(optimizer_cfg=FAST_OPT, fixed=())
    two = block_bootstrap(toy_ctx, toy_fit.params_hat, B=2, seed=5, **kw)
    again = block_bootstrap(toy_ctx, toy_fit.params_hat, B=2, seed=5, **kw)
    np.testing.assert_array_equal(two.estimates, again.estimates)
    # replicates are keyed by (seed, index): a longer run starts the same way
    three = block_bootstrap(toy_ctx, toy_fit.params_hat, B=3, seed=5, **kw)
    np.testing.assert_array_equal(three.estimates[:2], two.estimates)
    assert two.n_dropped == 0
    assert set(two.se) == set(toy_fit.params_hat.names())
    assert all(se >= 0 for se in two.se.values())
    assert two.to_dict() == {"se": two.se, "replicates": 2, "dropped": 0, "seed": 5}


def test_bootstrap_requires_multiple_groups_and_replicates(toy_ctx, toy_fit):
    rows = [(n, 0, t, t, 0, 0, 0) for n in range(3) for t in range(4)]
    space = _space(6, 1)
    ctx = build_likelihood_context(
        _panel(rows),
        space,
        hazard=FailureHazard.from_table(np.full((7, 1), 0.1)),
        nbr_process=NeighborProcess.trivial(1, 1),
    )
    params = StructuralParams((-0.1,), -1.0, -2.0, beta=0.9)
    with pytest.raises(BootstrapError, match="at least 2 groups"):
        block_bootstrap(ctx, params, B=2, seed=0)
    with pytest.raises(ConfigError, match="at least 2 replicates"):
        block_bootstrap(toy_ctx, toy_fit.params_hat, B=1, seed=0)


def test_resample_keeps_group_blocks_intact(toy_panel):
    groups = np.unique(toy_panel.group_id)
    rng = np.random.default_rng(0)
    draw = rng.choice(groups, size=groups.size, replace=True)
    res = _resample_panel(toy_panel, draw)
    sizes = {int(g): int(np.sum(toy_panel.group_id == g)) for g in groups}
    assert res.n_obs == sum(sizes[int(g)] for g in draw)
    # each resampled block keeps its original in-group structure
    for j, g in enumerate(draw):
        mask = res.group_id == j
        assert int(mask.sum()) == sizes[int(g)]
        src = toy_panel.group_id == g
        np.testing.assert_array_equal(np.sort(res.period[mask]), np.sort(toy_panel.period[src]))
    # duplicated groups get distinct node ids, so no block merging happens
    assert np.unique(np.stack([res.node_id, res.group_id]), axis=1).shape[1] == np.unique(res.node_id).size


# ----------------------------------------------------------------- surface

@pytest.fixture(scope="module")
def toy_surface(toy_ctx, toy_fit):
    gl = toy_fit.params_hat.gamma_lag[0] + np.array([-0.05, 0.0, 0.05])
    gf = toy_fit.params_hat.gamma_fail[0] + np.array([-0.05, 0.0, 0.05])
    return likelihood_surface(toy_ctx, toy_fit.params_hat, gl, gf)


def test_surface_minimum_sits_at_the_estimate(toy_surface):
    assert not toy_surface.failed.any()
    assert np.nanmin(toy_surface.delta) == 0.0
    assert np.all(toy_surface.delta >= 0.0)
    i, j = toy_surface.min_cell
    assert abs(i - 1) <= 1 and abs(j - 1) <= 1  # at or adjacent to the center
    assert toy_surface.delta[1, 1] <= 0.05  # the estimate itself is near-minimal
    assert toy_surface.contour_level == pytest.approx(5.991464547107979 / 2.0, rel=1e-9)


def test_surface_csv_round_trips(toy_surface, tmp_path):
    path = tmp_path / "surface.csv"
    toy_surface.to_csv(str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "gamma_lag,gamma_fail,delta_nll"
    assert len(lines) == 1 + 9
    gl, gf, d = lines[1 + 5].split(",")  # row (1, 2) in row-major order
    assert float(gl) == toy_surface.gamma_lag_values[1]
    assert float(gf) == toy_surface.gamma_fail_values[2]
    assert float(d) == toy_surface.delta[1, 2]


def test_surface_rejects_bad_grids(toy_ctx, toy_fit):
    with pytest.raises(ConfigError, match="finite and non-empty"):
        likelihood_surface(toy_ctx, toy_fit.params_hat, np.array([]), np.array([0.0]))
    with pytest.raises(ConfigError, match="finite and non-empty"):
        likelihood_surface(
            toy_ctx, toy_fit.params_hat, np.array([np.nan]), np.array([0.0])
        )
    no_gamma = StructuralParams((-0.1, -0.2), -1.0, -2.0, beta=0.9)
    with pytest.raises(ConfigError, match="scalar interaction"):
        likelihood_surface(toy_ctx, no_gamma, np.array([0.0]), np.array([0.0]))
