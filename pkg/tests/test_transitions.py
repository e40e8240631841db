"""Hazard estimation, neighbor-level chains, and kernel assembly/validation."""

import numpy as np
import pytest
import scipy.sparse as sp

from blockdp import (
    CONTINUE,
    REPLACE,
    ConfigError,
    ControlledKernel,
    EstimationError,
    FailureHazard,
    NeighborBinning,
    NeighborProcess,
    Panel,
    StateSpec,
    assemble_kernel,
    build_state_space,
    estimate_failure_hazard,
    estimate_neighbor_process,
    kernel_triplets,
    validate_kernel,
    write_kernel_csv,
)

from conftest import TOY_HAZARD


def _panel(rows):
    """rows: (node, group, period, age, cage, fail, decision[, nbr_lag, nbr_fail])."""
    arr = np.asarray(rows, dtype=np.int64)
    return Panel(*(arr[:, j] for j in range(arr.shape[1])))


def _space(age_max, n_cages, binning=NeighborBinning.NONE):
    return build_state_space(StateSpec(age_max=age_max, n_cages=n_cages, binning=binning))


# ---------------------------------------------------------------- hazard

def test_hazard_no_failures_alpha_zero_is_zero():
    rows = [(0, 0, t, t, 0, 0, 0) for t in range(10)]
    hz = estimate_failure_hazard(_panel(rows), _space(12, 1), alpha=0.0)
    assert hz.table.max() == 0.0
    assert hz.failures.sum() == 0


def test_hazard_three_of_ten_alpha_zero():
    # 10 exposures at (age 4, cage 1), 3 failures: raw frequency 0.3 exactly
    rows = [(n, 0, 0, 4, 1, int(n < 3), 0) for n in range(10)]
    hz = estimate_failure_hazard(_panel(rows), _space(12, 2), alpha=0.0)
    assert hz.table[4, 1] == 0.3
    assert hz.exposures[4, 1] == 10
    assert hz.failures[4, 1] == 3


def test_hazard_unobserved_cell_is_smoothed_prior():
    rows = [(0, 0, 0, 0, 0, 0, 0)]
    hz = estimate_failure_hazard(_panel(rows), _space(1, 1), alpha=0.5)
    # cell (1, 0) has no exposures: (0 + 0.5) / (0 + 1) = 0.5
    assert hz.table[1, 0] == 0.5
    assert hz.n_empty_cells == 1


def test_hazard_laplace_hand_count():
    fails = (1, 0, 1, 0, 0)
    rows = [(n, 0, 0, 2, 0, f, 0) for n, f in enumerate(fails)]
    hz = estimate_failure_hazard(_panel(rows), _space(4, 1), alpha=0.5)
    assert hz.table[2, 0] == pytest.approx((2 + 0.5) / (5 + 1), abs=1e-15)
    assert hz.n_empty_cells == 5 * 1 - 1


def test_hazard_ages_beyond_cap_fold_into_cap_cell():
    rows = [(0, 0, 0, 9, 0, 1, 0), (1, 0, 0, 3, 0, 0, 0)]
    hz = estimate_failure_hazard(_panel(rows), _space(3, 1), alpha=0.0)
    assert hz.exposures[3, 0] == 2
    assert hz.table[3, 0] == 0.5


def test_hazard_rejects_negative_alpha_and_empty_panel():
    rows = [(0, 0, 0, 0, 0, 0, 0)]
    with pytest.raises(ConfigError, match="smoothing"):
        estimate_failure_hazard(_panel(rows), _space(1, 1), alpha=-0.1)
    empty = Panel(*(np.empty(0, dtype=np.int64) for _ in range(7)))
    with pytest.raises(EstimationError, match="empty panel"):
        estimate_failure_hazard(empty, _space(1, 1))


def test_hazard_rejects_cage_outside_space():
    rows = [(0, 0, 0, 0, 2, 0, 0)]
    with pytest.raises(ConfigError, match="cage"):
        estimate_failure_hazard(_panel(rows), _space(1, 2))


def test_hazard_table_entries_validated():
    with pytest.raises(ConfigError, match=r"\[0, 1\]"):
        FailureHazard.from_table([[1.2]])
    with pytest.raises(ConfigError, match=r"\[0, 1\]"):
        FailureHazard.from_table([[-0.01]])


# ------------------------------------------------------- neighbor process

def test_neighbor_process_requires_derived_columns():
    rows = [(0, 0, 0, 0, 0, 0, 0)]
    with pytest.raises(ConfigError, match="neighbor columns"):
        estimate_neighbor_process(_panel(rows), _space(1, 1, NeighborBinning.BINARY))


def test_neighbor_process_single_level_is_trivial():
    rows = [(0, 0, 0, 0, 0, 0, 0, 0, 0), (0, 0, 1, 1, 0, 0, 0, 0, 0)]
    nbr = estimate_neighbor_process(_panel(rows), _space(2, 1))
    assert nbr.lag_table.shape == (1, 1, 1)
    assert nbr.lag_table[0, 0, 0] == 1.0 and nbr.fail_table[0, 0, 0] == 1.0


def test_neighbor_process_quiet_panel_absorbs_at_zero():
    # nobody replaces or fails: observed row 0 is a point mass at 0 and the
    # never-visited level-1 rows fall back to the same point mass
    rows = [(n, 0, t, t, 0, 0, 0, 0, 0) for n in range(2) for t in range(6)]
    nbr = estimate_neighbor_process(_panel(rows), _space(8, 1, NeighborBinning.BINARY))
    assert np.all(nbr.lag_table[:, :, 0] == 1.0)
    assert np.all(nbr.fail_table[:, :, 0] == 1.0)
    assert nbr.n_fallback_rows == 2  # level-1 row in each of the two tables


def test_neighbor_process_hand_counted_frequencies():
    lag = [0, 1, 1, 0, 0, 1, 1, 0, 0]   # from 0: 2-2 split; from 1: 2-2 split
    fail = [0, 0, 0, 1, 0, 0, 0, 1, 0]  # from 0: 4 stay, 2 up; from 1: always down
    rows = [
        (n, 0, t, t, 0, 0, 0, lag[t], fail[t]) for n in range(2) for t in range(9)
    ]
    nbr = estimate_neighbor_process(_panel(rows), _space(12, 1, NeighborBinning.BINARY))
    np.testing.assert_allclose(nbr.lag_table[0], [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)
    np.testing.assert_allclose(
        nbr.fail_table[0], [[2 / 3, 1 / 3], [1.0, 0.0]], atol=1e-15
    )
    assert nbr.n_fallback_rows == 0


def test_neighbor_process_period_gap_breaks_transition_pairs():
    periods = [0, 1, 3, 4]
    lag = [0, 1, 0, 1]
    rows = [(0, 0, p, i, 0, 0, 0, lag[i], 0) for i, p in enumerate(periods)]
    nbr = estimate_neighbor_process(_panel(rows), _space(6, 1, NeighborBinning.BINARY))
    # only (0,1) and (3,4) are consecutive, both 0 -> 1; the 1 -> ? row is unseen
    np.testing.assert_allclose(nbr.lag_table[0, 0], [0.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(nbr.lag_table[0, 1], [1.0, 0.0], atol=1e-15)
    assert nbr.n_fallback_rows >= 1


def test_neighbor_process_bins_raw_counts():
    counts = [0, 2, 5, 1]  # binned levels 0, 2, 2, 1
    rows = [(0, 0, t, t, 0, 0, 0, counts[t], 0) for t in range(4)]
    nbr = estimate_neighbor_process(
        _panel(rows), _space(6, 1, NeighborBinning.BINS_0_1_2PLUS)
    )
    assert nbr.lag_table.shape == (1, 3, 3)
    np.testing.assert_allclose(nbr.lag_table[0, 0], [0.0, 0.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(nbr.lag_table[0, 2], [0.0, 0.5, 0.5], atol=1e-15)


def test_neighbor_process_conditions_on_cage():
    lag_a = [0, 1, 0, 1, 0]  # cage 0: alternating
    lag_b = [0, 0, 0, 0, 0]  # cage 1: quiet
    rows = [(0, 0, t, t, 0, 0, 0, lag_a[t], 0) for t in range(5)]
    rows += [(1, 1, t, t, 1, 0, 0, lag_b[t], 0) for t in range(5)]
    nbr = estimate_neighbor_process(_panel(rows), _space(6, 2, NeighborBinning.BINARY))
    np.testing.assert_allclose(nbr.lag_table[0, 0], [0.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(nbr.lag_table[1, 0], [1.0, 0.0], atol=1e-15)


def test_neighbor_process_table_validation():
    good = np.array([[[0.5, 0.5], [1.0, 0.0]]])
    with pytest.raises(ConfigError, match="sum to 1"):
        NeighborProcess(good, np.array([[[0.6, 0.5], [1.0, 0.0]]]))
    with pytest.raises(ConfigError, match="negative"):
        NeighborProcess(np.array([[[1.5, -0.5], [1.0, 0.0]]]), good)
    with pytest.raises(ConfigError, match=r"\(n_cages, L, L\)"):
        NeighborProcess(np.ones((2, 2)), np.ones((2, 2)))


# --------------------------------------------------------------- assembly

def _tiny_kernel():
    """2 ages, 1 cage, no neighbor levels: 4 states, fully hand-checkable."""
    space = _space(1, 1)
    hazard = FailureHazard.from_table([[0.25], [0.4]])
    nbr = NeighborProcess.trivial(1, 1)
    return space, assemble_kernel(hazard, nbr, space)


def test_assembled_kernel_matches_hand_product():
    space, kernel = _tiny_kernel()
    s = {(a, f): space.encode(a, 0, f, 0, 0) for a in (0, 1) for f in (0, 1)}
    cont = kernel.matrix(CONTINUE).toarray()
    repl = kernel.matrix(REPLACE).toarray()
    expect_cont = np.zeros((4, 4))
    expect_repl = np.zeros((4, 4))
    for (a, f), row in s.items():
        # continue steps the age to min(a + 1, 1); replace resets it to 0;
        # fail' is then drawn at the post-decision age regardless of current f
        expect_cont[row, s[(1, 0)]] = 0.6
        expect_cont[row, s[(1, 1)]] = 0.4
        expect_repl[row, s[(0, 0)]] = 0.75
        expect_repl[row, s[(0, 1)]] = 0.25
    np.testing.assert_array_equal(cont, expect_cont)
    np.testing.assert_array_equal(repl, expect_repl)


def test_continue_at_age_cap_stays_at_cap():
    space, kernel = _tiny_kernel()
    at_cap = space.encode(1, 0, 0, 0, 0)
    row = kernel.matrix(CONTINUE).toarray()[at_cap]
    ages = space.fields()["age"]
    assert np.all(ages[np.flatnonzero(row)] == 1)


def test_continue_row_factors_over_components():
    space = _space(1, 1, NeighborBinning.BINARY)
    hazard = FailureHazard.from_table([[0.1], [0.2]])
    lag_t = np.array([[[0.7, 0.3], [0.4, 0.6]]])
    fail_t = np.array([[[0.9, 0.1], [0.5, 0.5]]])
    kernel = assemble_kernel(hazard, NeighborProcess(lag_t, fail_t), space)
    start = space.encode(0, 0, 1, 1, 0)
    row = kernel.matrix(CONTINUE).toarray()[start]
    for f2 in (0, 1):
        for l2 in (0, 1):
            for m2 in (0, 1):
                col = space.encode(1, 0, f2, l2, m2)
                want = (
                    (0.2 if f2 else 0.8) * lag_t[0, 1, l2] * fail_t[0, 0, m2]
                )
                assert row[col] == pytest.approx(want, abs=1e-15)
    assert row.sum() == pytest.approx(1.0, abs=1e-12)


def test_cage_immutable_and_age_law_on_estimated_kernel(toy_panel, toy_space):
    hazard = estimate_failure_hazard(toy_panel, toy_space)
    nbr = estimate_neighbor_process(toy_panel, toy_space)
    kernel = assemble_kernel(hazard, nbr, toy_space)
    f = toy_space.fields()
    for action in kernel.actions:
        coo = kernel.matrix(action).tocoo()
        live = coo.data > 0
        r, c = coo.row[live], coo.col[live]
        np.testing.assert_array_equal(f["cage"][r], f["cage"][c])
        if action == CONTINUE:
            np.testing.assert_array_equal(
                f["age"][c], np.minimum(f["age"][r] + 1, toy_space.n_ages - 1)
            )
        else:
            assert np.all(f["age"][c] == 0)


def test_assemble_rejects_mismatched_tables_and_actions():
    space = _space(1, 1)
    hazard = FailureHazard.from_table([[0.1], [0.1], [0.1]])
    with pytest.raises(ConfigError, match="hazard table shape"):
        assemble_kernel(hazard, NeighborProcess.trivial(1, 1), space)
    good = FailureHazard.from_table([[0.1], [0.1]])
    with pytest.raises(ConfigError, match="neighbor tables"):
        assemble_kernel(good, NeighborProcess.trivial(1, 2), space)
    with pytest.raises(ConfigError, match="unknown action"):
        assemble_kernel(good, NeighborProcess.trivial(1, 1), space, action=2)


def test_assemble_single_action():
    space = _space(1, 1)
    hazard = FailureHazard.from_table([[0.1], [0.1]])
    kernel = assemble_kernel(hazard, NeighborProcess.trivial(1, 1), space, REPLACE)
    assert kernel.actions == (REPLACE,)


def test_validate_fresh_kernel_ok(toy_panel, toy_space):
    hazard = estimate_failure_hazard(toy_panel, toy_space)
    nbr = estimate_neighbor_process(toy_panel, toy_space)
    report = validate_kernel(assemble_kernel(hazard, nbr, toy_space))
    assert report.ok
    assert report.max_row_deviation <= 1e-12
    assert report.n_negative_entries == 0
    assert report.flagged_rows == []


def test_validate_flags_corrupted_row():
    space, kernel = _tiny_kernel()
    mat = kernel.matrix(CONTINUE).tolil()
    bad_state = 2
    mat[bad_state, 0] += 0.5
    kernel.matrices[CONTINUE] = mat.tocsr()
    report = validate_kernel(kernel)
    assert not report.ok
    assert report.max_row_deviation == pytest.approx(0.5, abs=1e-12)
    assert (CONTINUE, bad_state, pytest.approx(1.5)) in [
        (a, s, pytest.approx(v)) for a, s, v in report.flagged_rows
    ]


def test_validate_counts_negative_entries():
    space, kernel = _tiny_kernel()
    mat = kernel.matrix(REPLACE)
    mat.data[0] *= -1.0
    report = validate_kernel(kernel)
    assert report.n_negative_entries == 1
    assert not report.ok


def test_identity_kernel_valid_but_nothing_reachable():
    space = _space(1, 1)
    eye = sp.identity(space.size, format="csr")
    kernel = ControlledKernel(space, {CONTINUE: eye, REPLACE: eye.copy()})
    report = validate_kernel(kernel)
    assert report.ok
    np.testing.assert_array_equal(report.unreachable_states, np.arange(space.size))


def test_kernel_csv_round_trips(tmp_path):
    space, kernel = _tiny_kernel()
    path = tmp_path / "kernel.csv"
    write_kernel_csv(kernel, str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "state_id,next_state_id,action,prob"
    dense = {a: np.zeros((space.size, space.size)) for a in kernel.actions}
    for line in lines[1:]:
        s, s2, a, p = line.split(",")
        dense[int(a)][int(s), int(s2)] = float(p)
    for a in kernel.actions:
        np.testing.assert_array_equal(dense[a], kernel.matrix(a).toarray())


def test_kernel_triplets_ordering():
    _, kernel = _tiny_kernel()
    rows = list(kernel_triplets(kernel))
    keys = [(a, s, s2) for s, s2, a, _ in rows]
    assert keys == sorted(keys)


# ---------------------------------------------------------------- closure

def test_estimated_hazard_recovers_generator_truth(toy_panel, toy_space):
    # raw cell frequencies against the known data generating hazard: every
    # well-exposed cell inside a four-sigma binomial band
    hz = estimate_failure_hazard(toy_panel, toy_space, alpha=0.0)
    truth = TOY_HAZARD.table(toy_space.n_ages, toy_space.spec.n_cages)
    checked = 0
    for a in range(toy_space.n_ages):
        for c in range(toy_space.spec.n_cages):
            n = hz.exposures[a, c]
            if n < 200:
                continue
            band = 4.0 * np.sqrt(truth[a, c] * (1 - truth[a, c]) / n)
            assert abs(hz.table[a, c] - truth[a, c]) <= band, (a, c)
            checked += 1
    assert checked >= 10


def test_estimated_neighbor_process_has_full_support(toy_panel, toy_space):
    nbr = estimate_neighbor_process(toy_panel, toy_space)
    assert nbr.n_fallback_rows == 0
    assert nbr.lag_table.shape == (2, 2, 2)
    # active panel: some mass on moving up to level 1 from level 0
    assert nbr.lag_table[:, 0, 1].min() > 0
    assert nbr.fail_table[:, 0, 1].min() > 0
