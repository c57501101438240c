"""Safe Bayesian optimization over a hyperparameter grid."""
import numpy as np
import pytest

from metacog_rl.common.errors import EmptySafeSetError, UnsafeSeedError
from metacog_rl.common.gaussian_process import BaseGpLibrary, SquaredExponential, gp_predict_batch, gptd_fit
from metacog_rl.common.hyperparams import HyperParams
from metacog_rl.metacognitive.safe_bo import (
    DomainGrid,
    SafeBayesOpt,
    SboConfig,
    SboState,
    best_index,
    confidence_bounds,
    free_indices,
    history_header,
    history_rows,
    sbo_run,
    select_candidate,
    select_index,
    survival_score,
    update_sets,
    with_free_values,
)


P_MIN = -2.5


def score(theta):
    return 1.0 - 10.0 * (theta.q_diag[0] - 1.7) ** 2


def line_config(**kwargs):
    return SboConfig(
        free=("q1",), box_lo=(1.0,), box_hi=(2.0,), resolution=21, p_min=P_MIN, signal_variance=1.0, **kwargs
    )


def seed_at(q):
    return HyperParams([q], [1.0], [0.0])


def test_config():
    cfg = SboConfig()
    assert cfg.threshold(1.0) == pytest.approx(-np.log(2) - 1)
    assert line_config().threshold(1.0) == P_MIN
    for bad in ({"budget": -1}, {"resolution": 1}, {"free": ()}, {"box_lo": (1.0,)}):
        with pytest.raises(ValueError):
            SboConfig(**bad)


def test_free_coordinates():
    theta = HyperParams([1.0, 2.0], [3.0], [0.0, 0.5])
    assert theta.coordinate_names() == ["q1", "q2", "r1", "sp1", "sp2"]
    idx = free_indices(theta, ["r1", "q2"])
    np.testing.assert_array_equal(idx, [2, 1])
    moved = with_free_values(theta, idx, np.array([4.0, 5.0]))
    np.testing.assert_array_equal(moved.to_vector(), [1.0, 5.0, 4.0, 0.0, 0.5])
    with pytest.raises(ValueError):
        free_indices(theta, ["q3"])


def test_domain_grid():
    grid = DomainGrid(("q1", "r1"), (0.0, 10.0), (1.0, 20.0), 3)
    assert len(grid) == 9
    np.testing.assert_array_equal(grid.points[:3], [[0.0, 10.0], [0.0, 15.0], [0.0, 20.0]])
    np.testing.assert_array_equal(grid.widths, [1.0, 10.0])
    assert grid.insert([0.5, 15.0]) == 4
    assert grid.insert([0.25, 15.0]) == 9
    assert len(grid) == 10
    with pytest.raises(ValueError):
        DomainGrid(("q1",), (1.0,), (1.0,), 3)
    with pytest.raises(ValueError):
        DomainGrid(("q1", "r1"), (0.0, 0.0), (1.0, 1.0), 1000, cap=1000)

    around = DomainGrid.around(HyperParams([2.0], [1.0], [0.0]), SboConfig(free=("q1",)))
    np.testing.assert_allclose([around.lo[0], around.hi[0]], [1.0, 20.0])
    with pytest.raises(ValueError):
        DomainGrid.around(HyperParams([2.0], [1.0], [0.0]), SboConfig(free=("sp1",)))


def test_finds_optimum_safely():
    grid = DomainGrid(("q1",), (1.0,), (2.0,), 21)
    starts = np.flatnonzero((grid.points[:, 0] >= 1.2 - 1e-9) & (grid.points[:, 0] <= 2.0 + 1e-9))
    found, safe_runs = 0, 0
    for run in range(20):
        rng = np.random.default_rng(run)
        start = grid.points[rng.choice(starts), 0]
        evaluated = []

        def evaluator(theta):
            evaluated.append(theta.q_diag[0])
            return score(theta)

        best, history = sbo_run(seed_at(start), evaluator, 30, line_config())
        # every selected point was certified safe when it was chosen
        assert all(r.lower >= P_MIN for r in history[1:])
        assert history[0].membership == "safe"
        assert len(history) == len(evaluated) <= 31
        safe_runs += all(score(seed_at(q)) >= P_MIN for q in evaluated)
        found += abs(best.q_diag[0] - 1.7) <= 0.05 + 1e-9
    assert safe_runs >= 19
    assert found >= 19


def test_expands_from_the_safe_boundary():
    opt = SafeBayesOpt(seed_at(1.2), line_config(budget=1))
    opt.run(score)
    q = opt.grid.points[:, 0]
    # at 1.2 the neighbors at +-0.05 are certified after a single evaluation
    assert opt.state.safe_set[np.argmin(np.abs(q - 1.15))]
    assert opt.state.safe_set[np.argmin(np.abs(q - 1.25))]
    assert not opt.state.safe_set[np.argmin(np.abs(q - 1.0))]


def test_unsafe_seed():
    with pytest.raises(UnsafeSeedError):
        sbo_run(seed_at(1.0), score, 5, line_config())


def test_safe_set_can_empty():
    with pytest.raises(EmptySafeSetError):
        sbo_run(seed_at(1.5), lambda theta: P_MIN, 5, line_config())


def test_zero_budget_keeps_seed():
    seed = seed_at(1.5)
    best, history = sbo_run(seed, score, 0, line_config())
    assert best == seed
    assert history == []


def test_history_table():
    _, history = sbo_run(seed_at(1.5), score, 3, line_config())
    assert history_header(("q1",)) == ["k", "q1", "score", "lower", "upper", "set_membership"]
    rows = history_rows(history)
    assert [r[0] for r in rows] == list(range(len(history)))
    assert rows[0][1] == pytest.approx(1.5)
    assert all(r[-1] in ("safe", "maximizer", "expander") for r in rows)


def fitted(offset, seed):
    rng = np.random.default_rng(seed)
    X = np.linspace(0.0, 3.0, 6).reshape(-1, 1)
    return gptd_fit(X, rng.normal(size=5) + offset, SquaredExponential((1.0,), 1.0), 0.1, 0.5, 0.1, prior_mean=offset)


def test_survival_score():
    gp = fitted(0.0, 0)
    bases = BaseGpLibrary((gp,), (0.2,))
    star = HyperParams([2.0], [1.0], [0.0])
    assert survival_score(star, gp, bases, star, 1.0) == pytest.approx(-np.log(2), abs=1e-5)
    moved = HyperParams([4.0], [1.0], [0.0])
    assert survival_score(moved, gp, bases, star, 1.0, scale=np.array([4.0, 1.0, 1.0])) == pytest.approx(
        -(0.5 + np.log(2)), abs=1e-5
    )

    far = BaseGpLibrary((fitted(5.0, 1),), (0.2,))
    sentinel = survival_score(star, gp, far, star, 1e-6, p_min=-3.0)
    assert sentinel < -4.0


def line_state(p_min=P_MIN, beta_k=3.0):
    grid = DomainGrid(("q1",), (1.0,), (2.0,), 5)
    return SboState(grid, p_min, beta_k, SquaredExponential((0.2,), 1.0), np.array([1.5]))


def test_zero_beta_bounds_are_the_mean():
    state = line_state(beta_k=0.0)
    state.add_observation(2, 0.5)
    state.add_observation(4, -1.0)
    lower, upper = confidence_bounds(state)
    mean, _ = gp_predict_batch(state.score_gp, state.grid.points)
    np.testing.assert_allclose(lower, mean)
    np.testing.assert_allclose(upper, mean)


@pytest.mark.parametrize("full_sets", [False, True])
def test_no_expanders_once_everything_is_safe(full_sets):
    state = line_state(p_min=-100.0)
    state.add_observation(2, 0.0)
    update_sets(state, full_sets)
    assert state.safe_set.all()
    assert not state.expanders.any()
    np.testing.assert_array_equal(np.flatnonzero(state.maximizers), [2])
    assert select_index(state) == 2


def test_candidate_falls_back_to_the_best():
    state = line_state(p_min=-100.0)
    state.add_observation(2, 0.0)
    update_sets(state)
    state.maximizers[:] = False
    assert select_index(state) is None
    theta = select_candidate(state, seed_at(1.0), ("q1",))
    assert theta.q_diag[0] == pytest.approx(state.grid.points[best_index(state), 0])
    assert theta.q_diag[0] == pytest.approx(1.5)


def tie_state(center):
    grid = DomainGrid(("q1", "r1"), (0.0, 0.0), (1.0, 100.0), 5)
    state = SboState(grid, P_MIN, 3.0, SquaredExponential((0.2, 20.0), 1.0), np.asarray(center))
    state.lower = np.zeros(len(grid))
    state.upper = np.ones(len(grid))
    return state


def test_selection_ties():
    # (0, 0) is closer in raw units, (1, 25) once scaled by the box widths
    state = tie_state([1.0, 0.0])
    state.maximizers[[0, 21]] = True
    assert select_index(state) == 21

    # (0.25, 50) and (0.75, 50) are equally close
    state = tie_state([0.5, 50.0])
    state.expanders[[7, 17]] = True
    assert select_index(state) == 7
    state.maximizers[24] = True
    state.upper[24] = 2.0
    assert select_index(state) == 24
