"""STL parsing and robustness."""
import numpy as np
import pytest

from metacog_rl.common.errors import EmptyWindowError, FormulaSyntaxError, IntervalError, UnknownSignalError
from metacog_rl.common.oracles import random_formula, run_robustness_oracle
from metacog_rl.common.stl import (
    Always,
    Pred,
    Predicate,
    PredicateStack,
    brute_force_robustness,
    format_formula,
    parse_formula,
    robustness,
    robustness_matrix,
    robustness_signal,
    robustness_vector,
    smooth_conjunction,
)
from metacog_rl.common.trajectory import Trajectory


def ramp():
    return Trajectory(0.0, 1.0, np.arange(5.0).reshape(-1, 1))


def test_parse_and_format():
    f = parse_formula("G[0,2](x1 > 0.5)")
    assert isinstance(f, Always)
    assert (f.a, f.b) == (0.0, 2.0)
    assert isinstance(f.arg, Pred)
    assert format_formula(f) == "G[0,2](x1 > 0.5)"
    assert parse_formula(format_formula(f)) == f

    g = parse_formula("(x1 > 0 U[0,1.5] !(x2 < 1)) | F[1,3](abs(x1 - r) < 1) & T")
    assert parse_formula(format_formula(g)) == g


def test_parse_errors():
    with pytest.raises(FormulaSyntaxError) as info:
        parse_formula("G[0,1](x1 > )")
    assert info.value.line == 1
    assert info.value.column >= 1
    with pytest.raises(FormulaSyntaxError):
        parse_formula("")
    with pytest.raises(UnknownSignalError):
        parse_formula("x3 > 0", schema=["x1", "x2"])
    with pytest.raises(IntervalError):
        parse_formula("F[2,1](x1 > 0)")


def test_robustness_windows():
    traj = ramp()
    always = parse_formula("G[0,2](x1 > 0.5)")
    assert robustness(always, traj, 0.0) == pytest.approx(-0.5)
    assert robustness(always, traj, 1.0) == pytest.approx(0.5)
    # truncated at the end of the trajectory
    assert robustness(always, traj, 3.0) == pytest.approx(2.5)
    assert robustness(parse_formula("F[0,2](x1 > 0.5)"), traj, 0.0) == pytest.approx(1.5)
    assert robustness(parse_formula("(x1 > 0.5 U[0,2] x1 > 2.5)"), traj, 0.0) == pytest.approx(-0.5)

    late = parse_formula("G[2,3](x1 > 0)")
    assert np.isnan(robustness_signal(late, traj)[3])
    with pytest.raises(EmptyWindowError):
        robustness(late, traj, 3.0)


def test_recursive_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(10):
        f = random_formula(rng, 4)
        traj = Trajectory(0.0, 1.0, rng.normal(size=(20, 2)))
        fast = robustness_signal(f, traj)
        for i in range(0, 20, 4):
            if np.isnan(fast[i]):
                with pytest.raises(EmptyWindowError):
                    brute_force_robustness(f, traj, float(i))
            else:
                assert fast[i] == brute_force_robustness(f, traj, float(i))


def test_robustness_oracle():
    cases = run_robustness_oracle(seed=1, n_cases=20)
    assert len(cases) == 20
    assert all(c.passed for c in cases)


def test_predicate_stack():
    stack = PredicateStack([Predicate.from_expression("1 - abs(x1 - r)")], 1.5, np.array([1.0, 0.0, 0.0, 0.0]))
    assert stack.size == 2
    rho = robustness_vector(stack, np.array([1.5, 0.0, 0.0, 0.0]))
    np.testing.assert_allclose(rho, [0.5, 1.0])

    states = np.array([[1.5, 0.0, 0.0, 0.0], [3.0, 0.2, 0.0, 0.0]])
    refs = np.array([[1.0, 0.0, 0.0, 0.0], [3.0, 0.0, 0.0, 0.0]])
    M = robustness_matrix(stack, states, refs)
    np.testing.assert_allclose(M[0], rho)
    np.testing.assert_allclose(M[1], robustness_vector(stack.with_setpoint(refs[1]), states[1]))


def test_smooth_conjunction():
    rhos = np.array([0.3, 1.0, 2.0])
    s = smooth_conjunction(rhos)
    assert rhos.min() - np.log(3) <= s <= rhos.min()
    assert smooth_conjunction([0.7]) == pytest.approx(0.7)
    batch = smooth_conjunction(np.array([[0.3, 1.0, 2.0], [1.0, 1.0, 1.0]]), axis=1)
    assert batch[0] == pytest.approx(s)
    assert batch[1] == pytest.approx(1.0 - np.log(3))
    with pytest.raises(ValueError):
        smooth_conjunction([])
