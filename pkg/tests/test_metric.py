import numpy as np
import pytest

from hjhomog.effective import constant_table
from hjhomog.environment import EnvironmentSpec, realize
from hjhomog.errors import SpecificationError, TableRangeError
from hjhomog.metric import (
    MetricProblem,
    estimate_M,
    evaluate_at,
    fit_growth,
    hbar_upper_bound,
    homogeneity_defects,
    metric_consistency,
    solve_metric,
    subadditivity_check,
    support_function,
)
from hjhomog.models import HamiltonianModel
from hjhomog.numerics import Grid

from oracles import eikonal_qplus


def flat_env(L=64.0, V=0.0, m=1, n=1):
    return realize(EnvironmentSpec.from_dict({"n": n, "m": m, "L": L, "potential": V, "coupling": 1.0}))


def eikonal_env(L=128.0):
    return realize(EnvironmentSpec.from_dict({
        "n": 1, "L": L, "potential": {"kind": "periodic-cosine", "mean": -1.0, "amplitude": 1.0, "phase": np.pi},
    }))


def random_pair(L=64.0, seed=0):
    return realize(EnvironmentSpec.from_dict({
        "n": 1, "m": 2, "L": L, "cell": 1.0,
        "potential": {"kind": "random-checkerboard", "mean": 1.0, "amplitude": 0.5},
        "coupling": 1.0,
    }), seed)


@pytest.mark.parametrize("mu", [1.0, 4.0])
def test_flat_medium_is_a_cone(mu):
    model = HamiltonianModel.create("uncoupled", 1)
    f, rep = solve_metric(MetricProblem(flat_env(), model, [0.0], 0.0, mu, R_dom=8, h=0.125))
    ax = f.grid.axes()[0]
    assert rep.converged
    assert np.max(np.abs(f.values[0] - np.sqrt(mu) * np.abs(ax))) < 1e-8


def test_flat_medium_with_slope():
    # |p + q|^2 = mu has roots q = -p +- sqrt(mu): the growth rate differs by direction
    model = HamiltonianModel.create("uncoupled", 1)
    est = estimate_M(flat_env(), model, [0.5], 0.0, 4.0, [[1.0], [-1.0]], [4.0, 8.0], h=0.125)
    assert est.M == pytest.approx([1.5, 2.5], abs=1e-6)


def test_eikonal_against_quadrature():
    model = HamiltonianModel.create("uncoupled", 1)
    est = estimate_M(eikonal_env(), model, [0.0], 0.0, 3.0, [[1.0], [-1.0]], [8, 16, 32], h=1 / 16)
    assert est.M == pytest.approx([eikonal_qplus(3.0)] * 2, rel=1e-2)


def test_level_below_hbar_rejected():
    model = HamiltonianModel.create("uncoupled", 1)
    env = flat_env(V=1.0)
    assert hbar_upper_bound(model, env, [0.0], 0.0) == pytest.approx(-1.0)
    with pytest.raises(SpecificationError) as info:
        MetricProblem(env, model, [0.0], 0.0, -1.0)
    assert info.value.field == "mu"


def test_box_must_fit_torus():
    model = HamiltonianModel.create("uncoupled", 1)
    with pytest.raises(SpecificationError):
        estimate_M(flat_env(L=16.0), model, [0.0], 0.0, 1.0, [[1.0]], [8.0, 16.0])


def test_fit_growth_exact():
    t = np.array([4.0, 8.0, 16.0])
    M, c, res = fit_growth(t, 2.0 + 3.0 / t)
    assert M == pytest.approx(2.0) and c == pytest.approx(3.0) and res < 1e-12


def test_evaluate_at_interpolates_linearly():
    model = HamiltonianModel.create("uncoupled", 1)
    f, _ = solve_metric(MetricProblem(flat_env(), model, [0.0], 0.0, 1.0, R_dom=4, h=0.25))
    assert evaluate_at(f, [[1.1], [-2.3]])[0] == pytest.approx([1.1, 2.3], abs=1e-8)


def test_support_function_of_a_disc():
    table = constant_table(lambda p, r: float(p @ p), [np.linspace(-3, 3, 61)] * 2, [0.0])
    val, ref = support_function(table, [0.0, 0.0], 0.0, 4.0, [0.6, 0.8])
    assert val == pytest.approx(2.0, abs=5e-3)
    with pytest.raises(TableRangeError):
        support_function(table, [0.0, 0.0], 0.0, 16.0, [1.0, 0.0])


def test_consistency_flat_medium():
    model = HamiltonianModel.create("uncoupled", 1)
    table = constant_table(lambda p, r: float(p @ p), [np.linspace(-4, 4, 161)], [0.0])
    est = estimate_M(flat_env(), model, [0.0], 0.0, 4.0, [[1.0], [-1.0]], [4.0, 8.0], h=0.125)
    out = metric_consistency(est, table, [0.0], 0.0, 4.0)
    assert out["passed"], out


def test_subadditivity_random_system():
    env = random_pair()
    model = HamiltonianModel.create("quadratic-coupling", 2)
    grid = Grid.box([0.0], 24.0, 0.25)
    rng = np.random.default_rng(3)
    triples = [tuple([float(v)] for v in rng.integers(-10, 11, 3)) for _ in range(8)]
    out = subadditivity_check(env, model, [0.0], 0.0, 3.0, triples, grid)
    assert out["passed"], out["worst_excess"]
    assert len(out["triples"]) == 8


def test_homogeneity_defects_shape():
    envs = [random_pair(seed=s) for s in range(2)]
    model = HamiltonianModel.create("quadratic-coupling", 2)
    grid = Grid.box([0.0], 18.0, 0.25)
    out = homogeneity_defects(envs, model, [0.0], 0.0, 3.0, [[0.0]], [2.0, 4.0, 8.0], grid)
    assert len(out["mean_defect"]) == 3
    assert out["samples"] == 2 * 1 * 2
    assert all(d >= 0 for d in out["mean_defect"])
