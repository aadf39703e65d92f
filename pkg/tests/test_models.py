import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hjhomog.environment import EnvironmentSpec, realize
from hjhomog.errors import SpecificationError
from hjhomog.models import HamiltonianModel, SaturationWarning, evaluate, verify_assumptions


def const_env(m=2, n=1, V=1.0, c=1.0, sigma=0.0):
    return realize(EnvironmentSpec.from_dict({"n": n, "m": m, "L": 4.0, "potential": V, "coupling": c, "sigma": sigma}))


def random_env(m=2, n=1, c_min=0.5):
    return realize(
        EnvironmentSpec.from_dict(
            {
                "n": n,
                "m": m,
                "L": 8.0,
                "c_min": c_min,
                "potential": {"kind": "random-checkerboard", "mean": 1.0, "amplitude": 1.0},
                "coupling": {"kind": "random-checkerboard", "mean": 1.0, "amplitude": 0.5},
                "sigma": {"kind": "smoothed-bumps", "mean": 0.5, "amplitude": 0.2},
            }
        ),
        3,
    )


def test_quadratic_arithmetic():
    model = HamiltonianModel.create("quadratic-coupling", 2)
    env = const_env()
    assert evaluate(model, env, 0, [2.0], [0.0, 0.0], [-3.0], [0.4]) == 3.0


def test_exponential_arithmetic():
    model = HamiltonianModel.create("exponential-coupling", 2)
    env = const_env(V=0.0)
    assert evaluate(model, env, 1, [0.0], [0.0, 0.0], [0.0], [1.0]) == 1.0


def test_linear_r_term():
    model = HamiltonianModel.create("quadratic-coupling", 2, beta=1.0)
    env = const_env()
    a = evaluate(model, env, 0, [0.7], [2.0, 0.3], [0.5], [0.1])
    b = evaluate(model, env, 0, [0.7], [0.0, 0.3], [0.5], [0.1])
    assert a - b == pytest.approx(2.0, abs=1e-14)


def test_gamma_exponent():
    model = HamiltonianModel.create("uncoupled", 1, gamma=3.0, a=2.0)
    env = const_env(m=1, V=0.0)
    assert evaluate(model, env, 0, [-2.0], [0.0], [], [0.0]) == pytest.approx(16.0)


def test_invalid_model():
    with pytest.raises(SpecificationError):
        HamiltonianModel.create("quadratic-coupling", 2, gamma=1.0)
    with pytest.raises(SpecificationError):
        HamiltonianModel.create("quadratic-coupling", 2, a=0.0)
    with pytest.raises(SpecificationError):
        HamiltonianModel.create("quadratic-coupling", 2, beta=-1.0)
    with pytest.raises(SpecificationError):
        HamiltonianModel.create("cubic", 2)


def test_saturation_flagged():
    model = HamiltonianModel.create("exponential-coupling", 2)
    env = const_env()
    with pytest.warns(SaturationWarning):
        v = evaluate(model, env, 0, [0.0], [0.0, 0.0], [800.0], [0.0])
    assert np.isfinite(v)


def test_verify_quadratic_constant_sample():
    model = HamiltonianModel.create("quadratic-coupling", 2)
    env = const_env(V=1.0, c=1.0)
    rep = verify_assumptions(model, env, sample_radius=10.0, sample_count=10_000, seed=0)
    assert rep.passed, rep.failures()
    assert rep.constants["C1"] == 1.0
    assert rep.constants["C2"] == 1.0
    # symbolic bound: (s)_+^2 >= (s)_+ - 1/4 together with V <= 1 gives C3 <= 1.25
    assert rep.constants["C3"] <= 1.25
    assert rep.sample_count == 10_000


def test_verify_coercivity_oracle_on_samples():
    # independent check of the reported constants on fresh samples
    model = HamiltonianModel.create("quadratic-coupling", 3, beta=0.5)
    env = random_env(m=3)
    rep = verify_assumptions(model, env, sample_radius=5.0, sample_count=2000, seed=1)
    assert rep.passed, rep.failures()
    C1, C2 = rep.constants["C1"], rep.constants["C2"]
    assert C2 >= 0.5
    rng = np.random.default_rng(9)
    for _ in range(200):
        p = rng.uniform(-2, 2, 1)
        r = np.zeros(3)
        s = rng.uniform(-2, 2, 2)
        y = rng.uniform(0, 8, 1)
        H = evaluate(model, env, 0, p, r, s, y)
        # analytic constant: V <= 2 and c (s)_+^2 >= c (s)_+ - c/4
        assert C1 * abs(p[0]) ** 2 + C2 * max(s.max(), 0) - (2.0 + 2 * 1.5 / 4) <= H + 1e-12


def test_negative_coupling_fails_hamincrease():
    model = HamiltonianModel.create("quadratic-coupling", 2)
    env = const_env(c=1.0)
    # hand-built violation: flip the coupling weight after construction
    from hjhomog.environment import ConstantField
    import dataclasses

    bad = dataclasses.replace(env, coupling=((None, ConstantField(-1.0)), (ConstantField(-1.0), None)))
    rep = verify_assumptions(model, bad, sample_radius=10.0, sample_count=500, seed=0)
    v = rep.verdicts["hamincrease"]
    assert not v.passed
    w = v.witness
    assert w["lhs"] < w["rhs"]
    # the witness reproduces the violation
    k = w["k"]
    s = np.array(w["s"])
    assert evaluate(model, bad, k, w["p"], w["r"], s, w["y"]) == pytest.approx(w["rhs"], rel=1e-9)
    assert not rep.verdicts["coercive"].passed


def test_piecewise_constant_fails_hamcon():
    spec = EnvironmentSpec.from_dict(
        {"n": 1, "L": 8.0, "interpolation": "piecewise-constant",
         "potential": {"kind": "random-checkerboard", "mean": 1.0, "amplitude": 1.0}}
    )
    env = realize(spec, 0)
    model = HamiltonianModel.create("uncoupled", 1)
    rep = verify_assumptions(model, env, sample_count=200)
    assert not rep.verdicts["hamcon"].passed
    assert rep.verdicts["hamcon"].witness is not None


@pytest.mark.parametrize("kind", ["quadratic-coupling", "exponential-coupling", "uncoupled"])
def test_catalog_closure(kind):
    model = HamiltonianModel.create(kind, 2, gamma=[2.0, 1.5], a=[1.0, 0.5], beta=[0.0, 1.0])
    env = random_env(m=2, n=2)
    rep = verify_assumptions(model, env, sample_radius=10.0, sample_count=10_000, seed=2)
    expected_fail = {"coercive"} if kind == "uncoupled" else set()
    assert set(rep.failures()) == expected_fail
    assert rep.to_dict()["constants"]["C4"] > 0


def test_deterministic_report():
    model = HamiltonianModel.create("exponential-coupling", 2)
    env = random_env()
    a = verify_assumptions(model, env, sample_count=300, seed=5).to_dict()
    b = verify_assumptions(model, env, sample_count=300, seed=5).to_dict()
    assert a == b


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-10, 10), min_size=2, max_size=2),
    st.lists(st.floats(-10, 10), min_size=2, max_size=2),
    st.floats(-10, 10),
    st.sampled_from(["quadratic-coupling", "exponential-coupling"]),
)
def test_midpoint_convexity_in_p(p1, p2, s, kind):
    model = HamiltonianModel.create(kind, 2, gamma=1.7)
    env = random_env(n=2)
    args = ([0.0, 0.0], [s], [1.3, 2.2])
    h1 = evaluate(model, env, 0, p1, *args)
    h2 = evaluate(model, env, 0, p2, *args)
    hm = evaluate(model, env, 0, 0.5 * (np.array(p1) + np.array(p2)), *args)
    assert hm <= 0.5 * (h1 + h2) + 1e-12 * (1 + abs(h1) + abs(h2))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(0, 5), min_size=3, max_size=3),
       st.integers(0, 2))
def test_monotone_structure(r, d, k):
    model = HamiltonianModel.create("quadratic-coupling", 3, beta=0.7)
    env = random_env(m=3)
    r = np.array(r)
    d = np.array(d)
    d[k] = 0.0
    q = r + d
    s = [0.3, -0.2]
    assert evaluate(model, env, k, [0.5], r, s, [2.5]) >= evaluate(model, env, k, [0.5], q, s, [2.5]) - 1e-12


@settings(max_examples=40, deadline=None)
@given(st.floats(1.0, 50.0), st.floats(0.0, 0.8))
def test_coercivity_in_s(smax, frac):
    model = HamiltonianModel.create("quadratic-coupling", 3)
    env = random_env(m=3, c_min=0.5)
    s1 = np.array([smax, frac * smax])
    s2 = s1 + np.array([1.0, 0.0])
    h1 = evaluate(model, env, 0, [0.1], [0, 0, 0], s1, [1.1])
    h2 = evaluate(model, env, 0, [0.1], [0, 0, 0], s2, [1.1])
    assert h2 - h1 >= 0.5 * 1.0
