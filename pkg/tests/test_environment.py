import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hjhomog.environment import (
    EnvironmentSpec,
    cell_uniforms,
    domain_average,
    export_csv,
    realize,
    sample,
    shift,
)
from hjhomog.errors import SpecificationError


def checkerboard_spec(n=1, L=16.0, mode="piecewise-constant", m=1, **kw):
    d = {
        "n": n,
        "m": m,
        "L": L,
        "cell": 1.0,
        "interpolation": mode,
        "potential": {"kind": "random-checkerboard", "mean": 1.0, "amplitude": 1.0},
        "sigma": {"kind": "random-checkerboard", "mean": 0.5, "amplitude": 0.25},
        "coupling": {"kind": "random-checkerboard", "mean": 2.0, "amplitude": 0.5},
    }
    d.update(kw)
    return EnvironmentSpec.from_dict(d)


def test_constant_sample():
    spec = EnvironmentSpec.from_dict({"n": 1, "m": 2, "L": 4.0, "sigma": 0.5, "potential": 1.0, "coupling": 2.0})
    env = realize(spec, seed=123)
    A, V, c = sample(env, 0, [3.7])
    assert A[0, 0] == 0.25
    assert V == 1.0
    assert c[1] == 2.0 and c[0] == 0.0


def test_determinism_bit_identical():
    spec = checkerboard_spec(n=2, L=8.0)
    a = realize(spec, 7).lattice_arrays()
    b = realize(spec, 7).lattice_arrays()
    assert a.keys() == b.keys()
    for key in a:
        assert np.array_equal(a[key], b[key])
    c = realize(spec, 8).lattice_arrays()
    assert not np.array_equal(a["potential[0]"], c["potential[0]"])


def test_same_cell_piecewise_constant():
    env = realize(checkerboard_spec(), 3)
    assert sample(env, 0, 0.3)[1] == sample(env, 0, 0.7)[1]


@pytest.mark.parametrize("mode", ["piecewise-constant", "multilinear"])
def test_periodicity(mode):
    env = realize(checkerboard_spec(n=2, L=8.0, mode=mode), 5)
    rng = np.random.default_rng(0)
    for y in rng.random((20, 2)) * 8:
        A1, V1, c1 = sample(env, 0, y)
        A2, V2, c2 = sample(env, 0, y + 8.0)
        assert np.allclose(A1, A2, rtol=0, atol=1e-12)
        assert V1 == pytest.approx(V2, abs=1e-12)


def test_bernoulli_mean_monte_carlo():
    spec = EnvironmentSpec.from_dict(
        {"n": 1, "L": 256.0, "potential": {"kind": "random-checkerboard", "mean": 1.0, "amplitude": 1.0}}
    )
    env = realize(spec, 11)
    values = env.lattice_arrays()["potential[0]"]
    assert set(np.unique(values)) <= {0.0, 2.0}
    assert abs(values.mean() - 1.0) <= 3.0 / np.sqrt(256)


def test_cell_uniforms_statistics():
    u = cell_uniforms(42, "potential[0]", (100_000,))
    assert 0.0 <= u.min() and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.005
    # different field ids are decorrelated
    v = cell_uniforms(42, "potential[1]", (100_000,))
    assert abs(np.corrcoef(u, v)[0, 1]) < 0.02


def test_shift_identity_and_rotation():
    env = realize(checkerboard_spec(n=2, L=8.0), 9)
    same = shift(env, [0.0, 0.0])
    for key, arr in env.lattice_arrays().items():
        assert np.array_equal(arr, same.lattice_arrays()[key])
    moved = shift(env, [1.0, 0.0])
    arr = env.lattice_arrays()["potential[0]"]
    assert np.array_equal(moved.lattice_arrays()["potential[0]"], np.roll(arr, -1, axis=0))


@pytest.mark.parametrize("mode", ["piecewise-constant", "multilinear"])
def test_shift_equivariance_exhaustive(mode):
    spec = checkerboard_spec(n=2, L=4.0, mode=mode, m=2)
    env = realize(spec, 2)
    axis = np.arange(0, 4, 0.25) + 0.1
    pts = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
    for z in ([1.0, 0.0], [0.0, 3.0], [2.0, 1.0]):
        moved = shift(env, z).coefficients(pts)
        direct = env.coefficients(pts + np.array(z))
        for key in ("A", "V", "c"):
            assert np.allclose(moved[key], direct[key], rtol=0, atol=1e-12)


def test_shift_group_law():
    env = realize(checkerboard_spec(n=1, L=16.0, mode="multilinear"), 4)
    pts = np.linspace(0, 16, 97)[:, None]
    a = shift(shift(env, [3.0]), [5.0]).coefficients(pts)["V"]
    b = shift(env, [8.0]).coefficients(pts)["V"]
    assert np.allclose(a, b, atol=1e-12)


def test_shift_cosine_and_smoothed():
    spec = EnvironmentSpec.from_dict(
        {
            "n": 1,
            "L": 8.0,
            "potential": {"kind": "periodic-cosine", "mean": 1.0, "amplitude": 1.0},
            "sigma": {"kind": "smoothed-bumps", "mean": 0.5, "amplitude": 0.2, "radius": 1.5},
        }
    )
    env = realize(spec, 1)
    pts = np.linspace(0, 8, 41)[:, None]
    moved = shift(env, [2.0]).coefficients(pts)
    direct = env.coefficients(pts + 2.0)
    assert np.allclose(moved["V"], direct["V"], atol=1e-12)
    assert np.allclose(moved["A"], direct["A"], atol=1e-12)


def test_shift_rejects_off_lattice():
    env = realize(checkerboard_spec(), 0)
    with pytest.raises(SpecificationError):
        shift(env, [0.5])


def test_spec_errors_name_field():
    with pytest.raises(SpecificationError) as exc:
        EnvironmentSpec.from_dict(
            {"n": 1, "L": 10.0, "potential": {"kind": "random-checkerboard", "cell": 3.0, "amplitude": 1.0}}
        )
    assert "potential[0].cell" in str(exc.value)
    assert "10" in str(exc.value) and "3" in str(exc.value)
    with pytest.raises(SpecificationError) as exc:
        EnvironmentSpec.from_dict({"n": 1, "L": 4.0, "potential": {"kind": "periodic-cosine", "amplitude": -1.0}})
    assert exc.value.field == "potential[0].amplitude"
    with pytest.raises(SpecificationError):
        EnvironmentSpec.from_dict({"n": 3, "L": 4.0})


def test_c_min_enforced():
    with pytest.raises(SpecificationError) as exc:
        EnvironmentSpec.from_dict(
            {"n": 1, "m": 2, "L": 4.0, "c_min": 1.0, "coupling": {"kind": "random-checkerboard", "mean": 1.0, "amplitude": 0.5}}
        )
    assert "coupling" in exc.value.field


def test_psd_at_random_points():
    spec = EnvironmentSpec.from_dict(
        {
            "n": 2,
            "L": 8.0,
            "sigma": [[[{"kind": "random-checkerboard", "mean": 0.5, "amplitude": 0.3}, 0.2],
                       [{"kind": "smoothed-bumps", "mean": 0.0, "amplitude": 0.3}, 0.7]]],
        }
    )
    env = realize(spec, 3)
    pts = np.random.default_rng(0).random((10_000, 2)) * 8
    A = env.coefficients(pts)["A"][0]
    A = np.moveaxis(A, (0, 1), (-2, -1))
    assert np.allclose(A, np.swapaxes(A, -1, -2))
    assert np.linalg.eigvalsh(A).min() >= -1e-12
    assert np.isfinite(env.sigma_lipschitz())


def test_lipschitz_reporting():
    pc = realize(checkerboard_spec(mode="piecewise-constant"), 0)
    ml = realize(checkerboard_spec(mode="multilinear"), 0)
    assert pc.field_lipschitz() == float("inf")
    lip = ml.field_lipschitz()
    assert np.isfinite(lip)
    # empirical difference quotients never exceed the reported constant
    pts = np.linspace(0, 16, 4001)[:, None]
    V = ml.coefficients(pts)["V"][0]
    assert np.max(np.abs(np.diff(V))) / (pts[1, 0] - pts[0, 0]) <= lip + 1e-9


def test_smoothed_lipschitz_bound():
    spec = EnvironmentSpec.from_dict(
        {"n": 1, "L": 16.0, "potential": {"kind": "smoothed-bumps", "mean": 1.0, "amplitude": 1.0, "radius": 2.0}}
    )
    env = realize(spec, 6)
    pts = np.linspace(0, 16, 16001)[:, None]
    V = env.coefficients(pts)["V"][0]
    q = np.max(np.abs(np.diff(V))) / (pts[1, 0] - pts[0, 0])
    assert q <= env.field_lipschitz()
    assert V.min() >= 0.0 - 1e-12 and V.max() <= 2.0 + 1e-12


def test_ergodic_variance_decay():
    Ls = [8, 16, 32, 64]
    variances = []
    for L in Ls:
        spec = EnvironmentSpec.from_dict(
            {"n": 1, "L": float(L), "potential": {"kind": "random-checkerboard", "mean": 1.0, "amplitude": 1.0}}
        )
        avgs = [domain_average(realize(spec, s)) for s in range(200)]
        variances.append(np.var(avgs))
    slope = np.polyfit(np.log(Ls), np.log(variances), 1)[0]
    assert slope < 0


def test_export_csv(tmp_path):
    env = realize(checkerboard_spec(n=2, L=4.0), 1)
    path = export_csv(env, tmp_path / "env.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "# n=2 L=4.0 cell=1.0 seed=1"
    assert lines[1] == "field,flat_index,value"
    rows = [ln.split(",") for ln in lines[2:] if ln.startswith("potential[0]")]
    assert len(rows) == 16
    assert float(rows[5][2]) == env.lattice_arrays()["potential[0]"].ravel()[5]


def test_roundtrip_dict():
    spec = checkerboard_spec(n=2, L=8.0, m=2)
    assert EnvironmentSpec.from_dict(spec.to_dict()) == spec


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**63 - 1), st.integers(-20, 20), st.floats(0, 16, allow_nan=False))
def test_shift_property(seed, z, y):
    env = realize(checkerboard_spec(mode="multilinear"), seed)
    a = sample(shift(env, [float(z)]), 0, [y])
    b = sample(env, 0, [y + z])
    assert a[1] == pytest.approx(b[1], abs=1e-12)
    assert np.allclose(a[0], b[0], atol=1e-12)
