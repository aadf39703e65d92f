"""Seeded realizations of stationary random media on a periodized torus.

A realization stands for one sample of the random environment.  Every
coefficient (square-root diffusion, potential, coupling weights) is a field on
the torus ``[0, L)^n``.  Random fields are built from lattice cells whose
values come from a counter-based hash of ``(seed, field id, cell index)``, so
a realization is a pure function of its spec and seed and lattice shifts act
by exact cyclic rotation of the cell arrays.
"""

from __future__ import annotations

import csv
import dataclasses
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import SpecificationError

FIELD_KINDS = ("constant", "periodic-cosine", "random-checkerboard", "smoothed-bumps")
INTERPOLATION_MODES = ("piecewise-constant", "multilinear")
DISTRIBUTIONS = ("bernoulli", "uniform")

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass(frozen=True)
class FieldSpec:
    """Parameters of one scalar coefficient field.

    ``constant``: ``mean``.
    ``periodic-cosine``: ``mean + amplitude * avg_i cos(2 pi y_i / period + phase)``.
    ``random-checkerboard``: ``mean + amplitude * xi`` per lattice cell, with
    ``xi`` either +-1 (bernoulli) or uniform on [-1, 1].
    ``smoothed-bumps``: the checkerboard mollified by a compact kernel of
    radius ``radius``.
    """

    kind: str = "constant"
    mean: float = 0.0
    amplitude: float = 0.0
    cell: float | None = None
    period: float = 1.0
    phase: float = 0.0
    radius: float | None = None
    distribution: str = "bernoulli"

    @classmethod
    def from_value(cls, value: Any) -> "FieldSpec":
        if isinstance(value, FieldSpec):
            return value
        if isinstance(value, (int, float)):
            return cls(kind="constant", mean=float(value))
        if isinstance(value, dict):
            known = {f.name for f in dataclasses.fields(cls)}
            unknown = set(value) - known
            if unknown:
                raise SpecificationError(f"unknown field keys {sorted(unknown)}")
            return cls(**value)
        raise SpecificationError(f"cannot interpret {value!r} as a field spec")

    def bounds(self) -> tuple[float, float]:
        """Range of values the field can take."""
        if self.kind == "constant":
            return self.mean, self.mean
        return self.mean - self.amplitude, self.mean + self.amplitude

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _is_matrix(entry: Any) -> bool:
    """A nested table of field entries (rows of scalars, dicts or FieldSpecs)."""
    return (
        isinstance(entry, (list, tuple))
        and len(entry) > 0
        and all(isinstance(row, (list, tuple)) for row in entry)
        and not any(isinstance(e, (list, tuple)) for row in entry for e in row)
    )


@dataclass(frozen=True)
class EnvironmentSpec:
    """Description of the random medium.

    ``sigma[k]`` is either one FieldSpec (isotropic, ``A_k = sigma^2 I``) or an
    ``n x n`` nested tuple of FieldSpecs giving the matrix square root.
    ``coupling[k][i]`` is the weight of component ``i`` in equation ``k``;
    the diagonal is ignored.
    """

    n: int
    m: int
    L: float
    sigma: tuple
    potential: tuple
    coupling: tuple
    cell: float = 1.0
    interpolation: str = "multilinear"
    seed: int = 0
    c_min: float = 0.0

    def __post_init__(self):
        self.validate()

    # -- construction -----------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict) -> "EnvironmentSpec":
        d = dict(d)
        n = int(d.get("n", 1))
        m = int(d.get("m", 1))

        def per_component(key, default):
            raw = d.get(key, default)
            if isinstance(raw, (list, tuple)) and not _is_matrix(raw) and len(raw) == m and m > 1:
                items = raw
            elif isinstance(raw, (list, tuple)) and len(raw) == 1:
                items = list(raw) * m
            else:
                items = [raw] * m
            out = []
            for item in items:
                if _is_matrix(item):
                    out.append(tuple(tuple(FieldSpec.from_value(e) for e in row) for row in item))
                else:
                    out.append(FieldSpec.from_value(item))
            return tuple(out)

        raw_c = d.get("coupling", 0.0)
        if _is_matrix(raw_c):
            coupling = tuple(tuple(FieldSpec.from_value(e) for e in row) for row in raw_c)
        else:
            c = FieldSpec.from_value(raw_c)
            coupling = tuple(tuple(c for _ in range(m)) for _ in range(m))
        return cls(
            n=n,
            m=m,
            L=float(d["L"]),
            sigma=per_component("sigma", 0.0),
            potential=per_component("potential", 0.0),
            coupling=coupling,
            cell=float(d.get("cell", 1.0)),
            interpolation=d.get("interpolation", "multilinear"),
            seed=int(d.get("seed", 0)),
            c_min=float(d.get("c_min", 0.0)),
        )

    def to_dict(self) -> dict:
        def enc(x):
            if isinstance(x, FieldSpec):
                return x.to_dict()
            return [enc(e) for e in x]

        return {
            "n": self.n,
            "m": self.m,
            "L": self.L,
            "cell": self.cell,
            "interpolation": self.interpolation,
            "seed": self.seed,
            "c_min": self.c_min,
            "sigma": enc(self.sigma),
            "potential": enc(self.potential),
            "coupling": enc(self.coupling),
        }

    def with_(self, **changes) -> "EnvironmentSpec":
        return dataclasses.replace(self, **changes)

    # -- validation -------------------------------------------------------
    def validate(self) -> None:
        if self.n not in (1, 2):
            raise SpecificationError(f"dimension n={self.n} not in {{1, 2}}", "n")
        if not 1 <= self.m <= 4:
            raise SpecificationError(f"component count m={self.m} not in 1..4", "m")
        if not self.L > 0:
            raise SpecificationError(f"torus side L={self.L} must be positive", "L")
        if not self.cell > 0:
            raise SpecificationError(f"cell size {self.cell} must be positive", "cell")
        if self.interpolation not in INTERPOLATION_MODES:
            raise SpecificationError(f"interpolation {self.interpolation!r} not in {INTERPOLATION_MODES}", "interpolation")
        if self.c_min < 0:
            raise SpecificationError(f"c_min={self.c_min} must be non-negative", "c_min")
        _check_divides(self.cell, self.L, "cell")
        for name, group in (("sigma", self.sigma), ("potential", self.potential)):
            if len(group) != self.m:
                raise SpecificationError(f"{name} needs {self.m} entries, got {len(group)}", name)
        if len(self.coupling) != self.m or any(len(row) != self.m for row in self.coupling):
            raise SpecificationError(f"coupling must be an {self.m}x{self.m} table", "coupling")
        for label, fs in self.iter_fields():
            self._check_field(label, fs)
        if self.m > 1:
            for label, fs in self.iter_fields():
                if label.startswith("coupling") and fs.bounds()[0] < self.c_min:
                    raise SpecificationError(
                        f"{label} can reach {fs.bounds()[0]} below c_min={self.c_min}", label
                    )
        for k, entry in enumerate(self.sigma):
            if not isinstance(entry, FieldSpec) and (
                len(entry) != self.n or any(len(row) != self.n for row in entry)
            ):
                raise SpecificationError(f"sigma[{k}] must be a scalar field or {self.n}x{self.n} table", f"sigma[{k}]")

    def _check_field(self, label: str, fs: FieldSpec) -> None:
        if fs.kind not in FIELD_KINDS:
            raise SpecificationError(f"{label}.kind {fs.kind!r} not in {FIELD_KINDS}", f"{label}.kind")
        if fs.amplitude < 0:
            raise SpecificationError(f"{label}.amplitude={fs.amplitude} is negative", f"{label}.amplitude")
        if fs.kind == "periodic-cosine":
            if not fs.period > 0:
                raise SpecificationError(f"{label}.period must be positive", f"{label}.period")
            _check_divides(fs.period, self.L, f"{label}.period")
        if fs.kind in ("random-checkerboard", "smoothed-bumps"):
            cell = fs.cell if fs.cell is not None else self.cell
            if not cell > 0:
                raise SpecificationError(f"{label}.cell must be positive", f"{label}.cell")
            _check_divides(cell, self.L, f"{label}.cell")
            if fs.distribution not in DISTRIBUTIONS:
                raise SpecificationError(f"{label}.distribution {fs.distribution!r} not in {DISTRIBUTIONS}", f"{label}.distribution")
        if fs.kind == "smoothed-bumps":
            cell = fs.cell if fs.cell is not None else self.cell
            radius = fs.radius if fs.radius is not None else cell
            if radius < cell:
                raise SpecificationError(f"{label}.radius={radius} smaller than its cell {cell}", f"{label}.radius")

    def iter_fields(self):
        for k, entry in enumerate(self.sigma):
            if isinstance(entry, FieldSpec):
                yield f"sigma[{k}]", entry
            else:
                for a, row in enumerate(entry):
                    for b, fs in enumerate(row):
                        yield f"sigma[{k}][{a}][{b}]", fs
        for k, fs in enumerate(self.potential):
            yield f"potential[{k}]", fs
        for k, row in enumerate(self.coupling):
            for i, fs in enumerate(row):
                if i != k:
                    yield f"coupling[{k}][{i}]", fs


def _check_divides(step: float, L: float, label: str) -> None:
    ratio = L / step
    if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
        raise SpecificationError(f"{label}={step} does not divide L={L}", label)


# ---------------------------------------------------------------------------
# counter-based hashing

def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
        return z ^ (z >> np.uint64(31))


def cell_uniforms(seed: int, field_id: str, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform [0, 1) draws, one per lattice cell, keyed by (seed, field id, cell)."""
    key = _splitmix64(np.array([(seed & 0xFFFFFFFFFFFFFFFF)], dtype=np.uint64))
    key = _splitmix64(key ^ np.uint64(zlib.crc32(field_id.encode())))
    index = np.arange(int(np.prod(shape)), dtype=np.uint64).reshape(shape)
    bits = _splitmix64(index ^ key)
    return (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53


# ---------------------------------------------------------------------------
# realized fields

@dataclass(frozen=True)
class ConstantField:
    value: float

    def at(self, y: np.ndarray) -> np.ndarray:
        return np.full(y.shape[:-1], self.value, dtype=float)

    def shifted(self, z: np.ndarray) -> "ConstantField":
        return self

    def lipschitz(self) -> float:
        return 0.0


@dataclass(frozen=True)
class CosineField:
    mean: float
    amplitude: float
    period: float
    phase: tuple[float, ...]

    def at(self, y: np.ndarray) -> np.ndarray:
        n = y.shape[-1]
        acc = np.zeros(y.shape[:-1])
        for i in range(n):
            acc += np.cos(2 * np.pi * y[..., i] / self.period + self.phase[i])
        return self.mean + self.amplitude * acc / n

    def shifted(self, z: np.ndarray) -> "CosineField":
        phase = tuple(ph + 2 * np.pi * zi / self.period for ph, zi in zip(self.phase, z))
        return dataclasses.replace(self, phase=phase)

    def lipschitz(self) -> float:
        n = len(self.phase)
        return self.amplitude * 2 * np.pi / self.period / np.sqrt(n)


@dataclass(frozen=True, eq=False)
class LatticeField:
    """Cell values on an ``N^n`` lattice of side ``cell``.

    ``mode`` is ``piecewise-constant``, ``multilinear`` (between cell centers)
    or ``smoothed`` (normalized compact-kernel average of cell values).
    """

    values: np.ndarray
    cell: float
    mode: str
    radius: float = 0.0

    @property
    def N(self) -> int:
        return self.values.shape[0]

    def at(self, y: np.ndarray) -> np.ndarray:
        n = self.values.ndim
        u = np.asarray(y, dtype=float) / self.cell
        if self.mode == "piecewise-constant":
            idx = tuple(np.floor(u[..., i]).astype(np.int64) % self.N for i in range(n))
            return self.values[idx]
        if self.mode == "multilinear":
            u = u - 0.5
            i0 = np.floor(u).astype(np.int64)
            frac = u - i0
            out = np.zeros(u.shape[:-1])
            for corner in np.ndindex(*(2,) * n):
                w = np.ones(u.shape[:-1])
                idx = []
                for i, c in enumerate(corner):
                    w = w * (frac[..., i] if c else 1.0 - frac[..., i])
                    idx.append((i0[..., i] + c) % self.N)
                out += w * self.values[tuple(idx)]
            return out
        return self._smoothed(u)

    def _smoothed(self, u: np.ndarray) -> np.ndarray:
        n = self.values.ndim
        rho = self.radius / self.cell
        reach = int(np.ceil(rho)) + 1
        j0 = np.floor(u).astype(np.int64)
        num = np.zeros(u.shape[:-1])
        den = np.zeros(u.shape[:-1])
        for off in np.ndindex(*(2 * reach + 1,) * n):
            off = np.array(off) - reach
            centers = j0 + off + 0.5
            d2 = np.sum((u - centers) ** 2, axis=-1)
            w = np.clip(1.0 - d2 / rho**2, 0.0, None) ** 2
            idx = tuple((j0[..., i] + off[i]) % self.N for i in range(n))
            num += w * self.values[idx]
            den += w
        return num / den

    def shifted(self, z: np.ndarray) -> "LatticeField":
        steps = [int(round(zi / self.cell)) for zi in z]
        return dataclasses.replace(self, values=np.roll(self.values, [-s for s in steps], axis=tuple(range(len(steps)))))

    def lipschitz(self) -> float:
        n = self.values.ndim
        jumps = max(
            float(np.max(np.abs(np.roll(self.values, -1, axis=i) - self.values))) for i in range(n)
        )
        if self.mode == "piecewise-constant":
            return 0.0 if jumps == 0 else float("inf")
        if self.mode == "multilinear":
            return float(np.sqrt(n) * jumps / self.cell)
        if jumps == 0:
            return 0.0
        # smoothed: difference quotients on a sub-cell sampling of the torus
        sub = 8
        axis = (np.arange(self.N * sub) + 0.5) * self.cell / sub
        mesh = np.stack(np.meshgrid(*([axis] * n), indexing="ij"), axis=-1)
        vals = self.at(mesh)
        step = self.cell / sub
        grad = max(float(np.max(np.abs(np.roll(vals, -1, axis=i) - vals))) for i in range(n)) / step
        return float(1.1 * np.sqrt(n) * grad)


def _realize_field(fs: FieldSpec, spec: EnvironmentSpec, seed: int, field_id: str):
    if fs.kind == "constant":
        return ConstantField(fs.mean)
    if fs.kind == "periodic-cosine":
        return CosineField(fs.mean, fs.amplitude, fs.period, (fs.phase,) * spec.n)
    cell = fs.cell if fs.cell is not None else spec.cell
    N = int(round(spec.L / cell))
    u = cell_uniforms(seed, field_id, (N,) * spec.n)
    if fs.distribution == "bernoulli":
        xi = np.where(u < 0.5, -1.0, 1.0)
    else:
        xi = 2.0 * u - 1.0
    values = fs.mean + fs.amplitude * xi
    if fs.kind == "smoothed-bumps":
        radius = fs.radius if fs.radius is not None else cell
        return LatticeField(values, cell, "smoothed", radius)
    return LatticeField(values, cell, spec.interpolation)


@dataclass(frozen=True, eq=False)
class EnvironmentRealization:
    """One sampled medium.  Immutable; sampling and shifting are pure."""

    spec: EnvironmentSpec
    seed: int
    sigma: tuple
    potential: tuple
    coupling: tuple

    @property
    def n(self) -> int:
        return self.spec.n

    @property
    def m(self) -> int:
        return self.spec.m

    @property
    def L(self) -> float:
        return self.spec.L

    def lattice_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for label, f in self.iter_fields():
            if isinstance(f, LatticeField):
                out[label] = f.values
        return out

    def iter_fields(self):
        for k, entry in enumerate(self.sigma):
            if isinstance(entry, tuple):
                for a, row in enumerate(entry):
                    for b, f in enumerate(row):
                        yield f"sigma[{k}][{a}][{b}]", f
            else:
                yield f"sigma[{k}]", entry
        for k, f in enumerate(self.potential):
            yield f"potential[{k}]", f
        for k, row in enumerate(self.coupling):
            for i, f in enumerate(row):
                if f is not None:
                    yield f"coupling[{k}][{i}]", f

    def sigma_lipschitz(self) -> float:
        return max((f.lipschitz() for label, f in self.iter_fields() if label.startswith("sigma")), default=0.0)

    def field_lipschitz(self) -> float:
        """Largest Lipschitz constant among potential and coupling fields."""
        return max(
            (f.lipschitz() for label, f in self.iter_fields() if not label.startswith("sigma")), default=0.0
        )

    def coefficients(self, points: np.ndarray) -> dict[str, np.ndarray]:
        """Evaluate all fields at ``points`` of shape ``(..., n)``.

        Returns ``A`` with shape ``(m, n, n, ...)``, ``V`` with shape
        ``(m, ...)`` and ``c`` with shape ``(m, m, ...)`` (zero diagonal).
        Points are reduced modulo ``L`` first.
        """
        y = np.mod(np.asarray(points, dtype=float), self.L)
        if y.shape[-1] != self.n:
            raise ValueError(f"points must have trailing dimension {self.n}")
        base = y.shape[:-1]
        n, m = self.n, self.m
        A = np.zeros((m, n, n) + base)
        for k, entry in enumerate(self.sigma):
            if isinstance(entry, tuple):
                S = np.array([[f.at(y) for f in row] for row in entry])
                A[k] = np.einsum("ab...,cb...->ac...", S, S)
            else:
                s = entry.at(y)
                for i in range(n):
                    A[k, i, i] = s * s
        V = np.stack([f.at(y) for f in self.potential])
        c = np.zeros((m, m) + base)
        for k, row in enumerate(self.coupling):
            for i, f in enumerate(row):
                if f is not None:
                    c[k, i] = f.at(y)
        return {"A": A, "V": V, "c": c}


def realize(spec: EnvironmentSpec, seed: int | None = None) -> EnvironmentRealization:
    """Build the realization of ``spec`` for ``seed`` (defaults to ``spec.seed``)."""
    spec.validate()
    seed = spec.seed if seed is None else int(seed)
    sigma = []
    for k, entry in enumerate(spec.sigma):
        if isinstance(entry, FieldSpec):
            sigma.append(_realize_field(entry, spec, seed, f"sigma[{k}]"))
        else:
            sigma.append(
                tuple(
                    tuple(_realize_field(fs, spec, seed, f"sigma[{k}][{a}][{b}]") for b, fs in enumerate(row))
                    for a, row in enumerate(entry)
                )
            )
    potential = tuple(_realize_field(fs, spec, seed, f"potential[{k}]") for k, fs in enumerate(spec.potential))
    coupling = tuple(
        tuple(
            None if i == k else _realize_field(fs, spec, seed, f"coupling[{k}][{i}]")
            for i, fs in enumerate(row)
        )
        for k, row in enumerate(spec.coupling)
    )
    return EnvironmentRealization(spec, seed, tuple(sigma), potential, coupling)


def sample(env: EnvironmentRealization, k: int, y) -> tuple[np.ndarray, float, np.ndarray]:
    """Point evaluation ``(A_k(y), V_k(y), c_k.(y))``; ``c_kk`` is reported as 0."""
    if not 0 <= k < env.m:
        raise IndexError(f"component {k} out of range for m={env.m}")
    y = np.atleast_1d(np.asarray(y, dtype=float)).reshape(1, env.n)
    co = env.coefficients(y)
    return co["A"][k, :, :, 0], float(co["V"][k, 0]), co["c"][k, :, 0]


def shift(env: EnvironmentRealization, z) -> EnvironmentRealization:
    """Translate the medium by the lattice vector ``z``.

    ``sample(shift(env, z), k, y) == sample(env, k, y + z)``.  Only integer
    multiples of every lattice cell size are accepted; off-lattice shifts have
    no exact counterpart on the sampled media.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.shape != (env.n,):
        raise SpecificationError(f"shift vector must have {env.n} entries", "z")
    cells = {env.spec.cell}
    for _, f in env.iter_fields():
        if isinstance(f, LatticeField):
            cells.add(f.cell)
    for cell in cells:
        ratio = z / cell
        if np.any(np.abs(ratio - np.round(ratio)) > 1e-9):
            raise SpecificationError(f"shift {z.tolist()} is not a multiple of lattice cell {cell}", "z")

    def move(f):
        if f is None:
            return None
        if isinstance(f, tuple):
            return tuple(tuple(move(g) for g in row) for row in f)
        return f.shifted(z)

    return dataclasses.replace(
        env,
        sigma=tuple(move(f) for f in env.sigma),
        potential=tuple(move(f) for f in env.potential),
        coupling=tuple(tuple(move(f) for f in row) for row in env.coupling),
    )


def export_csv(env: EnvironmentRealization, path: str | Path) -> Path:
    """Write the realized lattice arrays, flattened row-major."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"# n={env.n} L={env.L} cell={env.spec.cell} seed={env.seed}\n")
        writer = csv.writer(fh)
        writer.writerow(["field", "flat_index", "value"])
        for label, values in env.lattice_arrays().items():
            for i, v in enumerate(values.ravel(order="C")):
                writer.writerow([label, i, repr(float(v))])
    return path


def domain_average(env: EnvironmentRealization, k: int = 0, points_per_cell: int = 4) -> float:
    """Average of the potential of component ``k`` over the torus."""
    N = int(round(env.L / env.spec.cell)) * points_per_cell
    axis = (np.arange(N) + 0.5) * env.L / N
    mesh = np.stack(np.meshgrid(*([axis] * env.n), indexing="ij"), axis=-1)
    return float(np.mean(env.potential[k].at(mesh)))
