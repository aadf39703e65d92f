"""Parametric Hamiltonian catalog and a sampled assumption checker.

Component ``k`` of every catalog model reads

    H_k(p, r, s, y) = a_k |p|^gamma_k + sum_{i != k} c_ki(y) phi(s_i) + beta_k r_k - V_k(y)

with ``phi(s) = (s)_+^2`` (quadratic coupling), ``phi(s) = exp(s)``
(exponential coupling) or ``phi = 0`` (uncoupled).  Inside the solvers ``s``
is carried as a full ``m``-vector whose ``k``-th entry is ignored.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .environment import EnvironmentRealization
from .errors import SpecificationError

KINDS = ("quadratic-coupling", "exponential-coupling", "uncoupled")

# exp(s) saturates above this argument
S_SATURATION = 700.0


class SaturationWarning(RuntimeWarning):
    """Raised (as a warning) when an exponential coupling term was clipped."""


def _broadcast(values, m: int, name: str) -> tuple[float, ...]:
    if np.isscalar(values):
        return (float(values),) * m
    values = tuple(float(v) for v in values)
    if len(values) == 1:
        return values * m
    if len(values) != m:
        raise SpecificationError(f"{name} needs {m} entries, got {len(values)}", name)
    return values


@dataclass(frozen=True)
class HamiltonianModel:
    kind: str
    gamma: tuple[float, ...]
    a: tuple[float, ...]
    beta: tuple[float, ...]
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecificationError(f"model kind {self.kind!r} not in {KINDS}", "kind")
        m = len(self.gamma)
        if len(self.a) != m or len(self.beta) != m:
            raise SpecificationError("gamma, a and beta must have one entry per component", "gamma")
        for k in range(m):
            if not self.gamma[k] > 1:
                raise SpecificationError(f"gamma[{k}]={self.gamma[k]} must exceed 1", f"gamma[{k}]")
            if not self.a[k] > 0:
                raise SpecificationError(f"a[{k}]={self.a[k]} must be positive", f"a[{k}]")
            if self.beta[k] < 0:
                raise SpecificationError(f"beta[{k}]={self.beta[k]} must be non-negative", f"beta[{k}]")
        if self.lam < 0:
            raise SpecificationError("lam must be non-negative", "lam")

    @classmethod
    def create(cls, kind: str, m: int, gamma=2.0, a=1.0, beta=0.0, lam: float = 0.0) -> "HamiltonianModel":
        return cls(kind, _broadcast(gamma, m, "gamma"), _broadcast(a, m, "a"), _broadcast(beta, m, "beta"), float(lam))

    @classmethod
    def from_dict(cls, d: dict, m: int) -> "HamiltonianModel":
        return cls.create(d.get("kind", "quadratic-coupling"), m, d.get("gamma", 2.0), d.get("a", 1.0),
                          d.get("beta", 0.0), d.get("lam", 0.0))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "gamma": list(self.gamma), "a": list(self.a), "beta": list(self.beta), "lam": self.lam}

    @property
    def m(self) -> int:
        return len(self.gamma)

    @property
    def gamma_min(self) -> float:
        return min(self.gamma)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    # -- vectorized pieces -------------------------------------------------
    def gradient_term(self, k: int, q: np.ndarray) -> np.ndarray:
        """``a_k |q|^gamma_k`` for ``q`` of shape ``(n, ...)``."""
        return self.a[k] * np.sqrt(np.sum(q * q, axis=0)) ** self.gamma[k]

    def gradient_term_dp(self, k: int, q: np.ndarray) -> np.ndarray:
        """Derivative of the gradient term, shape ``(n, ...)``."""
        norm = np.sqrt(np.sum(q * q, axis=0))
        g = self.gamma[k]
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(norm > 0, self.a[k] * g * norm ** (g - 2.0), 0.0)
        return scale * q

    def gradient_term_capped(self, k: int, q: np.ndarray, speed: float) -> tuple[np.ndarray, np.ndarray]:
        """Gradient term continued linearly beyond the radius where its speed reaches ``speed``.

        The continuation is convex, C^1 and has ``|D_p| <= speed`` everywhere,
        so a Lax-Friedrichs scheme with dissipation ``speed`` is monotone for
        every state.  Returns ``(value, derivative)``.
        """
        a, g = self.a[k], self.gamma[k]
        norm = np.sqrt(np.sum(q * q, axis=0))
        q_star = (speed / (a * g)) ** (1.0 / (g - 1.0))
        inside = norm <= q_star
        value = np.where(inside, a * norm**g, a * q_star**g + speed * (norm - q_star))
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(inside, np.where(norm > 0, a * g * norm ** (g - 2.0), 0.0), speed / norm)
        return value, scale * q

    def _phi(self, s: np.ndarray) -> np.ndarray:
        if self.kind == "quadratic-coupling":
            return np.maximum(s, 0.0) ** 2
        if self.kind == "exponential-coupling":
            if np.any(s > S_SATURATION):
                warnings.warn("exponential coupling argument saturated", SaturationWarning, stacklevel=3)
            return np.exp(np.minimum(s, S_SATURATION))
        return np.zeros_like(s)

    def _dphi(self, s: np.ndarray) -> np.ndarray:
        if self.kind == "quadratic-coupling":
            return 2.0 * np.maximum(s, 0.0)
        if self.kind == "exponential-coupling":
            return np.exp(np.minimum(s, S_SATURATION))
        return np.zeros_like(s)

    def coupling_term(self, k: int, s: np.ndarray, c: np.ndarray) -> np.ndarray:
        """``sum_{i != k} c_ki phi(s_i)``; ``s`` and ``c`` have shape ``(m, ...)``."""
        total = np.zeros(s.shape[1:])
        if self.kind == "uncoupled":
            return total
        for i in range(self.m):
            if i != k:
                total = total + c[i] * self._phi(s[i])
        return total

    def coupling_term_ds(self, k: int, s: np.ndarray, c: np.ndarray) -> np.ndarray:
        """Partial derivatives with respect to each ``s_i`` (zero at ``i = k``)."""
        out = np.zeros_like(s, dtype=float)
        if self.kind == "uncoupled":
            return out
        for i in range(self.m):
            if i != k:
                out[i] = c[i] * self._dphi(s[i])
        return out

    def hamiltonian(self, k: int, q, r, s, V, c) -> np.ndarray:
        """Vectorized ``H_k``.

        ``q``: ``(n, ...)``; ``r``: ``(m, ...)`` or ``(m,)``; ``s``: ``(m, ...)``;
        ``V``: potential of component ``k``; ``c``: row ``k`` of the coupling
        weights, shape ``(m, ...)``.
        """
        r_k = np.asarray(r)[k]
        return self.gradient_term(k, q) + self.coupling_term(k, s, c) + self.beta[k] * r_k - V

    def max_gradient_speed(self, P: float) -> float:
        """``sup |D_p H_k|`` over ``|p| <= P`` and all components."""
        P = max(float(P), 0.0)
        return max(self.a[k] * self.gamma[k] * P ** (self.gamma[k] - 1.0) for k in range(self.m))

    def coupling_speed(self, s_max: float, c_max: float) -> float:
        """Bound on ``sum_i c_ki phi'(s_i)`` for ``s_i <= s_max``."""
        if self.kind == "uncoupled" or self.m == 1:
            return 0.0
        return (self.m - 1) * c_max * float(self._dphi(np.array([s_max]))[0])


def _full_s(model: HamiltonianModel, k: int, s) -> np.ndarray:
    s = np.atleast_1d(np.asarray(s, dtype=float))
    if s.shape[0] != model.m - 1:
        raise ValueError(f"s must have m-1={model.m - 1} entries")
    full = np.zeros(model.m)
    full[[i for i in range(model.m) if i != k]] = s
    return full


def evaluate(model: HamiltonianModel, env: EnvironmentRealization, k: int, p, r, s, y) -> float:
    """Point evaluation of ``H_k(p, r, s, y)``; ``s`` lists ``s_i`` for ``i != k``."""
    if model.m != env.m:
        raise SpecificationError(f"model has m={model.m} but environment has m={env.m}", "m")
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if p.shape != (env.n,):
        raise ValueError(f"p must have n={env.n} entries")
    r = np.atleast_1d(np.asarray(r, dtype=float))
    co = env.coefficients(np.atleast_1d(np.asarray(y, dtype=float)).reshape(1, env.n))
    s_full = _full_s(model, k, s)
    H = model.hamiltonian(k, p[:, None], r[:, None], s_full[:, None], co["V"][k], co["c"][k])
    return float(H[0])


# ---------------------------------------------------------------------------
# sampled verification

@dataclass
class Verdict:
    passed: bool
    witness: dict | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        return {"passed": self.passed, "witness": self.witness, "detail": self.detail}


@dataclass
class AssumptionReport:
    verdicts: dict[str, Verdict]
    constants: dict[str, float]
    sample_count: int
    sample_radius: float
    note: str = "constants are the tightest values over the sample; they certify the sampled inequalities only"

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts.values())

    def failures(self) -> list[str]:
        return [name for name, v in self.verdicts.items() if not v.passed]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "verdicts": {k: v.to_dict() for k, v in self.verdicts.items()},
            "constants": self.constants,
            "sample_count": self.sample_count,
            "sample_radius": self.sample_radius,
            "note": self.note,
        }


def _ball(rng, N: int, d: int, R: float) -> np.ndarray:
    if d == 0:
        return np.zeros((N, 0))
    x = rng.standard_normal((N, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x * (R * rng.random((N, 1)) ** (1.0 / d))


def _witness(k, p, r, s, y, lhs, rhs, relation) -> dict:
    return {
        "k": k,
        "p": np.asarray(p).tolist(),
        "r": np.asarray(r).tolist(),
        "s": np.asarray(s).tolist(),
        "y": np.asarray(y).tolist(),
        "lhs": float(lhs),
        "rhs": float(rhs),
        "relation": relation,
    }


def verify_assumptions(model: HamiltonianModel, env: EnvironmentRealization, sample_radius: float = 10.0,
                       sample_count: int = 10_000, seed: int = 0) -> AssumptionReport:
    """Check the structural assumptions on ``sample_count`` random tuples.

    Tuples satisfy ``|p|, |r|, |s| <= sample_radius``; ``y`` is uniform on the
    torus.  Convexity is tested at midpoints, monotonicity on ordered pairs and
    the Lipschitz bound through difference quotients.
    """
    if sample_count < 1 or not sample_radius > 0:
        raise ValueError("need sample_count >= 1 and sample_radius > 0")
    if model.m != env.m:
        raise SpecificationError(f"model has m={model.m} but environment has m={env.m}", "m")
    rng = np.random.default_rng(seed)
    N, R, n, m = sample_count, float(sample_radius), env.n, env.m
    y = rng.random((N, n)) * env.L
    co = env.coefficients(y)

    def sample_tuple():
        p = _ball(rng, N, n, R)
        r = _ball(rng, N, m, R)
        s_red = _ball(rng, N, m - 1, R)
        return p, r, s_red

    def full(k, s_red):
        s = np.zeros((N, m))
        idx = [i for i in range(m) if i != k]
        if idx:
            s[:, idx] = s_red
        return s

    def H(k, p, r, s_red):
        return model.hamiltonian(k, p.T, r.T, full(k, s_red).T, co["V"][k], co["c"][k])

    tol = 1e-12
    verdicts: dict[str, Verdict] = {}
    constants = {"C1": min(model.a), "C2": 0.0, "C3": 0.0, "C4": 0.0, "C5": 0.0}

    def record(name, k, bad, p, r, s_red, lhs, rhs, relation):
        if name in verdicts and not verdicts[name].passed:
            return
        if np.any(bad):
            j = int(np.argmax(bad))
            verdicts[name] = Verdict(False, _witness(k, p[j], r[j], s_red[j], y[j], lhs[j], rhs[j], relation))
        elif name not in verdicts:
            verdicts[name] = Verdict(True)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SaturationWarning)
        c_lower = np.inf
        C3 = 0.0
        C4 = 0.0
        C5 = 0.0
        for k in range(m):
            p1, r1, s1 = sample_tuple()
            p2, r2, s2 = sample_tuple()
            h1 = H(k, p1, r1, s1)
            scale = 1.0 + np.abs(h1)

            # convexity in p and in s at midpoints
            h2 = H(k, p2, r1, s1)
            mid = H(k, 0.5 * (p1 + p2), r1, s1)
            avg = 0.5 * (h1 + h2)
            record("gradconvex", k, mid > avg + tol * scale, p1, r1, s1, mid, avg, "H(midpoint) <= mean")
            h2s = H(k, p1, r1, s2)
            mid = H(k, p1, r1, 0.5 * (s1 + s2))
            avg = 0.5 * (h1 + h2s)
            record("difconvex", k, mid > avg + tol * scale, p1, r1, s1, mid, avg, "H(midpoint) <= mean")

            # monotonicity in r_k, s_i (nondecreasing) and r_i, i != k (nonincreasing)
            bump = R * rng.random(N)
            r_up = r1.copy()
            r_up[:, k] += bump
            hu = H(k, p1, r_up, s1)
            record("hamincrease", k, hu < h1 - tol * scale, p1, r1, s1, hu, h1, "H(r_k raised) >= H")
            for j in range(m - 1):
                s_up = s1.copy()
                s_up[:, j] += bump
                hu = H(k, p1, r1, s_up)
                record("hamincrease", k, hu < h1 - tol * scale, p1, r1, s1, hu, h1, f"H(s raised in slot {j}) >= H")
            for i in range(m):
                if i == k:
                    continue
                r_up = r1.copy()
                r_up[:, i] += bump
                hu = H(k, p1, r_up, s1)
                record("hamdecrease", k, hu > h1 + tol * scale, p1, r1, s1, hu, h1, f"H(r_{i} raised) <= H")
            verdicts.setdefault("hamdecrease", Verdict(True, detail="m = 1"))

            # r <= q with r_k = q_k  ==>  H(r) >= H(q)
            d = np.abs(_ball(rng, N, m, R))
            d[:, k] = 0.0
            hq = H(k, p1, r1 + d, s1)
            record("monotone", k, h1 < hq - tol * scale, p1, r1, s1, h1, hq, "H(r) >= H(q)")

            # r_k - q_k = max_i |r_i - q_i|  ==>  H(r) - H(q) >= 0
            d = _ball(rng, N, m, R)
            d[:, k] = np.max(np.abs(d), axis=1)
            hq = H(k, p1, r1 - d, s1)
            record("colmonstrict", k, h1 - hq < -tol * scale, p1, r1, s1, h1 - hq, 0.0, "H(r) - H(q) >= 0")

            # coercivity: C1 |p|^g + C2 max_i (s_i)_+ - C3 <= H
            row = np.delete(co["c"][k], k, axis=0) if m > 1 else np.zeros((0, N))
            if m > 1:
                c_lower = min(c_lower, float(row.min()) if model.kind != "uncoupled" else 0.0)
            smax = np.max(np.maximum(s1, 0.0), axis=1) if m > 1 else np.zeros(N)
            c2 = 0.0 if m == 1 else max(c_lower, 0.0)
            lhs = constants["C1"] * np.linalg.norm(p1, axis=1) ** model.gamma[k] + c2 * smax
            C3 = max(C3, float(np.max(lhs - h1)))

            C4 = max(C4, float(np.max(np.abs(h1))))

            # local Lipschitz bound through difference quotients
            for eta in (1e-6, 1e-3, 1e-1):
                dp = _ball(rng, N, n, eta * R)
                dr = _ball(rng, N, m, eta * R)
                ds = _ball(rng, N, m - 1, eta * R)
                pp, rr, ss = p1 + dp, r1 + dr, s1 + ds
                inside = (np.linalg.norm(pp, axis=1) <= R) & (np.linalg.norm(rr, axis=1) <= R)
                if m > 1:
                    inside &= np.linalg.norm(ss, axis=1) <= R
                hp = H(k, pp, rr, ss)
                g = model.gamma[k]
                denom = ((1 + np.linalg.norm(p1, axis=1) + np.linalg.norm(pp, axis=1)) ** (g - 1)
                         * np.linalg.norm(dp, axis=1) + np.linalg.norm(dr, axis=1) + np.linalg.norm(ds, axis=1))
                ratio = np.where(inside & (denom > 0), np.abs(hp - h1) / np.where(denom > 0, denom, 1.0), 0.0)
                C5 = max(C5, float(np.max(ratio)))

        # y-dependence enters through V and c; use their Lipschitz constants
        phi_R = float(model._phi(np.array([R]))[0]) if model.kind != "uncoupled" else 0.0
        lip_y = env.field_lipschitz() * (1.0 + (m - 1) * phi_R)
        C5 = max(C5, lip_y)

    if m > 1:
        constants["C2"] = max(c_lower, 0.0)
    constants["C3"] = max(C3, 0.0)
    constants["C4"] = C4
    constants["C5"] = C5

    coercive_ok = constants["C1"] > 0 and (m == 1 or constants["C2"] > 0)
    if coercive_ok:
        verdicts["coercive"] = Verdict(True)
    else:
        k = 0
        s_big = np.full(m - 1, R)
        verdicts["coercive"] = Verdict(
            False,
            {"k": k, "s": s_big.tolist(), "lhs": 0.0, "rhs": float(constants["C2"]),
             "relation": "no positive C2 exists: H does not grow with max_i (s_i)_+"},
        )
    verdicts["bounded"] = Verdict(bool(np.isfinite(C4)), detail=f"C4={C4:.6g}")
    lip_ok = bool(np.isfinite(C5))
    verdicts["hamcon"] = Verdict(lip_ok, None if lip_ok else {"relation": "field not Lipschitz in y", "lhs": float("inf"), "rhs": 0.0},
                                 detail=f"C5={C5:.6g}")
    sig = env.sigma_lipschitz()
    verdicts["lipsigma"] = Verdict(bool(np.isfinite(sig)), detail=f"Lip(sigma)={sig:.6g}")
    eig = np.linalg.eigvalsh(np.moveaxis(co["A"], (1, 2), (-2, -1)))
    psd = float(eig.min()) >= -1e-12
    verdicts["matsquare"] = Verdict(psd, detail=f"min eigenvalue {float(eig.min()):.3g}")
    return AssumptionReport(verdicts, constants, N, R)


def coercivity_constants(model: HamiltonianModel, env: EnvironmentRealization, r_radius: float = 0.0,
                         sample_count: int = 4096) -> tuple[float, float]:
    """Closed-form ``(C1, C3)`` valid for ``|r| <= r_radius`` from the catalog structure."""
    pts = (np.arange(sample_count) + 0.5) / sample_count
    if env.n == 1:
        y = (pts * env.L)[:, None]
    else:
        side = int(np.sqrt(sample_count))
        ax = (np.arange(side) + 0.5) * env.L / side
        y = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2)
    V = env.coefficients(y)["V"]
    C1 = min(model.a)
    c_term = 0.0
    if model.kind == "quadratic-coupling" and model.m > 1:
        c_term = 0.25 * float(np.max(env.coefficients(y)["c"]))
    C3 = float(np.max(V)) + max(model.beta) * r_radius + c_term
    return C1, max(C3, 0.0)
