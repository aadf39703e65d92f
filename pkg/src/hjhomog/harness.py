"""Declarative experiment configs, canned experiments and artifact persistence.

A config is a YAML (or JSON) document with the top-level keys

    kind         one of KINDS
    environment  environment spec (see ``EnvironmentSpec.from_dict``)
    model        Hamiltonian model (kind, gamma, a, beta, lam)
    numerics     kind-specific numeric parameters
    seeds        list of realization seeds
    output       output directory

``validate_config`` fills every default and returns the normalized config;
``run`` executes it and writes ``manifest.json``, ``summary.json`` and the
per-stage data files.  Data files are a pure function of the normalized
config; only the manifest carries timestamps.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import scipy
import yaml

from . import __version__
from .effective import (
    EffectiveHamiltonianTable,
    build_table,
    check_effective_properties,
    estimate_Hbar,
    multilinear,
    schedule,
)
from .environment import ConstantField, EnvironmentSpec, realize
from .errors import ConfigError, SpecificationError
from .evolution import (
    EvolutionProblem,
    boundary_layer_profile,
    collapse_initial,
    evolve_effective,
    evolve_system,
    step_parameters,
)
from .metric import (
    estimate_M,
    hbar_upper_bound,
    homogeneity_defects,
    metric_consistency,
    subadditivity_check,
)
from .models import HamiltonianModel, verify_assumptions
from .numerics import Grid, VectorGridField

KINDS = ("collapse-demo", "convergence-study", "cell-table", "metric-study", "ergodic-variance", "property-suite")
TOP_KEYS = ("kind", "environment", "model", "numerics", "seeds", "output")

_DEFAULT_MODEL = {"kind": "quadratic-coupling", "gamma": 2.0, "a": 1.0, "beta": 0.0, "lam": 0.0}
_RANDOM_PAIR_ENV = {
    "n": 1, "m": 2, "L": 160.0, "cell": 0.125,
    "potential": [{"kind": "random-checkerboard", "mean": 1.0, "amplitude": 0.3},
                  {"kind": "random-checkerboard", "mean": 1.0, "amplitude": 0.3}],
    "coupling": 1.0,
}
# A weaker, finer medium for the convergence study: the flat part of Hbar, where
# the eps-runs approach ubar slowly, shrinks with the amplitude.
_CONVERGENCE_ENV = {
    **copy.deepcopy(_RANDOM_PAIR_ENV), "cell": 0.03125,
    "potential": [{"kind": "random-checkerboard", "mean": 1.0, "amplitude": 0.1},
                  {"kind": "random-checkerboard", "mean": 1.0, "amplitude": 0.1}],
}

# Defaults per kind.  ``None`` marks a key that must be given.
DEFAULTS: dict[str, dict] = {
    "collapse-demo": {
        "environment": {"n": 1, "m": 2, "L": 1.0, "sigma": 1.0, "potential": 0.0, "coupling": 1.0},
        "model": dict(_DEFAULT_MODEL),
        "numerics": {"eps": [0.2, 0.1, 0.05], "T": 1.0, "h": 0.25, "snapshots": 101, "safety": 0.1,
                     "initial": [1.0, 0.0], "tol": 1e-2},
    },
    "convergence-study": {
        "environment": copy.deepcopy(_CONVERGENCE_ENV),
        "model": {**_DEFAULT_MODEL, "beta": 0.5},
        "numerics": {
            "eps": [0.2, 0.1, 0.05], "T": 1.0, "t0": 0.25, "domain": 1.0, "h_micro": 0.0078125,
            "h_effective": 0.000244140625, "snapshots": 41, "safety": 0.9,
            "initial": [{"mean": 0.0, "sin": 0.4, "cos": 0.0}, {"mean": 0.16, "sin": 0.4, "cos": 0.24}],
            "rel_tol": 0.05,
            "table": {"seeds": [101, 102], "p_grids": [{"min": -3.2, "max": 3.2, "nodes": 65}],
                      "r_grid": [-1.0, 1.0], "deltas": {"delta0": 0.2, "halvings": 3}, "window": 1.0,
                      "alpha": "matched"},
            "layer": {"residual_tol": 0.2},
        },
    },
    "cell-table": {
        "environment": None,
        "model": dict(_DEFAULT_MODEL),
        "numerics": {"p_grids": None, "r_grid": [0.0], "deltas": None, "h": 0.125, "window": 1.0,
                     "alpha": "shared", "method": "newton", "tol": 1e-8, "fail_on_low_confidence": False},
    },
    "metric-study": {
        "environment": None,
        "model": dict(_DEFAULT_MODEL),
        "numerics": {"p": None, "r": 0.0, "mu": None, "directions": None, "t_schedule": [8.0, 16.0, 32.0],
                     "h": 0.125, "buffer": 4.0, "table": None, "consistency_tol": 0.03,
                     "subadditivity": None, "homogeneity": None},
    },
    "ergodic-variance": {
        "environment": {"n": 2, "m": 1, "L": 16.0, "cell": 1.0,
                        "potential": {"kind": "random-checkerboard", "mean": 1.0, "amplitude": 1.0}},
        "model": {**_DEFAULT_MODEL, "kind": "uncoupled"},
        "numerics": {"L_values": [16.0, 32.0, 64.0], "p": [0.5, 0.0], "r": 0.0, "h": 0.5, "window": 1.0,
                     "delta_factors": [4.0, 2.0, 1.0]},
        "seeds": list(range(8)),
    },
    "property-suite": {
        "environment": copy.deepcopy(_RANDOM_PAIR_ENV),
        "model": dict(_DEFAULT_MODEL),
        "numerics": {"assumptions": {"radius": 10.0, "samples": 10000},
                     "contraction": {"pairs": 20, "eps": 0.1, "T": 0.25, "h_micro": 0.125, "snapshots": 5,
                                     "amplitude": 1.0, "tol_per_step": 1e-9},
                     "table": None},
    },
}
REQUIRED = {
    "cell-table": ("environment", "numerics.p_grids", "numerics.deltas"),
    "metric-study": ("environment", "numerics.mu"),
}
SUB_DEFAULTS = {
    ("metric-study", "subadditivity"): {"triples": 50, "radius": 60.0, "box": 80.0},
    ("metric-study", "homogeneity"): {"t": [8.0, 16.0, 32.0], "realizations": 32},
}


# ---------------------------------------------------------------------------
# config parsing and validation

def _line_map(text: str) -> dict[tuple, int]:
    """Map key paths to 1-based source lines (best effort; empty on parse failure)."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    lines: dict[tuple, int] = {}

    def walk(node, path):
        lines.setdefault(path, node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = k.value
                lines[path + (key,)] = k.start_mark.line + 1
                walk(v, path + (key,))
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, path + (i,))

    if root is not None:
        walk(root, ())
    return lines


def _where(lines: dict, path: tuple) -> str:
    p = tuple(path)
    while p and p not in lines:
        p = p[:-1]
    return f"line {lines[p]}: " if p in lines else ""


def load_config_text(path) -> tuple[Any, str]:
    path = Path(path)
    text = path.read_text()
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            data = yaml.safe_load(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"line {exc.lineno}: JSON parse error: {exc.msg}"]) from exc
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}: " if mark is not None else ""
        raise ConfigError([f"{where}YAML parse error: {getattr(exc, 'problem', exc)}"]) from exc
    return data, text


def _deep_merge(base, override):
    if isinstance(base, dict) and isinstance(override, dict):
        out = copy.deepcopy(base)
        for k, v in override.items():
            out[k] = _deep_merge(base.get(k), v) if k in base and base.get(k) is not None else copy.deepcopy(v)
        return out
    return copy.deepcopy(override)


def _axis_nodes(entry) -> list[float]:
    if isinstance(entry, dict):
        lo, hi, nodes = float(entry["min"]), float(entry["max"]), int(entry["nodes"])
        if nodes < 1 or hi < lo:
            raise ValueError("needs min <= max and nodes >= 1")
        return [float(v) for v in np.linspace(lo, hi, nodes)]
    return [float(v) for v in entry]


def _deltas(entry) -> list[float]:
    if isinstance(entry, dict):
        return schedule(float(entry["delta0"]), int(entry["halvings"]))
    out = [float(v) for v in entry]
    if not out:
        raise ValueError("schedule is empty")
    return out


def normalize_config(data: Any, lines: dict | None = None) -> dict:
    """Fill defaults and check a parsed config; raises ``ConfigError`` with every problem found."""
    lines = lines or {}
    errors: list[str] = []

    def err(path, msg):
        errors.append(f"{_where(lines, path)}{'.'.join(str(p) for p in path) or '<root>'}: {msg}")

    if not isinstance(data, dict):
        raise ConfigError([f"{_where(lines, ())}<root>: config must be a mapping"])
    kind = data.get("kind")
    if kind not in KINDS:
        raise ConfigError([f"{_where(lines, ('kind',))}kind: {kind!r} is not a valid kind; valid kinds: {', '.join(KINDS)}"])
    for key in data:
        if key not in TOP_KEYS:
            err((key,), f"unknown key; allowed keys: {', '.join(TOP_KEYS)}")
    defaults = DEFAULTS[kind]
    cfg: dict = {"kind": kind}

    for req in REQUIRED.get(kind, ()):
        parts = req.split(".")
        node = data
        for p in parts:
            node = node.get(p) if isinstance(node, dict) else None
        if node is None:
            err(tuple(parts), f"required for kind {kind}")

    # environment
    env_spec = None
    env_raw = data.get("environment")
    env_base = defaults["environment"]
    if env_raw is not None and not isinstance(env_raw, dict):
        err(("environment",), "must be a mapping")
    elif env_raw is not None or env_base is not None:
        merged = _deep_merge(env_base or {}, env_raw or {})
        try:
            env_spec = EnvironmentSpec.from_dict(merged)
            cfg["environment"] = env_spec.to_dict()
        except SpecificationError as exc:
            field_path = ("environment",) + tuple((exc.field or "").split(".")) if exc.field else ("environment",)
            err(field_path, str(exc))
        except (KeyError, TypeError, ValueError) as exc:
            err(("environment",), f"invalid environment: {exc}")

    # model
    model = None
    model_raw = data.get("model")
    if model_raw is not None and not isinstance(model_raw, dict):
        err(("model",), "must be a mapping")
    else:
        merged = _deep_merge(defaults["model"], model_raw or {})
        for key in merged:
            if key not in _DEFAULT_MODEL:
                err(("model", key), f"unknown key; allowed keys: {', '.join(_DEFAULT_MODEL)}")
        if env_spec is not None:
            try:
                model = HamiltonianModel.from_dict(merged, env_spec.m)
                cfg["model"] = model.to_dict()
            except SpecificationError as exc:
                err(("model", exc.field or ""), str(exc))
            except (TypeError, ValueError) as exc:
                err(("model",), f"invalid model: {exc}")

    # seeds and output
    seeds = data.get("seeds", defaults.get("seeds", [0]))
    if isinstance(seeds, int):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        err(("seeds",), "must be a non-empty list of non-negative integers")
        seeds = [0]
    cfg["seeds"] = list(seeds)
    cfg["output"] = str(data.get("output", f"runs/{kind}"))

    # numerics
    num_raw = data.get("numerics") or {}
    if not isinstance(num_raw, dict):
        err(("numerics",), "must be a mapping")
        num_raw = {}
    base = defaults["numerics"]
    for key in num_raw:
        if key not in base:
            err(("numerics", key), f"unknown key for kind {kind}; allowed keys: {', '.join(base)}")
    num = _deep_merge({k: v for k, v in base.items() if v is not None}, {k: v for k, v in num_raw.items() if k in base})
    for key, val in base.items():
        num.setdefault(key, val)
    for (k_kind, key), sub in SUB_DEFAULTS.items():
        if k_kind == kind and isinstance(num.get(key), dict):
            num[key] = _deep_merge(sub, num[key])
        elif k_kind == kind and num.get(key) is True:
            num[key] = copy.deepcopy(sub)
    checker = _NUMERIC_CHECKS.get(kind)
    if checker is not None and not any(e for e in errors if "required" in e):
        checker(num, env_spec, model, cfg, lambda path, msg: err(("numerics",) + tuple(path), msg))
    cfg["numerics"] = num
    if errors:
        raise ConfigError(errors)
    return cfg


def validate_config(path) -> dict:
    """Parse, check and normalize the config at ``path``; ``ConfigError`` lists every problem."""
    data, text = load_config_text(path)
    return normalize_config(data, _line_map(text))


def _positive(num, key, err, integer=False):
    v = num.get(key)
    ok = isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0
    if integer:
        ok = ok and float(v) == int(v)
    if not ok:
        err((key,), f"must be a positive {'integer' if integer else 'number'}, got {v!r}")
        return False
    return True


def _eps_list(num, err):
    eps = num.get("eps")
    if not isinstance(eps, list) or not eps:
        err(("eps",), "schedule must be a non-empty list")
        return []
    if not all(isinstance(e, (int, float)) and e > 0 for e in eps):
        err(("eps",), "entries must be positive")
        return []
    if any(b >= a for a, b in zip(eps, eps[1:])):
        err(("eps",), "schedule must be strictly decreasing")
    return [float(e) for e in eps]


def _check_collapse(num, env_spec, model, cfg, err):
    _eps_list(num, err)
    for key in ("T", "h", "tol"):
        _positive(num, key, err)
    _positive(num, "snapshots", err, integer=True)
    if not (isinstance(num.get("safety"), (int, float)) and 0 < num["safety"] <= 1):
        err(("safety",), "must lie in (0, 1]")
    if env_spec is None or model is None:
        return
    init = num.get("initial")
    if not isinstance(init, list) or len(init) != env_spec.m or not all(isinstance(v, (int, float)) for v in init):
        err(("initial",), f"needs {env_spec.m} constant initial values")
    env = realize(env_spec)
    if env_spec.m != 2 or model.kind != "quadratic-coupling" or any(b != 0 for b in model.beta):
        err(("initial",), "the closed form needs m = 2, quadratic coupling and beta = 0")
    if not all(isinstance(f, ConstantField) for _, f in env.iter_fields()):
        err(("initial",), "the closed form needs spatially constant fields")
    else:
        V = env.coefficients(np.zeros((1, env.n)))["V"][:, 0]
        if V[0] != V[1]:
            err(("initial",), "the closed form needs equal potentials")


def _check_convergence(num, env_spec, model, cfg, err):
    eps = _eps_list(num, err)
    for key in ("T", "t0", "domain", "h_micro", "h_effective", "rel_tol"):
        _positive(num, key, err)
    _positive(num, "snapshots", err, integer=True)
    if isinstance(num.get("t0"), (int, float)) and isinstance(num.get("T"), (int, float)) and num["t0"] >= num["T"]:
        err(("t0",), f"window start t0={num['t0']} must be below T={num['T']}")
    if env_spec is not None:
        init = num.get("initial")
        if not isinstance(init, list) or len(init) != env_spec.m:
            err(("initial",), f"needs {env_spec.m} entries of the form {{mean, sin, cos}}")
        else:
            for k, item in enumerate(init):
                if not isinstance(item, dict) or any(key not in ("mean", "sin", "cos") for key in item):
                    err(("initial", k), "allowed keys: mean, sin, cos")
        domain = num.get("domain", 1.0)
        for e in eps:
            try:
                env_spec.with_(L=domain / e).validate()
            except SpecificationError as exc:
                err(("eps",), f"eps={e} gives fast period L={domain / e}: {exc}")
    tab = num.get("table")
    if not isinstance(tab, dict):
        err(("table",), "must be a mapping")
        return
    _check_table_section(tab, env_spec, lambda path, msg: err(("table",) + tuple(path), msg))
    alpha = tab.get("alpha")
    if not (alpha in (None, "matched", "common", "shared") or isinstance(alpha, (int, float))):
        err(("table", "alpha"), "must be 'matched', 'shared', 'common', null or a number")


def _check_table_section(tab, env_spec, err):
    try:
        tab["p_grids"] = [_axis_nodes(g) for g in tab["p_grids"]]
    except (KeyError, TypeError, ValueError) as exc:
        err(("p_grids",), f"each axis is a node list or {{min, max, nodes}}: {exc}")
    else:
        if env_spec is not None and len(tab["p_grids"]) != env_spec.n:
            err(("p_grids",), f"needs {env_spec.n} axes, got {len(tab['p_grids'])}")
        if any(len(g) < 3 for g in tab["p_grids"]):
            err(("p_grids",), "every axis needs at least 3 nodes for the property checks")
    try:
        tab["deltas"] = _deltas(tab["deltas"])
        if any(b >= a for a, b in zip(tab["deltas"], tab["deltas"][1:])):
            err(("deltas",), "discount schedule must be strictly decreasing")
    except (KeyError, TypeError, ValueError) as exc:
        err(("deltas",), f"discount schedule is a list or {{delta0, halvings}}: {exc}")
    try:
        tab["r_grid"] = [float(v) for v in tab.get("r_grid", [0.0])]
    except (TypeError, ValueError):
        err(("r_grid",), "must be a list of numbers")
    if "window" in tab and env_spec is not None and isinstance(tab.get("deltas"), list) and tab["deltas"]:
        L = float(tab.get("L", env_spec.L))
        need = 4 * float(tab["window"]) / tab["deltas"][-1]
        if L < need - 1e-9:
            err(("deltas",), f"smallest discount {tab['deltas'][-1]} needs torus side L >= {need}, environment has L={L}")


def _check_cell_table(num, env_spec, model, cfg, err):
    _check_table_section(num, env_spec, err)
    _positive(num, "h", err)
    if num.get("method") not in ("newton", "relaxation"):
        err(("method",), "must be 'newton' or 'relaxation'")
    alpha = num.get("alpha")
    if not (alpha in (None, "common", "shared") or isinstance(alpha, (int, float))):
        err(("alpha",), "must be 'shared', 'common', null or a number")


def _check_metric(num, env_spec, model, cfg, err):
    if env_spec is None:
        return
    n = env_spec.n
    p = num.get("p")
    if p is None:
        p = [0.0] * n
    if not isinstance(p, list) or len(p) != n:
        err(("p",), f"needs {n} entries")
    num["p"] = [float(v) for v in p] if isinstance(p, list) else p
    mu = num.get("mu")
    if isinstance(mu, (int, float)):
        mu = [mu]
    if not isinstance(mu, list) or not mu:
        err(("mu",), "must be a number or a non-empty list")
    else:
        num["mu"] = [float(v) for v in mu]
    if num.get("directions") is None:
        num["directions"] = np.vstack([np.eye(n), -np.eye(n)]).tolist()
    ts = num.get("t_schedule")
    if not isinstance(ts, list) or not ts or not all(isinstance(t, (int, float)) and t > 0 for t in ts):
        err(("t_schedule",), "must be a non-empty list of positive times")
    else:
        R = max(ts) + float(num.get("buffer", 4.0))
        if 2 * R > env_spec.L + 1e-9:
            err(("t_schedule",), f"box radius {R} needs L >= {2 * R}, environment has L={env_spec.L}")
    _positive(num, "h", err)
    tab = num.get("table")
    if isinstance(tab, dict):
        tab.setdefault("r_grid", [float(num.get("r", 0.0))])
        tab.setdefault("window", 1.0)
        tab.setdefault("h", num["h"])
        tab.setdefault("seeds", cfg["seeds"])
        _check_table_section(tab, env_spec, lambda path, msg: err(("table",) + tuple(path), msg))
    elif tab is not None and not isinstance(tab, str):
        err(("table",), "must be a table file path, an inline table build or null")
    sub = num.get("subadditivity")
    if isinstance(sub, dict) and n != 1:
        err(("subadditivity",), "lattice triples are drawn on a line; use a 1-D environment")


def _check_ergodic(num, env_spec, model, cfg, err):
    Ls = num.get("L_values")
    if not isinstance(Ls, list) or len(Ls) < 2:
        err(("L_values",), "needs at least two torus sizes")
    elif env_spec is not None:
        for L in Ls:
            try:
                env_spec.with_(L=float(L)).validate()
            except SpecificationError as exc:
                err(("L_values",), f"L={L}: {exc}")
    if len(cfg["seeds"]) < 2:
        err(("L_values",), "the sample spread needs at least two seeds")
    if env_spec is not None and (not isinstance(num.get("p"), list) or len(num["p"]) != env_spec.n):
        err(("p",), f"needs {env_spec.n} entries")
    _positive(num, "h", err)
    _positive(num, "window", err)
    f = num.get("delta_factors")
    if not isinstance(f, list) or not f or any(b >= a for a, b in zip(f, f[1:])) or min(f) < 1:
        err(("delta_factors",), "must be a strictly decreasing list with entries >= 1")


def _check_property(num, env_spec, model, cfg, err):
    con = num.get("contraction")
    if isinstance(con, dict):
        base = DEFAULTS["property-suite"]["numerics"]["contraction"]
        num["contraction"] = con = _deep_merge(base, con)
        _positive(con, "pairs", lambda path, msg: err(("contraction",) + tuple(path), msg), integer=True)
        if env_spec is not None:
            try:
                Grid.torus(con["eps"] * env_spec.L, con["eps"] * con["h_micro"])
            except ValueError as exc:
                err(("contraction", "h_micro"), str(exc))
    tab = num.get("table")
    if tab is not None and not isinstance(tab, str):
        err(("table",), "must be a table file path or null")


_NUMERIC_CHECKS: dict[str, Callable] = {
    "collapse-demo": _check_collapse,
    "convergence-study": _check_convergence,
    "cell-table": _check_cell_table,
    "metric-study": _check_metric,
    "ergodic-variance": _check_ergodic,
    "property-suite": _check_property,
}


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def apply_seed_override(cfg: dict, K: int) -> dict:
    """Replace the run seeds by ``K, K+1, ...``; inline table seeds follow after them."""
    cfg = copy.deepcopy(cfg)
    count = len(cfg["seeds"])
    cfg["seeds"] = list(range(K, K + count))
    tab = cfg.get("numerics", {}).get("table")
    if isinstance(tab, dict) and "seeds" in tab:
        tab["seeds"] = list(range(K + count, K + count + len(tab["seeds"])))
    return cfg


# ---------------------------------------------------------------------------
# artifacts

@dataclass
class Verdict:
    name: str
    passed: bool
    value: Any
    threshold: Any
    data: str
    asserted: bool = True
    detail: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "asserted": self.asserted, "value": _plain(self.value),
                "threshold": _plain(self.threshold), "data": self.data, "detail": self.detail}


@dataclass
class ExperimentArtifact:
    directory: Path
    manifest: dict
    summary: dict
    files: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.summary["passed"])


class ExperimentError(RuntimeError):
    """A sub-solver failed; ``stage`` names the experiment stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    return x


class _Context:
    def __init__(self, out: Path, workers: int):
        self.out = out
        self.workers = max(int(workers), 1)
        self.files: list[str] = []
        self.verdicts: list[Verdict] = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def write_csv(self, name: str, header: list, rows) -> str:
        with self.path(name).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        return name

    def write_json(self, name: str, obj) -> str:
        self.path(name).write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")
        return name

    def verdict(self, *args, **kwargs):
        self.verdicts.append(Verdict(*args, **kwargs))

    def map(self, func, items):
        items = list(items)
        if self.workers > 1 and len(items) > 1:
            with ProcessPoolExecutor(max_workers=min(self.workers, len(items))) as pool:
                return list(pool.map(func, items))
        return [func(it) for it in items]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    return v


class _stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, ExperimentError) and isinstance(exc, Exception):
            raise ExperimentError(self.name, exc) from exc
        return False


def run(config, out: str | Path | None = None, workers: int = 1, seed_override: int | None = None) -> ExperimentArtifact:
    """Execute a config (path, parsed dict or normalized dict) and persist its artifact."""
    if isinstance(config, (str, Path)):
        cfg = validate_config(config)
    else:
        cfg = normalize_config(config)
    if seed_override is not None:
        cfg = apply_seed_override(cfg, int(seed_override))
    out = Path(out if out is not None else cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    ctx = _Context(out, workers)
    env_spec = EnvironmentSpec.from_dict(cfg["environment"])
    model = HamiltonianModel.from_dict(cfg["model"], env_spec.m)
    with _stage("assumptions"):
        report = verify_assumptions(model, realize(env_spec, cfg["seeds"][0]))
        ctx.write_json("assumptions.json", report.to_dict())
        if not report.passed:
            raise SpecificationError(f"model fails the structural assumptions: {', '.join(report.failures())}", "model")
    _RUNNERS[cfg["kind"]](cfg, env_spec, model, ctx)
    verdicts = [v.to_dict() for v in ctx.verdicts]
    asserted = [v for v in ctx.verdicts if v.asserted]
    summary = {"kind": cfg["kind"], "passed": all(v.passed for v in asserted), "verdicts": verdicts}
    ctx.write_json("summary.json", summary)
    files = {name: hashlib.sha256((out / name).read_bytes()).hexdigest() for name in sorted(set(ctx.files))}
    manifest = {
        "kind": cfg["kind"],
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed_override": seed_override,
        "workers": ctx.workers,
        "versions": {"hjhomog": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "pyyaml": yaml.__version__, "python": platform.python_version()},
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(_plain(manifest), indent=2, sort_keys=True) + "\n")
    return ExperimentArtifact(out, manifest, summary, sorted(files))


# ---------------------------------------------------------------------------
# collapse demo

def _collapse_demo(cfg, env_spec, model, ctx):
    num = cfg["numerics"]
    env = realize(env_spec, cfg["seeds"][0])
    hi_val, lo_val = num["initial"]
    hi, lo = (0, 1) if hi_val >= lo_val else (1, 0)
    gap0 = abs(hi_val - lo_val)
    co = env.coefficients(np.zeros((1, env.n)))
    V0 = float(co["V"][0, 0])
    c = float(co["c"][hi, lo, 0])
    rows = []
    for eps in num["eps"]:
        with _stage(f"evolve eps={eps}"):
            # spatially constant data: any periodic grid carries the exact solution
            grid = Grid.torus(1.0, num["h"], env.n)
            u0 = np.stack([np.full(grid.shape, float(v)) for v in num["initial"]])
            snaps = np.linspace(0.0, num["T"], int(num["snapshots"]))
            res = evolve_system(EvolutionProblem(env, model, eps, VectorGridField(u0, grid), num["T"], snaps,
                                                 safety=num["safety"]))
        t = np.asarray(res.times)
        vals = res.values()
        base = min(hi_val, lo_val) + V0 * t
        closed_hi = base + gap0 / (1.0 + c * gap0 * t / eps**2)
        err_hi = np.max(np.abs(vals[:, hi].reshape(len(t), -1) - closed_hi[:, None]), axis=1)
        err_lo = np.max(np.abs(vals[:, lo].reshape(len(t), -1) - base[:, None]), axis=1)
        name = ctx.write_csv(f"collapse_eps{eps:g}.csv", ["t", "u_high", "u_low", "closed_high", "closed_low", "error_high",
                                                         "error_low"],
                             zip(t, vals[:, hi].reshape(len(t), -1)[:, 0], vals[:, lo].reshape(len(t), -1)[:, 0],
                                 closed_hi, base, err_hi, err_lo))
        rows.append((eps, float(err_hi.max()), float(err_lo.max()), res.report.steps, res.report.dt))
        ctx.verdict(f"collapse_error_eps{eps:g}", err_hi.max() <= num["tol"], float(err_hi.max()), num["tol"], name,
                    detail="sup over t of |u_high - closed form|")
        ctx.verdict(f"low_component_exact_eps{eps:g}", err_lo.max() <= 1e-12, float(err_lo.max()), 1e-12, name,
                    detail="lower component follows its closed form to machine precision")
    ctx.write_csv("collapse_summary.csv", ["eps", "max_error_high", "max_error_low", "steps", "dt"], rows)


# ---------------------------------------------------------------------------
# convergence study

def _initial_values(initial, grid: Grid, domain: float) -> np.ndarray:
    pts = grid.points()
    out = []
    for item in initial:
        u = np.full(grid.shape, float(item.get("mean", 0.0)))
        for i in range(grid.n):
            arg = 2 * np.pi * pts[..., i] / domain
            u = u + float(item.get("sin", 0.0)) * np.sin(arg) + float(item.get("cos", 0.0)) * np.cos(arg)
        out.append(u)
    return np.stack(out)


def _periodic_resample(values: np.ndarray, grid: Grid, target: Grid) -> np.ndarray:
    """Multilinear resampling of a periodic field onto another grid of the same torus."""
    padded = np.pad(values, [(0, 1)] * grid.n, mode="wrap")
    axes = [np.append(ax, ax[-1] + grid.h) for ax in grid.axes()]
    pts = target.points()
    return multilinear(axes, padded, [np.mod(pts[..., i], grid.extent(i)) for i in range(grid.n)])


def _epsilon_task(args):
    spec_dict, seed, model_dict, eps, h, initial, domain, T, snaps, safety = args
    spec = EnvironmentSpec.from_dict(spec_dict)
    env = realize(spec, seed)
    model = HamiltonianModel.from_dict(model_dict, env.m)
    grid = Grid.torus(domain, h, env.n)
    u0 = VectorGridField(_initial_values(initial, grid, domain), grid)
    res = evolve_system(EvolutionProblem(env, model, eps, u0, T, snaps, safety=safety))
    return res


def _convergence_study(cfg, env_spec, model, ctx):
    num = cfg["numerics"]
    tab_cfg = num["table"]
    seed = cfg["seeds"][0]
    domain = float(num["domain"])
    snaps = np.linspace(0.0, num["T"], int(num["snapshots"]))
    eps_list = [float(e) for e in num["eps"]]
    specs = {e: env_spec.with_(L=domain / e) for e in eps_list}

    # dissipation matched to the epsilon runs keeps both schemes on the same discrete medium
    alphas = []
    for e in eps_list:
        grid = Grid.torus(domain, e * num["h_micro"], env_spec.n)
        u0 = VectorGridField(_initial_values(num["initial"], grid, domain), grid)
        pb = EvolutionProblem(realize(specs[e], seed), model, e, u0, num["T"], snaps, safety=num["safety"])
        alphas.append(step_parameters(pb)[0])
    alpha_run = max(alphas)
    alpha = tab_cfg.get("alpha", "matched")
    if alpha == "matched":
        alpha = alpha_run

    with _stage("table"):
        t_spec = env_spec.with_(L=float(tab_cfg.get("L", env_spec.L)))
        envs = [realize(t_spec, s) for s in tab_cfg["seeds"]]
        table = build_table(envs, model, tab_cfg["p_grids"], tab_cfg["r_grid"], tab_cfg["deltas"],
                            window=tab_cfg.get("window", 1.0), h=tab_cfg.get("h") or num["h_micro"], alpha=alpha,
                            workers=ctx.workers)
        table.save(ctx.path("table.json"))
        table.export_csv(ctx.path("table.csv"))
    with _stage("table properties"):
        props = check_effective_properties(table, model, verify_assumptions(model, envs[0]).constants)
        pname = ctx.write_json("table_properties.json", props.to_dict())
        for key, chk in props.checks.items():
            ctx.verdict(f"table_{key}", chk.passed, chk.worst, None, pname, detail=chk.detail)

    with _stage("epsilon runs"):
        tasks = [(specs[e].to_dict(), seed, model.to_dict(), e, e * num["h_micro"], num["initial"], domain, num["T"],
                  snaps, num["safety"]) for e in eps_list]
        results = ctx.map(_epsilon_task, tasks)
    with _stage("effective run"):
        g_eff = Grid.torus(domain, num["h_effective"], env_spec.n)
        ubar0 = collapse_initial(_initial_values(num["initial"], g_eff, domain))
        eff = evolve_effective(table, ubar0, num["T"], g_eff, snaps)
    ub_eff = eff.values()[:, 0]

    rows, hist_rows, prof_rows = [], [], []
    window = snaps >= num["t0"] - 1e-12
    errors = []
    for e, res in zip(eps_list, results):
        grid = res.snapshots[0].grid
        ub = np.stack([_periodic_resample(v, g_eff, grid) for v in ub_eff])
        U = res.values()
        diff = np.abs(U - ub[:, None])
        e_t = diff.reshape(len(snaps), -1).max(axis=1)
        err = float(e_t[window].max())
        osc = float(ub[window].max() - ub[window].min())
        errors.append(err)
        rows.append((e, err, osc, err / osc, res.report.steps, res.report.dt, res.report.bounds.alpha[0]))
        hist_rows += [(e, t, v) for t, v in zip(snaps, e_t)]
        if e == eps_list[-1]:
            x = grid.points().reshape(-1, grid.n)
            last = U[-1].reshape(U.shape[1], -1)
            prof_rows = [tuple(x[j]) + tuple(last[:, j]) + (ub[-1].ravel()[j],) for j in range(x.shape[0])]
    ename = ctx.write_csv("errors.csv", ["eps", "error", "osc_ubar", "relative_error", "steps", "dt", "alpha"], rows)
    ctx.write_csv("error_history.csv", ["eps", "t", "error"], hist_rows)
    ctx.write_csv(f"profile_eps{eps_list[-1]:g}.csv",
                  [f"x{i}" for i in range(env_spec.n)] + [f"u{k}" for k in range(env_spec.m)] + ["ubar"], prof_rows)
    decreasing = all(b < a for a, b in zip(errors, errors[1:]))
    ctx.verdict("error_decreasing", decreasing, errors, "strictly decreasing along eps", ename)
    rel = rows[-1][3]
    ctx.verdict("error_small", rel <= num["rel_tol"], rel, num["rel_tol"], ename,
                detail=f"e(eps={eps_list[-1]:g}) / osc(ubar) on t in [{num['t0']}, {num['T']}]")

    with _stage("boundary layer"):
        res = results[-1]
        grid = res.snapshots[0].grid
        prof = boundary_layer_profile(res, collapse_initial(_initial_values(num["initial"], grid, domain)))
    lname = ctx.write_csv("boundary_layer.csv", ["t", "M", "envelope"],
                          zip(prof.times, prof.M, prof.envelope(prof.times)))
    ctx.write_json("boundary_layer.json", prof.to_dict())
    tol = num["layer"]["residual_tol"]
    ctx.verdict("layer_fit", prof.C2 > 0 and prof.residual <= tol, {"C1": prof.C1, "C2": prof.C2,
                "residual": prof.residual}, tol, lname, detail="C1 (eps + t + exp(-C2 t/eps)) fit of M(t)")
    ctx.verdict("lower_barrier", bool(np.isfinite(prof.C_delta)), prof.C_delta, "finite", lname,
                detail="u_k >= ubar0 - delta - C_delta t")


# ---------------------------------------------------------------------------
# cell table

def _cell_table(cfg, env_spec, model, ctx):
    num = cfg["numerics"]
    envs = [realize(env_spec, s) for s in cfg["seeds"]]
    with _stage("table"):
        table = build_table(envs, model, num["p_grids"], num["r_grid"], num["deltas"], window=num["window"], h=num["h"],
                            method=num["method"], alpha=num["alpha"], tol=num["tol"], workers=ctx.workers)
        table.save(ctx.path("table.json"))
        tname = "table.csv"
        table.export_csv(ctx.path(tname))
    with _stage("properties"):
        props = check_effective_properties(table, model, verify_assumptions(model, envs[0]).constants)
        pname = ctx.write_json("table_properties.json", props.to_dict())
    for key, chk in props.checks.items():
        ctx.verdict(f"table_{key}", chk.passed, chk.worst, None, pname, detail=chk.detail)
    low = int(np.sum(table.low_confidence))
    ctx.verdict("low_confidence_entries", low == 0, low, 0, tname, asserted=bool(num["fail_on_low_confidence"]))


# ---------------------------------------------------------------------------
# metric study

def _metric_task(args):
    spec_dict, seed, model_dict, p, r, mu, directions, t_schedule, h, buffer = args
    env = realize(EnvironmentSpec.from_dict(spec_dict), seed)
    model = HamiltonianModel.from_dict(model_dict, env.m)
    return estimate_M(env, model, p, r, mu, directions, t_schedule, h=h, buffer=buffer)


def _metric_study(cfg, env_spec, model, ctx):
    num = cfg["numerics"]
    p, r = num["p"], float(num["r"])
    table = None
    tab = num.get("table")
    if isinstance(tab, str):
        table = EffectiveHamiltonianTable.load(tab)
    elif isinstance(tab, dict):
        with _stage("table"):
            t_spec = env_spec.with_(L=float(tab.get("L", env_spec.L)))
            table = build_table([realize(t_spec, s) for s in tab["seeds"]], model, tab["p_grids"], tab["r_grid"],
                                tab["deltas"], window=tab["window"], h=tab["h"], alpha=tab.get("alpha", "shared"),
                                workers=ctx.workers)
            table.save(ctx.path("table.json"))
            table.export_csv(ctx.path("table.csv"))
    tasks = [(env_spec.to_dict(), s, model.to_dict(), p, r, mu, num["directions"], num["t_schedule"], num["h"],
              num["buffer"]) for mu in num["mu"] for s in cfg["seeds"]]
    with _stage("metric solves"):
        ests = ctx.map(_metric_task, tasks)
    rows, cons = [], []
    nseed = len(cfg["seeds"])
    for i, mu in enumerate(num["mu"]):
        group = ests[i * nseed:(i + 1) * nseed]
        M = np.mean([g.M for g in group], axis=0)
        for d, e in enumerate(group[0].directions):
            rows.append((mu, " ".join(repr(float(v)) for v in e), M[d], float(np.mean([g.residuals[d] for g in group]))))
        ctx.write_json(f"metric_mu{mu:g}.json", {"estimates": [g.to_dict() for g in group], "M_mean": M})
        if table is not None:
            est = group[0]
            est.M = M
            with _stage(f"support function mu={mu}"):
                c = metric_consistency(est, table, p, r, mu, tol=num["consistency_tol"])
            cons.append(c)
    mname = ctx.write_csv("metric.csv", ["mu", "direction", "M", "fit_residual"], rows)
    if table is not None:
        cname = ctx.write_json("consistency.json", cons)
        for c in cons:
            worst = max(d["relative_gap"] for d in c["directions"])
            ctx.verdict(f"support_function_mu{c['mu']:g}", c["passed"], worst, num["consistency_tol"], cname,
                        detail="|M_mu(e) - sup{q.e : Hbar(p+q) <= mu}| / sup")
    ctx.verdict("metric_finite", bool(all(np.isfinite(r_[2]) for r_ in rows)), None, None, mname, asserted=True)

    sub = num.get("subadditivity")
    if isinstance(sub, dict):
        with _stage("subadditivity"):
            env = realize(env_spec, cfg["seeds"][0])
            mu = num["mu"][0]
            grid = Grid.box([0.0], float(sub["box"]), num["h"])
            rng = np.random.default_rng(cfg["seeds"][0])
            R = int(sub["radius"])
            triples = []
            for _ in range(int(sub["triples"])):
                x, z, y = (float(v) for v in rng.integers(-R, R + 1, 3))
                triples.append(([x], [z], [y]))
            out = subadditivity_check(env, model, p, r, mu, triples, grid)
        sname = ctx.write_csv("subadditivity.csv", ["x", "z", "y", "component", "lhs", "rhs", "excess"],
                              [(t["x"][0], t["z"][0], t["y"][0], t["component"], t["lhs"], t["rhs"], t["excess"])
                               for t in out["triples"]])
        ctx.verdict("subadditivity", out["passed"], out["worst_excess"], out["slack"], sname,
                    detail="m_k(y;x) - m_k(y;z) - max_j m_j(z;x) <= 2 h Lip")
    hom = num.get("homogeneity")
    if isinstance(hom, dict):
        with _stage("homogeneity"):
            base = cfg["seeds"][0]
            envs = [realize(env_spec, base + i) for i in range(int(hom["realizations"]))]
            mu = num["mu"][0]
            tv = [float(t) for t in hom["t"]]
            R = 2 * max(tv) + num["buffer"]
            grid = Grid.box([0.0] * env_spec.n, R, num["h"])
            out = homogeneity_defects(envs, model, p, r, mu, [[0.0] * env_spec.n], tv, grid)
        hname = ctx.write_csv("homogeneity.csv", ["t", "mean_defect"], zip(out["t"], out["mean_defect"]))
        ctx.verdict("homogeneity_decreasing", out["decreasing"], out["mean_defect"], "strictly decreasing in t", hname,
                    detail="mean |m(2te)/(2t) - m(te)/t|")


# ---------------------------------------------------------------------------
# ergodic variance

def _hbar_task(args):
    spec_dict, seed, model_dict, p, r, deltas, window, h = args
    env = realize(EnvironmentSpec.from_dict(spec_dict), seed)
    model = HamiltonianModel.from_dict(model_dict, env.m)
    value, diag = estimate_Hbar(env, model, p, r, deltas, window=window, h=h)
    return value, diag["fit"]["residual"]


def _ergodic_variance(cfg, env_spec, model, ctx):
    num = cfg["numerics"]
    rows, stds = [], []
    for L in num["L_values"]:
        L = float(L)
        dmin = 4.0 * num["window"] / L
        deltas = [f * dmin for f in num["delta_factors"]]
        spec = env_spec.with_(L=L)
        tasks = [(spec.to_dict(), s, model.to_dict(), num["p"], num["r"], deltas, num["window"], num["h"])
                 for s in cfg["seeds"]]
        with _stage(f"estimates L={L:g}"):
            out = ctx.map(_hbar_task, tasks)
        vals = [v for v, _ in out]
        rows += [(L, s, v, res) for s, (v, res) in zip(cfg["seeds"], out)]
        stds.append(float(np.std(vals, ddof=1)))
    name = ctx.write_csv("estimates.csv", ["L", "seed", "Hbar", "fit_residual"], rows)
    ctx.write_csv("spread.csv", ["L", "std"], zip(num["L_values"], stds))
    ctx.verdict("spread_decreasing", all(b < a for a, b in zip(stds, stds[1:])), stds, "strictly decreasing in L", name)


# ---------------------------------------------------------------------------
# property suite

def _contraction_pairs(env, model, con, seed):
    """Sup-norm gaps of randomized solution pairs at every snapshot."""
    eps = float(con["eps"])
    grid = Grid.torus(eps * env.L, eps * con["h_micro"], env.n)
    rng = np.random.default_rng(seed)
    snaps = np.linspace(0.0, con["T"], int(con["snapshots"]))
    rows, ok, worst = [], True, -np.inf
    x = grid.points()
    for pair in range(int(con["pairs"])):
        fields = []
        for _ in range(2):
            u = np.zeros((env.m,) + grid.shape)
            for k in range(env.m):
                for i in range(grid.n):
                    a, b, ph = rng.uniform(-1, 1, 3) * con["amplitude"]
                    freq = int(rng.integers(1, 4))
                    u[k] += a * np.sin(2 * np.pi * freq * x[..., i] / grid.extent(i) + np.pi * ph) + b
            fields.append(u)
        # both runs share alpha and dt so the comparison is between two runs of one scheme
        P = max(_lip(fields[0], grid), _lip(fields[1], grid))
        pb = [EvolutionProblem(env, model, eps, VectorGridField(u, grid), con["T"], snaps) for u in fields]
        par = [step_parameters(q, P=P) for q in pb]
        alpha = max(par[0][0], par[1][0])
        dt = min(par[0][1], par[1][1])
        res = [evolve_system(EvolutionProblem(env, model, eps, VectorGridField(u, grid), con["T"], snaps, alpha=alpha,
                                              dt=dt)) for u in fields]
        gap0 = float(np.max(np.abs(fields[0] - fields[1])))
        steps = res[0].report.steps
        for t, a, b in zip(res[0].times, res[0].snapshots, res[1].snapshots):
            g = float(np.max(np.abs(a.values - b.values)))
            excess = g - gap0
            worst = max(worst, excess)
            if excess > con["tol_per_step"] * max(steps, 1) * max(1.0, gap0):
                ok = False
            rows.append((pair, t, gap0, g, excess))
    return ok, worst, rows


def _lip(u, grid):
    from .numerics import one_sided_gradients

    best = 0.0
    for comp in u:
        Dm, Dp = one_sided_gradients(comp, grid)
        best = max(best, float(np.max(np.abs(Dm))), float(np.max(np.abs(Dp))))
    return best


def _property_suite(cfg, env_spec, model, ctx):
    num = cfg["numerics"]
    env = realize(env_spec, cfg["seeds"][0])
    a = num["assumptions"]
    with _stage("assumptions"):
        rep = verify_assumptions(model, env, float(a["radius"]), int(a["samples"]), cfg["seeds"][0])
    aname = ctx.write_json("assumption_report.json", rep.to_dict())
    for key, v in rep.verdicts.items():
        ctx.verdict(f"assumption_{key}", v.passed, v.witness, None, aname, detail=v.detail)
    con = num.get("contraction")
    if isinstance(con, dict):
        with _stage("contraction"):
            ok, worst, rows = _contraction_pairs(env, model, con, cfg["seeds"][0])
        cname = ctx.write_csv("contraction.csv", ["pair", "t", "initial_gap", "gap", "excess"], rows)
        ctx.verdict("contraction", ok, worst, f"{con['tol_per_step']} * steps", cname,
                    detail="sup-norm gap never exceeds the initial gap")
    if isinstance(num.get("table"), str):
        table = EffectiveHamiltonianTable.load(num["table"])
        with _stage("table properties"):
            props = check_effective_properties(table, model, rep.constants)
        pname = ctx.write_json("table_properties.json", props.to_dict())
        for key, chk in props.checks.items():
            ctx.verdict(f"table_{key}", chk.passed, chk.worst, None, pname, detail=chk.detail)


_RUNNERS = {
    "collapse-demo": _collapse_demo,
    "convergence-study": _convergence_study,
    "cell-table": _cell_table,
    "metric-study": _metric_study,
    "ergodic-variance": _ergodic_variance,
    "property-suite": _property_suite,
}


def default_config(kind: str) -> dict:
    """The normalized config of a kind with every default (required keys left as null)."""
    if kind not in KINDS:
        raise ConfigError([f"kind: {kind!r} is not a valid kind; valid kinds: {', '.join(KINDS)}"])
    return copy.deepcopy({"kind": kind, "seeds": [0], **DEFAULTS[kind], "output": f"runs/{kind}"})
