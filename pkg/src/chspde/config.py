"""Run configuration: a YAML document with sections model / noise / scheme / study / output.

Loading is total and validating: every constraint of the numerical layers (c4 > 0,
white noise only in d = 1, the stepsize rule, ladder divisibility) is checked here and
reported with the dotted path of the offending field.
"""

from __future__ import annotations

import ast
import copy
import hashlib
import json
import math
import operator
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .exceptions import CHSPDEError, ConfigError
from .harness import NORMS, Resolution, StudyPlan, default_initial
from .model import make_potential
from .noise import make_noise_spec
from .spectral import SpectralField, build_eigensystem, grid_nodes, to_spectral
from .stepper import SOLVERS, SolverConfig, validate_stepsize

__all__ = ["RunConfig", "load_config", "parse_config", "dump_config", "bundled_config", "parse_number"]

DEFAULTS = {
    "seed": 0,
    "model": {"L": "pi", "d": 1, "c0": 0.25, "c1": 0.0, "c2": -0.5, "c3": 0.0, "c4": 0.25,
              "X0": {"kind": "cosine", "amplitude": 0.5, "mode": 1}},
    "noise": {"kind": "white", "r": 0.0, "gamma": 1.4, "q_0": 1.0},
    "scheme": {"N": 64, "dt": "1/2048", "T": 0.5, "solver": "fixed_point_with_newton_fallback",
               "tol_residual": 1e-11, "max_iters": 50, "M": None},
    "study": None,
    "output": {"directory": "out", "formats": ["csv", "json", "plot"], "thinning": "final"},
}
STUDY_DEFAULTS = {"axis": "spatial", "ladder": None, "reference": None, "paths": 200, "p": 2.0,
                  "norms": list(NORMS), "chunk_size": 16, "n_boot": 1000, "gamma": None}
FORMATS = ("csv", "json", "plot")

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}


def _eval_number(node):
    if isinstance(node, ast.Expression):
        return _eval_number(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return float(node.value)
    if isinstance(node, ast.Name) and node.id == "pi":
        return math.pi
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        v = _eval_number(node.operand)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_eval_number(node.left), _eval_number(node.right))
    raise ValueError("unsupported expression")


def parse_number(value, field):
    """Float from a number or an arithmetic string such as ``"1/2048"`` or ``"2*pi"``."""
    if isinstance(value, bool):
        raise ConfigError(field, f"expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        out = float(value)
    elif isinstance(value, str):
        try:
            out = _eval_number(ast.parse(value.strip(), mode="eval"))
        except (SyntaxError, ValueError, ZeroDivisionError) as exc:
            raise ConfigError(field, f"cannot parse number {value!r}") from exc
    else:
        raise ConfigError(field, f"expected a number, got {value!r}")
    if not math.isfinite(out):
        raise ConfigError(field, "must be finite")
    return out


def _int(value, field, minimum=None):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ConfigError(field, f"expected an integer, got {value!r}")
    value = int(value)
    if minimum is not None and value < minimum:
        raise ConfigError(field, f"must be >= {minimum}, got {value}")
    return value


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, val in (override or {}).items():
        if key not in base:
            raise ConfigError(f"{path}{key}", "unknown key")
        if isinstance(base[key], dict) and key != "X0":
            if not isinstance(val, dict):
                raise ConfigError(f"{path}{key}", "expected a mapping")
            out[key] = _merge(base[key], val, f"{path}{key}.")
        else:
            out[key] = val
    return out


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration; ``raw`` keeps the user's (default-filled) values."""

    raw: dict

    @property
    def seed(self):
        return int(self.raw["seed"])

    @property
    def L(self):
        return parse_number(self.raw["model"]["L"], "model.L")

    @property
    def d(self):
        return int(self.raw["model"]["d"])

    @property
    def gamma(self):
        g = (self.raw.get("study") or {}).get("gamma")
        return parse_number(g if g is not None else self.raw["noise"]["gamma"], "noise.gamma")

    def potential(self):
        m = self.raw["model"]
        return make_potential(*(parse_number(m[f"c{i}"], f"model.c{i}") for i in range(5)))

    def noise(self):
        n = self.raw["noise"]
        params = {"r": parse_number(n.get("r", 0.0), "noise.r"), "q0": parse_number(n.get("q_0", 1.0), "noise.q_0")}
        if n["kind"] == "explicit":
            params["values"] = n.get("values") or []
        return make_noise_spec(n["kind"], params, parse_number(n["gamma"], "noise.gamma"), self.d, self.L)

    def eigensystem(self, N=None):
        return build_eigensystem(self.L, self.d, int(N if N is not None else self.raw["scheme"]["N"]))

    def initial(self, N=None):
        return _initial(self.raw["model"]["X0"], self.eigensystem(N))

    def scheme(self):
        s = self.raw["scheme"]
        dt = parse_number(s["dt"], "scheme.dt")
        T = parse_number(s["T"], "scheme.T")
        return SolverConfig(dt=dt, K=int(round(T / dt)), N=int(s["N"]), solver=s["solver"],
                            tol_residual=parse_number(s["tol_residual"], "scheme.tol_residual"),
                            max_iters=int(s["max_iters"]), M=None if s["M"] is None else int(s["M"]))

    @property
    def T(self):
        return parse_number(self.raw["scheme"]["T"], "scheme.T")

    def study_plan(self, seed=None, paths=None):
        st = self.raw.get("study")
        if st is None:
            raise ConfigError("study", "section required for the study command")
        rungs, ref = _ladder(st, self.raw["scheme"])
        sch = self.scheme()
        return StudyPlan(
            potential=self.potential(), noise=self.noise(), rungs=rungs, reference=ref, axis=st["axis"],
            L=self.L, d=self.d, T=self.T, X0=self.initial(ref.N), gamma=self.gamma,
            n_paths=int(paths if paths is not None else st["paths"]), p=float(st["p"]),
            norms=tuple(st["norms"]), seed=int(self.seed if seed is None else seed), solver=sch.solver,
            tol_residual=sch.tol_residual, max_iters=sch.max_iters, chunk_size=int(st["chunk_size"]),
            n_boot=int(st["n_boot"]),
        )

    def digest(self):
        """SHA-256 of the canonical JSON form of the configuration, output section excluded.

        Output location and formats do not affect results, so they do not enter the hash.
        """
        body = {k: v for k, v in self.raw.items() if k != "output"}
        text = json.dumps(body, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(text.encode()).hexdigest()


def _initial(spec, eig):
    kind = spec.get("kind", "cosine")
    if kind == "zero":
        return SpectralField.zeros(eig)
    if kind == "cosine":
        mode = spec.get("mode", 1)
        mode = [int(mode)] + [0] * (eig.d - 1) if isinstance(mode, (int, float)) else [int(m) for m in mode]
        amp = parse_number(spec.get("amplitude", 0.5), "model.X0.amplitude")
        if mode == [1] + [0] * (eig.d - 1):
            return default_initial(eig, amp)
        norm = np.prod([eig.L if m == 0 else eig.L / 2.0 for m in mode]) ** 0.5
        return SpectralField.basis(eig, mode, amp * norm)
    if kind == "coefficients":
        vals = np.zeros(eig.n_modes)
        given = [parse_number(v, "model.X0.values") for v in spec.get("values", [])]
        n = min(len(given), eig.n_modes)
        vals[:n] = given[:n]
        return SpectralField(vals, eig)
    if kind == "expression":
        expr = spec.get("expr")
        if not isinstance(expr, str):
            raise ConfigError("model.X0.expr", "expected a string expression in x, y, z")
        M = 4 * eig.N
        axes = np.meshgrid(*([grid_nodes(eig.L, M)] * eig.d), indexing="ij")
        names = dict(zip("xyz", axes))
        names.update(pi=math.pi, L=eig.L, cos=np.cos, sin=np.sin, exp=np.exp, sqrt=np.sqrt, tanh=np.tanh)
        try:
            values = eval(compile(expr, "<X0>", "eval"), {"__builtins__": {}}, names)  # noqa: S307
        except Exception as exc:
            raise ConfigError("model.X0.expr", f"cannot evaluate {expr!r}: {exc}") from exc
        return to_spectral(np.broadcast_to(np.asarray(values, dtype=float), axes[0].shape), eig.N, eig.L)
    raise ConfigError("model.X0.kind", f"unknown initial condition kind {kind!r}")


def _ladder(st, scheme):
    axis = st["axis"]
    if axis not in ("spatial", "temporal", "joint"):
        raise ConfigError("study.axis", f"must be spatial, temporal or joint, got {axis!r}")
    ladder, ref = st.get("ladder"), st.get("reference")
    if not isinstance(ladder, list) or not ladder:
        raise ConfigError("study.ladder", "expected a nonempty list")
    if ref is None:
        raise ConfigError("study.reference", "required")
    dt = parse_number(scheme["dt"], "scheme.dt")
    N = _int(scheme["N"], "scheme.N", 1)
    if axis == "spatial":
        rungs = tuple(Resolution(_int(n, f"study.ladder[{i}]", 1), dt) for i, n in enumerate(ladder))
        reference = Resolution(_int(ref, "study.reference", 1), dt)
    elif axis == "temporal":
        rungs = tuple(Resolution(N, parse_number(t, f"study.ladder[{i}]")) for i, t in enumerate(ladder))
        reference = Resolution(N, parse_number(ref, "study.reference"))
    else:
        def pair(v, f):
            if not isinstance(v, (list, tuple)) or len(v) != 2:
                raise ConfigError(f, "expected [N, dt]")
            return Resolution(_int(v[0], f + "[0]", 1), parse_number(v[1], f + "[1]"))
        rungs = tuple(pair(v, f"study.ladder[{i}]") for i, v in enumerate(ladder))
        reference = pair(ref, "study.reference")
    return rungs, reference


def _validate(raw):
    cfg = RunConfig(raw)
    _int(raw["seed"], "seed", 0)
    m = raw["model"]
    L = parse_number(m["L"], "model.L")
    if L <= 0:
        raise ConfigError("model.L", "must be > 0")
    d = _int(m["d"], "model.d", 1)
    if d > 3:
        raise ConfigError("model.d", "must be 1, 2 or 3")
    for i in range(5):
        parse_number(m[f"c{i}"], f"model.c{i}")
    if not parse_number(m["c4"], "model.c4") > 0:
        raise ConfigError("model.c4", "must be > 0 (quartic potential)")
    if not isinstance(m["X0"], dict):
        raise ConfigError("model.X0", "expected a mapping")

    n = raw["noise"]
    if n["kind"] not in ("white", "power_law", "explicit", "zero"):
        raise ConfigError("noise.kind", f"unknown kind {n['kind']!r}")
    if n["kind"] == "white" and d != 1:
        raise ConfigError("noise.kind", "white noise is only admissible in d = 1")
    if parse_number(n["gamma"], "noise.gamma") <= 0:
        raise ConfigError("noise.gamma", "must be > 0")
    try:
        cfg.noise()
    except CHSPDEError as exc:
        raise ConfigError("noise", str(exc)) from exc

    s = raw["scheme"]
    N = _int(s["N"], "scheme.N", 1)
    if (N + 1) ** d > 2**18:
        raise ConfigError("scheme.N", "(N+1)^d exceeds 2^18 modes")
    dt = parse_number(s["dt"], "scheme.dt")
    T = parse_number(s["T"], "scheme.T")
    if dt <= 0:
        raise ConfigError("scheme.dt", "must be > 0")
    if T <= 0:
        raise ConfigError("scheme.T", "must be > 0")
    if abs(T / dt - round(T / dt)) > 1e-9 * (T / dt):
        raise ConfigError("scheme.dt", f"T={T} is not an integer multiple of dt={dt}")
    if s["solver"] not in SOLVERS:
        raise ConfigError("scheme.solver", f"must be one of {SOLVERS}")
    if parse_number(s["tol_residual"], "scheme.tol_residual") <= 0:
        raise ConfigError("scheme.tol_residual", "must be > 0")
    _int(s["max_iters"], "scheme.max_iters", 1)
    if s["M"] is not None and _int(s["M"], "scheme.M", 2) < 2 * N:
        raise ConfigError("scheme.M", f"collocation grid must have at least 2N = {2 * N} nodes")
    pot = cfg.potential()
    rep = validate_stepsize(dt, pot, build_eigensystem(L, d, N))
    if not rep.ok:
        raise ConfigError("scheme.dt", "stepsize rule violated: " + rep.message)
    try:
        cfg.initial()
    except CHSPDEError as exc:
        raise ConfigError("model.X0", str(exc)) from exc

    st = raw.get("study")
    if st is not None:
        if st["norms"] is None or any(x not in NORMS for x in st["norms"]):
            raise ConfigError("study.norms", f"each norm must be one of {NORMS}")
        _int(st["paths"], "study.paths", 2)
        if parse_number(st["p"], "study.p") < 1:
            raise ConfigError("study.p", "must be >= 1")
        _int(st["chunk_size"], "study.chunk_size", 1)
        _int(st["n_boot"], "study.n_boot", 10)
        try:
            cfg.study_plan().validate()
        except ConfigError:
            raise
        except CHSPDEError as exc:
            field = "study.reference" if "reference" in str(exc) else "study.ladder"
            raise ConfigError(field, str(exc)) from exc

    o = raw["output"]
    fmts = o["formats"]
    if isinstance(fmts, str):
        fmts = [f.strip() for f in fmts.split(",") if f.strip()]
        o["formats"] = fmts
    if not fmts or any(f not in FORMATS for f in fmts):
        raise ConfigError("output.formats", f"each format must be one of {FORMATS}")
    th = o["thinning"]
    if not (th in ("final", "all") or (isinstance(th, int) and not isinstance(th, bool) and th >= 1)):
        raise ConfigError("output.thinning", "must be 'final', 'all' or a positive step interval")
    return cfg


def parse_config(data):
    """Validate a mapping (already parsed YAML) into a :class:`RunConfig`."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("<root>", "configuration must be a mapping")
    defaults = copy.deepcopy(DEFAULTS)
    study = data.get("study")
    if study is not None:
        if not isinstance(study, dict):
            raise ConfigError("study", "expected a mapping")
        defaults["study"] = copy.deepcopy(STUDY_DEFAULTS)
    raw = _merge(defaults, data)
    return _validate(raw)


def load_config(source):
    """Load from a path, a bundled config name, or YAML text."""
    text = None
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        path = Path(source)
        if path.exists():
            text = path.read_text()
        else:
            text = bundled_config(str(source))
    else:
        text = source
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<root>", f"invalid YAML: {exc}") from exc
    return parse_config(data)


def bundled_config(name):
    """Text of a configuration shipped with the package (e.g. ``white_noise_spatial``)."""
    fname = name if name.endswith(".yaml") else f"{name}.yaml"
    res = resources.files("chspde") / "configs" / fname
    if not res.is_file():
        raise FileNotFoundError(f"no config file or bundled config named {name!r}")
    return res.read_text()


def dump_config(cfg):
    """YAML text of the resolved configuration (defaults filled in)."""
    return yaml.safe_dump(cfg.raw, sort_keys=False)
