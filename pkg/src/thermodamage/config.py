"""Simulation configuration: TOML parsing, defaults and validation.

Every section is optional except ``[time]``; unknown keys are rejected with
their dotted path so that typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .assembly import LoadData, TimeFunction
from .errors import ConfigurationError
from .material import MaterialLaws
from .mesh import SIDES, DofMap, Mesh2D, generate_unit_square, load_mesh
from .thermomech import DEFAULT_M_SCHEDULE, Scaling, Tolerances


@dataclass
class MeshSpec:
    n: Optional[int] = 16
    dirichlet: tuple = ("left",)
    file: Optional[str] = None
    repair_orientation: bool = False

    def build(self, base_dir: Path = Path(".")) -> Mesh2D:
        if self.file:
            path = Path(self.file)
            if not path.is_absolute():
                path = base_dir / path
            return load_mesh(path, repair_orientation=self.repair_orientation)
        return generate_unit_square(int(self.n), list(self.dirichlet))


@dataclass
class InitialData:
    """Constants (scalars / 2-vectors) or paths to ``.npy``/text nodal files."""

    u: Any = (0.0, 0.0)
    v: Any = (0.0, 0.0)
    z: Any = 1.0
    theta: Any = 1.0

    def resolve(self, mesh: Mesh2D, base_dir: Path = Path(".")):
        n = mesh.n_nodes
        out = {}
        for name, width in (("u", 2), ("v", 2), ("z", 1), ("theta", 1)):
            val = getattr(self, name)
            if isinstance(val, str):
                p = Path(val) if Path(val).is_absolute() else base_dir / val
                arr = np.load(p) if p.suffix == ".npy" else np.loadtxt(p)
                arr = np.asarray(arr, dtype=float).reshape(-1)
                if arr.size != n * width:
                    raise ConfigurationError(f"initial.{name}: file has {arr.size} values, expected {n * width}")
            elif width == 2:
                vec = np.asarray(val, dtype=float).reshape(-1)
                if vec.size != 2:
                    raise ConfigurationError(f"initial.{name}: expected a 2-vector")
                arr = np.tile(vec, n)
            else:
                arr = np.full(n, float(val))
            out[name] = arr
        return out["u"], out["v"], out["z"], out["theta"]


@dataclass
class ToleranceConfig:
    energy: float = 1e-8
    semistability: float = 1e-8
    damage: float = 1e-9
    momentum: float = 1e-10
    heat: float = 1e-10
    alternation: float = 1e-11
    positivity: float = 1e-10
    unidirectionality: float = 1e-14


@dataclass
class SolverConfig:
    heat: str = "picard"
    linear: str = "direct"
    heat_mass: str = "lumped"
    gamma: float = 5.0
    M_schedule: tuple = DEFAULT_M_SCHEDULE
    max_newton: int = 50
    max_alternation: int = 200
    damage: str = "newton"
    damage_max_iter: int = 10000


@dataclass
class PositivityConfig:
    theta_star: Optional[float] = None
    H_star: Optional[float] = None


@dataclass
class SemistabilityConfig:
    samples: int = 100
    every: int = 5


@dataclass
class OutputConfig:
    every: int = 1
    vtk: bool = True


@dataclass
class RescalingConfig:
    eps: tuple = (1.0, 0.5, 0.25, 0.125)
    beta: float = 2.0
    H_tilde: float = 0.0
    ode_check: bool = True


@dataclass
class SimConfig:
    T: float
    n_steps: int
    mesh_spec: MeshSpec = field(default_factory=MeshSpec)
    material: MaterialLaws = field(default_factory=MaterialLaws)
    loads: LoadData = field(default_factory=LoadData)
    initial: InitialData = field(default_factory=InitialData)
    tolerances: ToleranceConfig = field(default_factory=ToleranceConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    positivity: PositivityConfig = field(default_factory=PositivityConfig)
    semistability: SemistabilityConfig = field(default_factory=SemistabilityConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    seed: int = 0
    rescaling: Optional[RescalingConfig] = None
    scaling: Scaling = field(default_factory=Scaling)
    base_dir: Path = Path(".")
    mesh: Optional[Mesh2D] = field(default=None, repr=False)

    def __post_init__(self):
        self.validate()

    # -- derived -------------------------------------------------------
    @property
    def tau(self) -> float:
        return self.T / self.n_steps

    def get_mesh(self) -> Mesh2D:
        if self.mesh is None:
            self.mesh = self.mesh_spec.build(self.base_dir)
        return self.mesh

    def solver_tolerances(self) -> Tolerances:
        t, s = self.tolerances, self.solver
        return Tolerances(momentum_rtol=t.momentum, heat_rtol=t.heat, alternation=t.alternation,
                          max_newton=s.max_newton, max_alternation=s.max_alternation,
                          heat_method=s.heat, linear_solver=s.linear)

    def initial_fields(self):
        mesh = self.get_mesh()
        u, v, z, theta = self.initial.resolve(mesh, self.base_dir)
        if np.any(z < 0) or np.any(z > 1):
            raise ConfigurationError("initial.z: damage must lie in [0, 1]")
        ts = self.theta_star(theta)
        if np.min(theta) < ts:
            raise ConfigurationError(f"initial.theta: theta0 >= theta_star = {ts} required")
        cd = DofMap.from_mesh(mesh).constrained
        for name, arr in (("u", u), ("v", v)):
            if np.any(arr[cd] != 0):
                raise ConfigurationError(f"initial.{name}: must vanish on Dirichlet nodes (homogeneous data)")
        return u, v, z, theta

    def theta_star(self, theta0=None) -> float:
        ts = self.positivity.theta_star
        if ts is None:
            if theta0 is None:
                th = self.initial.theta
                if isinstance(th, str):
                    return self.theta_star(self.initial.resolve(self.get_mesh(), self.base_dir)[3])
                theta0 = np.asarray(th, dtype=float)
            ts = float(np.min(theta0))
        if not ts > 0:
            raise ConfigurationError(f"positivity.theta_star: initial temperature requires theta0 >= theta_star > 0 "
                                     f"(got {ts})")
        return ts

    # -- validation ----------------------------------------------------
    def validate(self):
        if not (isinstance(self.T, (int, float)) and self.T > 0 and math.isfinite(self.T)):
            raise ConfigurationError("time.T: must be positive")
        if not (isinstance(self.n_steps, int) and self.n_steps >= 1):
            raise ConfigurationError("time.steps: must be an integer >= 1")
        if not self.material.delta_at > 0:
            raise ConfigurationError("material.delta_at: must be positive (partial damage keeps C(0) coercive)")
        if not self.solver.gamma > 4:
            raise ConfigurationError("solver.gamma: must exceed 4")
        Tolerances(heat_method=self.solver.heat, linear_solver=self.solver.linear)
        if self.solver.damage not in ("newton", "bb"):
            raise ConfigurationError("solver.damage: must be 'newton' or 'bb'")
        if self.solver.heat_mass not in ("lumped", "consistent"):
            raise ConfigurationError("solver.heat_mass: must be 'lumped' or 'consistent'")
        if not self.solver.M_schedule or any(m <= 0 for m in self.solver.M_schedule):
            raise ConfigurationError("solver.M_schedule: must be a nonempty list of positive levels")
        self.loads.validate(self.T)
        if self.semistability.samples < 0 or self.semistability.every < 1:
            raise ConfigurationError("semistability: samples >= 0 and every >= 1 required")
        if self.output.every < 1:
            raise ConfigurationError("output.every: must be >= 1")
        if not isinstance(self.initial.theta, str):
            th = np.asarray(self.initial.theta, dtype=float)
            if np.min(th) <= 0 and self.positivity.theta_star is None:
                raise ConfigurationError(
                    "initial.theta: theta0 >= theta_star > 0 is required, got theta0 = %g" % np.min(th))
            ts = self.theta_star()
            if np.min(th) < ts:
                raise ConfigurationError(f"initial.theta: theta0 >= theta_star = {ts} required")
        hs = self.positivity.H_star
        if hs is not None:
            if hs < 0:
                raise ConfigurationError("positivity.H_star: must be nonnegative")
            if self.loads.heat_source.min_on(0.0, self.T) < hs:
                raise ConfigurationError("positivity.H_star: heat source must satisfy H >= H_star")
            cb = self.material.c_bar
            if cb > 0 and not isinstance(self.initial.theta, str):
                if np.min(np.asarray(self.initial.theta, dtype=float)) < math.sqrt(hs / cb) - 1e-15:
                    raise ConfigurationError("initial.theta: theta0 >= sqrt(H_star / c_bar) required")
        if self.rescaling is not None:
            r = self.rescaling
            if len(r.eps) < 1 or any(e <= 0 for e in r.eps):
                raise ConfigurationError("rescaling.eps: positive values required")
            if r.beta < 0:
                raise ConfigurationError("rescaling.beta: must be nonnegative")
            if r.ode_check and r.beta < 2:
                raise ConfigurationError("rescaling.beta: beta >= 2 is required when ode_check is enabled")
            if r.H_tilde < 0:
                raise ConfigurationError("rescaling.H_tilde: must be nonnegative")
            if self.mesh_spec.file is None and set(self.mesh_spec.dirichlet) != set(SIDES):
                raise ConfigurationError("mesh.dirichlet: rescaled runs need Dirichlet conditions on all sides")

    def check_rescaling_mesh(self):
        mesh = self.get_mesh()
        if not all(lab == "DIRICHLET" for lab in mesh.labels):
            raise ConfigurationError("mesh: rescaled runs need Dirichlet conditions on the whole boundary")

    # -- echo ----------------------------------------------------------
    def to_dict(self) -> dict:
        def tf(t: TimeFunction):
            d = {"kind": t.kind}
            if t.kind == "constant":
                d["value"] = t.value
            elif t.kind == "ramp":
                d.update(start=t.start, rate=t.rate)
            elif t.kind == "table":
                d.update(times=list(t.times), values=list(t.values))
            return d

        L = self.loads
        vol = tf(L.volume_time)
        vol["direction"] = list(L.volume_dir)
        tr = tf(L.traction_time)
        tr["direction"] = list(L.traction_dir)
        if L.traction_sides is not None:
            tr["sides"] = list(L.traction_sides)
        ms = dataclasses.asdict(self.mesh_spec)
        ms["dirichlet"] = list(ms["dirichlet"])
        ms = {k: v for k, v in ms.items() if v is not None}
        init = {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self.initial).items()}
        solver = dataclasses.asdict(self.solver)
        solver["M_schedule"] = list(solver["M_schedule"])
        pos = {k: v for k, v in dataclasses.asdict(self.positivity).items() if v is not None}
        out = {
            "seed": self.seed,
            "mesh": ms,
            "time": {"T": self.T, "steps": self.n_steps},
            "material": dataclasses.asdict(self.material),
            "loads": {"volume_force": vol, "traction": tr, "heat_source": tf(L.heat_source),
                      "heat_flux": tf(L.heat_flux)},
            "initial": init,
            "tolerances": dataclasses.asdict(self.tolerances),
            "solver": solver,
            "positivity": pos,
            "semistability": dataclasses.asdict(self.semistability),
            "output": dataclasses.asdict(self.output),
        }
        if self.rescaling is not None:
            r = dataclasses.asdict(self.rescaling)
            r["eps"] = list(r["eps"])
            out["rescaling"] = r
        return out

    def replace(self, **changes) -> "SimConfig":
        new = copy.copy(self)
        for k, v in changes.items():
            setattr(new, k, v)
        new.validate()
        return new


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------
_TOP = {"seed", "mesh", "time", "material", "loads", "initial", "tolerances", "solver", "positivity",
        "semistability", "output", "rescaling"}
_TF_KEYS = {"kind", "value", "start", "rate", "times", "values"}


def _check_keys(d: dict, allowed, path: str):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{path}: expected a table")
    for k in d:
        if k not in allowed:
            where = f"{path}.{k}" if path else k
            raise ConfigurationError(f"{where}: unknown key")


def _dataclass_from(cls, d: dict, path: str, convert=None):
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    _check_keys(d, names, path)
    kwargs = dict(d)
    if convert:
        for k, fn in convert.items():
            if k in kwargs:
                kwargs[k] = fn(kwargs[k])
    try:
        return cls(**kwargs)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    except TypeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def _time_function(d: dict, path: str, extra=()) -> TimeFunction:
    _check_keys(d, _TF_KEYS | set(extra), path)
    kind = d.get("kind", "constant")
    try:
        if kind == "constant":
            return TimeFunction.constant(d.get("value", 0.0))
        if kind == "ramp":
            return TimeFunction.ramp(d.get("rate", 0.0), d.get("start", 0.0))
        if kind == "table":
            return TimeFunction.table(d.get("times", ()), d.get("values", ()))
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    raise ConfigurationError(f"{path}.kind: unknown time-function kind {kind!r}")


def _vector(v, path):
    a = tuple(float(x) for x in v)
    if len(a) != 2:
        raise ConfigurationError(f"{path}: expected two components")
    return a


def _loads(d: dict) -> LoadData:
    _check_keys(d, {"volume_force", "traction", "heat_source", "heat_flux"}, "loads")
    vf = d.get("volume_force", {})
    tr = d.get("traction", {})
    kw = {}
    if vf:
        kw["volume_time"] = _time_function(vf, "loads.volume_force", extra=("direction",))
        kw["volume_dir"] = _vector(vf.get("direction", (1.0, 0.0)), "loads.volume_force.direction")
    if tr:
        kw["traction_time"] = _time_function(tr, "loads.traction", extra=("direction", "sides"))
        kw["traction_dir"] = _vector(tr.get("direction", (1.0, 0.0)), "loads.traction.direction")
        if "sides" in tr:
            sides = tuple(tr["sides"])
            bad = [s for s in sides if s not in SIDES]
            if bad:
                raise ConfigurationError(f"loads.traction.sides: unknown side(s) {bad}")
            kw["traction_sides"] = sides
    for name in ("heat_source", "heat_flux"):
        if name in d:
            fn = _time_function(d[name], f"loads.{name}")
            kw[name] = fn
    return LoadData(**kw)


def config_from_dict(data: dict, base_dir: Path = Path(".")) -> SimConfig:
    """Build a validated :class:`SimConfig` from a parsed TOML tree."""
    data = copy.deepcopy(data)
    _check_keys(data, _TOP, "")
    if "time" not in data:
        raise ConfigurationError("time: section is required")
    _check_keys(data["time"], {"T", "steps"}, "time")
    T = data["time"].get("T", 1.0)
    steps = data["time"].get("steps", 10)
    if "mesh" in data:
        m = data["mesh"]
        if "file" in m and "n" not in m:
            m = dict(m, n=None)
        mesh_spec = _dataclass_from(MeshSpec, m, "mesh", {"dirichlet": tuple})
        bad = [s for s in mesh_spec.dirichlet if s not in SIDES]
        if bad:
            raise ConfigurationError(f"mesh.dirichlet: unknown side(s) {bad}")
    else:
        mesh_spec = MeshSpec()
    try:
        material = _dataclass_from(MaterialLaws, data.get("material", {}), "material")
    except ConfigurationError:
        raise
    kw = dict(
        T=float(T), n_steps=steps, mesh_spec=mesh_spec, material=material,
        loads=_loads(data.get("loads", {})),
        initial=_dataclass_from(InitialData, data.get("initial", {}), "initial",
                                {"u": lambda v: v if isinstance(v, str) else tuple(v),
                                 "v": lambda v: v if isinstance(v, str) else tuple(v)}),
        tolerances=_dataclass_from(ToleranceConfig, data.get("tolerances", {}), "tolerances"),
        solver=_dataclass_from(SolverConfig, data.get("solver", {}), "solver",
                               {"M_schedule": lambda v: tuple(float(x) for x in v)}),
        positivity=_dataclass_from(PositivityConfig, data.get("positivity", {}), "positivity"),
        semistability=_dataclass_from(SemistabilityConfig, data.get("semistability", {}), "semistability"),
        output=_dataclass_from(OutputConfig, data.get("output", {}), "output"),
        seed=int(data.get("seed", 0)),
        base_dir=Path(base_dir),
    )
    if "rescaling" in data:
        kw["rescaling"] = _dataclass_from(RescalingConfig, data["rescaling"], "rescaling",
                                          {"eps": lambda v: tuple(float(x) for x in v)})
    return SimConfig(**kw)


def parse_config(path) -> SimConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    return config_from_dict(data, base_dir=path.parent)
