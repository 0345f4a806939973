"""INI run configuration with sections [flow], [mesh], [adapt], [train], [run]."""
import configparser
import os
from dataclasses import dataclass, field, fields

from .adaptation import AdaptConfig
from .euler import FlowConfig
from .functional import FunctionalSpec
from .primal import SolverOptions
from .surrogate import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class MeshSource:
    """Either a mesh file or the built-in NACA O-mesh generator."""

    path: str | None = None
    profile: str = "0012"
    n_around: int = 96
    n_radial: int = 11
    farfield_radius: float = 20.0

    def build(self):
        from .io import load_mesh
        from .mesh import generate_naca_omesh

        if self.path:
            return load_mesh(self.path)
        return generate_naca_omesh(self.profile, self.n_around, self.n_radial, self.farfield_radius)

    def describe(self):
        if self.path:
            return f"file:{self.path}"
        return f"naca{self.profile}:{self.n_around}x{self.n_radial}:R{self.farfield_radius:g}"


@dataclass
class RunConfig:
    case: str = "naca0012"
    mesh: MeshSource = field(default_factory=MeshSource)
    flow: FlowConfig = field(default_factory=lambda: FlowConfig(mach=0.5))
    functional: str = "drag"
    pressure: str = "trace"
    solver: SolverOptions = field(default_factory=SolverOptions)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dual: str = "exact"
    model: str | None = None
    dataset: str | None = None
    train_cases: tuple = ((0.5, 0.0),)
    train_levels: tuple = (1, 2)
    reference_levels: int = 2
    bench_threads: tuple = (1, 2, 4)
    bench_refine: int = 0
    threads: int = 1
    seed: int = 0
    out: str = "out"

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.dual not in ("exact", "surrogate"):
            raise ConfigError("dual must be 'exact' or 'surrogate'")
        if self.mesh.path and not os.path.exists(self.mesh.path):
            raise ConfigError(f"mesh file {self.mesh.path} does not exist")
        # the model is an output of `train`, so it only has to exist for surrogate runs
        if self.dual == "surrogate" and self.model and not os.path.exists(self.model):
            raise ConfigError(f"model file {self.model} does not exist")

    def spec(self):
        return FunctionalSpec.for_flow(self.functional, self.flow, pressure=self.pressure)


def _coerce(value, like):
    if isinstance(like, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float) or like is None:
        try:
            return float(value)
        except ValueError:
            return value
    if isinstance(like, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    return value.strip()


def _fill(cls, section, defaults=None, skip=()):
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    base = defaults or {}
    for key, raw in section.items():
        if key in skip:
            continue
        if key not in known:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        like = base.get(key, getattr(cls, key, None) if hasattr(cls, key) else None)
        kwargs[key] = _coerce(raw, like)
    return kwargs


def _pairs(text):
    out = []
    for item in text.split(";"):
        if item.strip():
            mach, alpha = item.split(",")
            out.append((float(mach), float(alpha)))
    return tuple(out)


def load_config(path=None, overrides=None):
    """Parse an INI file (or only defaults when ``path`` is None).

    ``overrides`` maps ``"section.key"`` to string values and is applied
    after the file, e.g. ``{"run.threads": "4"}``.
    """
    cp = configparser.ConfigParser(interpolation=None)
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file {path} does not exist")
        cp.read(path)
    for dotted, value in (overrides or {}).items():
        sec, key = dotted.split(".", 1)
        if not cp.has_section(sec):
            cp.add_section(sec)
        cp.set(sec, key, str(value))
    for sec in cp.sections():
        if sec not in ("flow", "mesh", "adapt", "train", "run"):
            raise ConfigError(f"unknown section [{sec}]")
    get = lambda sec: dict(cp.items(sec)) if cp.has_section(sec) else {}
    base = os.path.dirname(os.path.abspath(path)) if path else os.getcwd()

    def resolve(p):
        return p if p is None or os.path.isabs(p) else os.path.join(base, p)

    flow = get("flow")
    flow_keys = ("mach", "alpha", "gamma")
    solver_keys = {f.name for f in fields(SolverOptions)}
    fc = FlowConfig(**{k: float(v) for k, v in flow.items() if k in flow_keys}) if "mach" in flow \
        else FlowConfig(mach=0.5, **{k: float(v) for k, v in flow.items() if k in flow_keys})
    solver = SolverOptions(**_fill(SolverOptions, {k: v for k, v in flow.items() if k in solver_keys}))
    extra = set(flow) - set(flow_keys) - solver_keys - {"functional", "pressure"}
    if extra:
        raise ConfigError(f"unknown [flow] keys: {', '.join(sorted(extra))}")

    mesh = get("mesh")
    if "path" in mesh:
        mesh["path"] = resolve(mesh["path"])
    ms = MeshSource(**_fill(MeshSource, mesh, {"path": "", "profile": ""}))

    adapt = get("adapt")
    ac = AdaptConfig(**_fill(AdaptConfig, adapt, skip=("dual", "model")))

    train = get("train")
    tkw = _fill(TrainConfig, train, skip=("dataset", "cases", "levels"))
    tc = TrainConfig(**tkw)

    run = get("run")
    unknown = set(run) - {"case", "threads", "seed", "out", "bench_threads", "bench_refine", "reference_levels"}
    if unknown:
        raise ConfigError(f"unknown [run] keys: {', '.join(sorted(unknown))}")
    rc = RunConfig(
        case=run.get("case", "naca0012"),
        mesh=ms,
        flow=fc,
        functional=flow.get("functional", "drag"),
        pressure=flow.get("pressure", "trace"),
        solver=solver,
        adapt=ac,
        train=tc,
        dual=adapt.get("dual", "exact"),
        model=resolve(adapt.get("model")),
        dataset=resolve(train.get("dataset")),
        train_cases=_pairs(train["cases"]) if "cases" in train else ((fc.mach, fc.alpha),),
        train_levels=_coerce(train["levels"], ()) if "levels" in train else (1, 2),
        reference_levels=int(run.get("reference_levels", 2)),
        bench_threads=_coerce(run["bench_threads"], ()) if "bench_threads" in run else (1, 2, 4),
        bench_refine=int(run.get("bench_refine", 0)),
        threads=int(run.get("threads", 1)),
        seed=int(run.get("seed", 0)),
        out=resolve(run.get("out", "out")) if path else run.get("out", "out"),
    )
    return rc
