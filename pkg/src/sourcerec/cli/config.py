"""Flat ``key = value`` run configuration.

Keys use dotted sections (``mesh.h``, ``mcmc.prior.rho``).  Blank lines and
``#`` comments are ignored.  Every key is typed and defaulted by ``SCHEMA``;
unknown keys, bad values and broken invariants raise
:class:`~sourcerec.errors.ConfigInvalid` with the offending line and field.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigInvalid
from ..inference.mcmc import Gamma, InvGamma, PointMass

CASES = ("steady-1d", "steady-2d", "spacetime-1d")


def _float(s):
    return float(s)


def _int(s):
    v = int(s)
    return v


def _floats(s):
    return tuple(float(t) for t in s.replace(",", " ").split())


def _ints(s):
    return tuple(int(t) for t in s.replace(",", " ").split())


def _bool(s):
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _str(s):
    return s.strip()


def _prior(s):
    parts = s.split()
    kind, args = parts[0].lower(), [float(t) for t in parts[1:]]
    if kind == "gamma" and len(args) == 2:
        return Gamma(*args)
    if kind == "invgamma" and len(args) == 2:
        return InvGamma(*args)
    if kind == "point" and len(args) == 1:
        return PointMass(args[0])
    raise ValueError("expected 'gamma SHAPE RATE', 'invgamma SHAPE SCALE' or 'point VALUE'")


def _prior_text(p):
    if isinstance(p, Gamma):
        return f"gamma {p.shape!r} {p.rate!r}"
    if isinstance(p, InvGamma):
        return f"invgamma {p.shape!r} {p.scale!r}"
    return f"point {p.value!r}"


# key -> (parser, default); a default of None means "unset"
SCHEMA = {
    "case": (_str, "steady-1d"),
    "seed": (_int, 0),
    "mesh.x": (_floats, (0.0, 50.0)),
    "mesh.y": (_floats, None),
    "mesh.h": (_float, 0.1),
    "mesh.nx": (_int, 41),
    "mesh.ny": (_int, 25),
    "mesh.buffer": (_float, None),
    "mesh.nodes_file": (_str, None),
    "mesh.cells_file": (_str, None),
    "pde.D": (_float, 0.75),
    "pde.r": (_float, 0.2),
    "pde.velocity": (_str, "stream"),
    "pde.velocity_file": (_str, None),
    "prior.alpha": (_int, 2),
    "prior.rho": (_float, 2.0),
    "prior.sigma2_f": (_float, 10.0),
    "covariates.kind": (_str, "none"),
    "covariates.zones": (_floats, (17.0, 34.0)),
    "covariates.beta": (_floats, (6.0, 1.0, 3.0)),
    "covariates.sigma2_beta": (_float, 25.0),
    "noise.sigma2": (_float, 10.0),
    "obs.file": (_str, None),
    "obs.n": (_int, None),
    "obs.truth_file": (_str, None),
    "spacetime.tau": (_float, 2.0),
    "spacetime.kappa": (_float, 1.0),
    "spacetime.variance": (_float, 10.0),
    "spacetime.dt": (_float, 0.05),
    "spacetime.steps": (_int, 2000),
    "spacetime.nodes": (_int, 101),
    "spacetime.sensors": (_int, None),
    "spacetime.times": (_int, 20),
    "spacetime.method": (_str, "auto"),
    "mcmc.chains": (_int, 4),
    "mcmc.iterations": (_int, 5000),
    "mcmc.burn_in": (_int, 5000),
    "mcmc.thin": (_int, 5),
    "mcmc.adapt": (_bool, True),
    "mcmc.sigma2_update": (_str, "collapsed"),
    "mcmc.prior.rho": (_prior, Gamma(4.0, 2.0)),
    "mcmc.prior.D": (_prior, Gamma(4.0, 4.0)),
    "mcmc.prior.r": (_prior, Gamma(2.0, 10.0)),
    "mcmc.prior.v": (_prior, Gamma(2.0, 1.0)),
    "mcmc.prior.v_beta": (_prior, Gamma(2.0, 0.5)),
    "mcmc.prior.sigma2_f": (_prior, InvGamma(3.0, 20.0)),
    "accuracy.sizes": (_ints, (10, 18, 32, 56, 100, 178, 316, 562, 1000, 1778, 3162, 5623, 10000)),
    "accuracy.replicates": (_int, 30),
    "demo.nodes": (_int, 751),
    "demo.steps": (_int, 10_000),
    "demo.dt": (_float, 0.05),
    "demo.buffer": (_float, 15.0),
    "demo.stride_t": (_int, 50),
    "demo.stride_x": (_int, 5),
    "plot.samples": (_int, 3),
}

# keys naming input files, resolved relative to the config file
FILE_KEYS = ("mesh.nodes_file", "mesh.cells_file", "pde.velocity_file", "obs.file", "obs.truth_file")


@dataclass
class RunConfig:
    """Resolved configuration: every schema key has a value (possibly None)."""

    values: dict
    lines: dict = field(default_factory=dict)
    source: Path | None = None

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        v = self.values.get(key)
        return default if v is None else v

    @property
    def case(self):
        return self.values["case"]

    def fail(self, key, message):
        raise ConfigInvalid(message, field=key, line=self.lines.get(key))

    def mcmc_priors(self, with_beta):
        names = ["rho", "D", "r", "v", "sigma2_f"] + (["v_beta"] if with_beta else [])
        return {k: self.values[f"mcmc.prior.{k}"] for k in names}

    def to_text(self, header=()):
        """Manifest text: a valid config that reproduces this run."""
        out = [f"# {h}" for h in header]
        for key in SCHEMA:
            v = self.values[key]
            if v is None:
                continue
            out.append(f"{key} = {format_value(v)}")
        return "\n".join(out) + "\n"


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (Gamma, InvGamma, PointMass)):
        return _prior_text(v)
    if isinstance(v, tuple):
        return " ".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text, source=None) -> RunConfig:
    """Parse config text; ``source`` anchors relative file paths."""
    base = Path(source).resolve().parent if source is not None else Path.cwd()
    values = {k: d for k, (_, d) in SCHEMA.items()}
    lines = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigInvalid("expected 'key = value'", line=no)
        key, val = (t.strip() for t in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigInvalid("unknown key", field=key, line=no)
        if key in lines:
            raise ConfigInvalid(f"duplicate key (first set on line {lines[key]})", field=key, line=no)
        try:
            parsed = SCHEMA[key][0](val)
        except (ValueError, TypeError) as exc:
            raise ConfigInvalid(f"bad value {val!r}: {exc}", field=key, line=no) from None
        if key in FILE_KEYS:
            parsed = str((base / parsed).resolve())
        values[key] = parsed
        lines[key] = no
    cfg = RunConfig(values, lines, Path(source) if source else None)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config: {exc.strerror}", field=str(path)) from None
    return parse_config(text, path)


def validate(cfg: RunConfig):
    v = cfg.values
    if v["case"] not in CASES:
        cfg.fail("case", f"case must be one of {', '.join(CASES)}")
    for key in ("prior.sigma2_f", "noise.sigma2", "covariates.sigma2_beta", "spacetime.variance"):
        if not v[key] > 0:
            cfg.fail(key, "variances must be positive")
    for key in ("prior.rho", "mesh.h", "spacetime.tau", "spacetime.kappa", "spacetime.dt", "demo.dt"):
        if not v[key] > 0:
            cfg.fail(key, "must be positive")
    for key in ("pde.D", "pde.r"):
        if v[key] < 0:
            cfg.fail(key, "must be non-negative")
    if v["prior.alpha"] not in (2, 4):
        cfg.fail("prior.alpha", "alpha must be 2 or 4")
    if v["mesh.buffer"] is not None and v["mesh.buffer"] < 0:
        cfg.fail("mesh.buffer", "buffer must be non-negative")
    if len(v["mesh.x"]) != 2 or not v["mesh.x"][0] < v["mesh.x"][1]:
        cfg.fail("mesh.x", "need two increasing numbers")
    if v["case"] == "steady-2d":
        if v["mesh.y"] is None and v["mesh.nodes_file"] is None:
            cfg.fail("mesh.y", "steady-2d needs mesh.y (or a mesh file)")
        if v["mesh.y"] is not None and (len(v["mesh.y"]) != 2 or not v["mesh.y"][0] < v["mesh.y"][1]):
            cfg.fail("mesh.y", "need two increasing numbers")
    if (v["mesh.nodes_file"] is None) != (v["mesh.cells_file"] is None):
        cfg.fail("mesh.cells_file", "mesh.nodes_file and mesh.cells_file go together")
    if v["covariates.kind"] not in ("none", "land-use"):
        cfg.fail("covariates.kind", "covariates.kind must be none or land-use")
    if v["covariates.kind"] == "land-use" and len(v["covariates.beta"]) != len(v["covariates.zones"]) + 1:
        cfg.fail("covariates.beta", "need one coefficient per land-use zone (zone boundaries + 1)")
    if v["mcmc.sigma2_update"] not in ("collapsed", "augmented"):
        cfg.fail("mcmc.sigma2_update", "must be collapsed or augmented")
    if v["spacetime.method"] not in ("auto", "precision", "smoother"):
        cfg.fail("spacetime.method", "must be auto, precision or smoother")
    if v["obs.file"] is not None and (v["obs.n"] is not None or v["spacetime.sensors"] is not None):
        key = "obs.n" if v["obs.n"] is not None else "spacetime.sensors"
        cfg.fail(key, "give exactly one observation source: obs.file or a simulated sensor count")
    if v["obs.n"] is not None and v["obs.n"] < 0:
        cfg.fail("obs.n", "must be non-negative")
    for key in FILE_KEYS:
        if v[key] is not None and not Path(v[key]).is_file():
            cfg.fail(key, f"file not found: {v[key]}")
    for key in ("accuracy.sizes",):
        s = v[key]
        if not s or any(x <= 0 for x in s) or any(b <= a for a, b in zip(s, s[1:])):
            cfg.fail(key, "sizes must be positive and increasing")


def require_observations(cfg: RunConfig):
    """The run needs exactly one observation source."""
    spacetime = cfg.case == "spacetime-1d"
    spec_key = "spacetime.sensors" if spacetime else "obs.n"
    has_spec = cfg[spec_key] is not None
    if cfg["obs.file"] is None and not has_spec:
        cfg.fail(spec_key, f"no observation source: set obs.file or {spec_key}")
