"""Flat ``key = value`` run configuration with dotted section keys.

Format::

    # comment
    design.model = 1
    design.tau = (1,0,0,0); (0.5,-0.5,0.5,0)
    design.k = 1, 2
    run.reps = 1000

Blank lines and ``#`` comments are ignored; a key may appear once.  Every
key is typed by :data:`SCHEMA`; unknown keys and unparsable values raise
:class:`~edrel.errors.ConfigError` naming the line and the field.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError

__all__ = ["SCHEMA", "RunConfig", "parse_config", "load_config", "parse_value", "render_config"]


def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _str(s):
    return s.strip()


def _list(s):
    return tuple(t.strip() for t in s.split(",") if t.strip())


def _int_list(s):
    return tuple(int(t) for t in _list(s))


def _tau_list(s):
    out = []
    for chunk in s.split(";"):
        chunk = chunk.strip().strip("()").strip()
        if chunk:
            out.append(tuple(float(t) for t in chunk.split(",")))
    if not out:
        raise ValueError("empty tau list")
    return tuple(out)


def _terms(s):
    return _list(s)


# key -> (parser, default, help)
SCHEMA = {
    "design.table": (_int, None, "run the cell grid of a table (1-6) instead of design.model/tau/k"),
    "design.model": (_int, None, "simulation model 1, 2 or 3"),
    "design.tau": (_tau_list, None, "missingness coefficients; several vectors separated by ';'"),
    "design.k": (_int_list, None, "exponents k for Models 1-2, comma separated"),
    "design.n": (_int, 200, "sample size"),
    "design.y_dist": (_str, "chi2", "Model 3 distribution of y: chi2 or normal"),
    "design.working_propensity": (_terms, None, "override of the working propensity terms"),
    "design.working_regression": (_terms, None, "override of the working regression terms"),
    "run.reps": (_int, 1000, "Monte Carlo replicates per cell"),
    "run.seed": (_int, 20240601, "master seed"),
    "run.jobs": (_int, None, "worker processes (default: available cores)"),
    "run.estimators": (_list, None, "estimator tags"),
    "output.dir": (_str, "edrel-out", "output directory"),
    "inference.ci_level": (_float, 0.95, "Wald interval level"),
    "inference.bootstrap_b": (_int, 500, "bootstrap replicates (analyze)"),
    "estimator.weighting": (_str, "auto", "auto, identity or two-step"),
    "estimator.jacobian": (_str, "fd", "outer Jacobian of EDR: fd or analytic"),
    "estimator.cca_divisor": (_str, "n_complete", "CCA divisor: n_complete or n"),
    "estimator.rank_policy": (_str, "error", "rank-deficient EL constraints: error or drop"),
    "estimator.warm_start": (_bool, True, "warm-start the EL multiplier along the outer iteration"),
    "estimator.tol": (_float, 1e-8, "outer residual tolerance"),
    "estimator.max_iter": (_int, 100, "outer iteration limit"),
    "estimator.propensity_floor": (_float, 0.01, "threshold of the small-propensity diagnostic"),
    "data.path": (_str, None, "input CSV (analyze); 'synthetic' generates the stand-in dataset"),
    "data.outcome": (_str, None, "outcome column"),
    "data.group": (_str, None, "0/1 group column for the two-group analysis"),
    "data.covariates": (_list, None, "covariate columns"),
    "data.missing_token": (_str, "NA", "token marking a missing outcome"),
    "data.synthetic_seed": (_int, 1986, "seed of the synthetic stand-in dataset"),
    "model.propensity": (_terms, None, "propensity terms over covariate names, e.g. hisp, nodegr"),
    "model.regression": (_terms, None, "regression terms for the single-group analysis (or both groups)"),
    "model.regression.group1": (_terms, None, "regression terms for group 1"),
    "model.regression.group0": (_terms, None, "regression terms for group 0"),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    lines: dict = field(default_factory=dict)
    source: str = "<flags>"

    def get(self, key, default=None):
        if key not in SCHEMA:
            raise KeyError(key)
        if key in self.values:
            return self.values[key]
        d = SCHEMA[key][1]
        return d if default is None else default

    def has(self, key) -> bool:
        return key in self.values

    def set(self, key, value):
        if key not in SCHEMA:
            raise ConfigError(f"unknown field {key!r}", field=key)
        self.values[key] = value

    def echo(self) -> dict:
        return {k: _jsonable(v) for k, v in sorted(self.values.items())}


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(t) for t in v]
    return v


def parse_value(key, text, line=None):
    if key not in SCHEMA:
        raise ConfigError(f"unknown field {key!r}", line=line, field=key)
    try:
        return SCHEMA[key][0](text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value {text.strip()!r} for {key}: {exc}", line=line, field=key) from None


def parse_config(text: str, source="<string>") -> RunConfig:
    cfg = RunConfig(source=source)
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value' in {source}", line=no)
        key, _, val = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"empty key in {source}", line=no)
        if key in cfg.values:
            raise ConfigError(f"duplicate field {key!r} (first on line {cfg.lines[key]})", line=no, field=key)
        cfg.values[key] = parse_value(key, val, no)
        cfg.lines[key] = no
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, source=str(path))


def render_config(cfg: RunConfig) -> str:
    """Inverse of :func:`parse_config` for the values set in ``cfg``."""
    out = []
    for k, v in sorted(cfg.values.items()):
        if k == "design.tau":
            s = "; ".join("(" + ",".join(f"{t:g}" for t in tau) + ")" for tau in v)
        elif isinstance(v, tuple):
            s = ", ".join(str(t) for t in v)
        elif isinstance(v, bool):
            s = "true" if v else "false"
        else:
            s = str(v)
        out.append(f"{k} = {s}")
    return "\n".join(out) + "\n"
