"""Experiment configuration: TOML parsing, validation, and serialization.

A config file has four blocks.  ``[model]`` declares the spider (atom
ids, spinning weights, per-ray drift/dispersion families, optional
domain radii), ``[sim]`` the grid and seed, ``[experiment]`` the kind
plus kind-specific parameters, and ``[output]`` the artifact directory.
Everything is schema-checked on load with unknown keys rejected, and
errors point at the offending line of the source file.

Serialization is deterministic: canonical block order, sorted keys,
shortest-roundtrip floats.  ``parse -> serialize -> parse`` is the
identity on the parsed tree.
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass
from typing import Optional

import jsonschema
import tomli

from .analysis import bound_constants, holder_exponent
from .geometry import ORIGIN, SpinningMeasure, TreePoint
from .model import CoefficientField, RadialCoefficient, RayCoefficients
from .simulate import SimConfig

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "EXPERIMENT_KINDS",
    "load_config",
    "parse_config",
    "read_seed_override",
    "serialize_config",
]

EXPERIMENT_KINDS = (
    "simulate",
    "stationary",
    "occupation",
    "tv-decay",
    "coupling-holder",
    "lyapunov",
    "partition-check",
    "generator-check",
    "excursion-poisson",
)

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NUM_ARRAY = {"type": "array", "items": _NUM, "minItems": 1}

_COEF_TABLE = {
    "type": "object",
    "oneOf": [
        {
            "properties": {"family": {"const": "constant"}, "c": _NUM},
            "required": ["family", "c"],
            "additionalProperties": False,
        },
        {
            "properties": {"family": {"const": "affine"}, "a": _NUM, "b": _NUM},
            "required": ["family", "a", "b"],
            "additionalProperties": False,
        },
        {
            "properties": {
                "family": {"const": "tabulated"},
                "knots": _NUM_ARRAY,
                "values": _NUM_ARRAY,
            },
            "required": ["family", "knots", "values"],
            "additionalProperties": False,
        },
    ],
}

_COEF = {
    "oneOf": [
        _NUM,
        _COEF_TABLE,
        {"type": "array", "items": {"oneOf": [_NUM, _COEF_TABLE]}, "minItems": 1},
    ]
}

_START = {
    "type": "object",
    "properties": {"ray": {"type": "integer"}, "radius": _POS},
    "required": ["ray", "radius"],
    "additionalProperties": False,
}

_TIMES = {"type": "array", "items": _POS, "minItems": 1}

_BASE_SCHEMA = {
    "type": "object",
    "properties": {
        "model": {
            "type": "object",
            "properties": {
                "atoms": {
                    "type": "array",
                    "items": {"type": "integer", "minimum": 0},
                    "minItems": 1,
                },
                "weights": {"type": "array", "items": _POS, "minItems": 1},
                "g": _COEF,
                "sigma": _COEF,
                "ell": {
                    "oneOf": [_POS, {"type": "array", "items": _POS, "minItems": 1}]
                },
            },
            "required": ["atoms", "weights", "g", "sigma"],
            "additionalProperties": False,
        },
        "sim": {
            "type": "object",
            "properties": {
                "horizon": _POS,
                "dt": _POS,
                "paths": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "local_time_epsilon": _POS,
            },
            "required": ["horizon", "dt", "seed"],
            "additionalProperties": False,
        },
        "experiment": {
            "type": "object",
            "properties": {"kind": {"enum": list(EXPERIMENT_KINDS)}},
            "required": ["kind"],
            "additionalProperties": True,
        },
        "output": {
            "type": "object",
            "properties": {
                "directory": {"type": "string", "minLength": 1},
                "formats": {
                    "type": "array",
                    "items": {"enum": ["csv", "json"]},
                    "minItems": 1,
                },
            },
            "required": ["directory"],
            "additionalProperties": False,
        },
    },
    "required": ["model", "sim", "experiment", "output"],
    "additionalProperties": False,
}

_KIND_SCHEMAS = {
    "simulate": {"start": _START, "thin": {"type": "integer", "minimum": 1}},
    "stationary": {
        "grid_max": _POS,
        "grid_points": {"type": "integer", "minimum": 16},
    },
    "occupation": {
        "start": _START,
        "bins": {"type": "integer", "minimum": 1},
        "burn_in": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "fraction_tolerance": _POS,
        "tv_tolerance": _POS,
        "grid_max": _POS,
    },
    "tv-decay": {
        "start": _START,
        "times": _TIMES,
        "bins": {"type": "integer", "minimum": 4},
        "rate_min": _POS,
        "rate_max": _POS,
        "weighted": {"type": "boolean"},
        "grid_max": _POS,
    },
    "coupling-holder": {
        "p": _POS,
        "q": _POS,
        "rho": _POS,
        "epsilons": {
            "type": "array",
            "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "minItems": 2,
        },
        "pairs": {"type": "integer", "minimum": 2},
        "min_slope": _POS,
    },
    "lyapunov": {"closed_form": {"type": "boolean"}, "tolerance": _POS},
    "partition-check": {
        "subsets": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            "minItems": 1,
        },
        "tolerance": _POS,
    },
    "generator-check": {
        "start": _START,
        "function": {"enum": ["r_squared", "cosine_well"]},
        "h_values": _TIMES,
    },
    "excursion-poisson": {
        "delta": _POS,
        "level": _POS,
        "replications": {"type": "integer", "minimum": 10},
    },
}

_KIND_REQUIRED = {
    "tv-decay": ["times"],
    "coupling-holder": ["pairs"],
    "partition-check": ["subsets"],
    "generator-check": ["h_values"],
    "excursion-poisson": ["delta", "level", "replications"],
}


class ConfigError(Exception):
    """Invalid configuration, anchored to a source line."""

    def __init__(self, source: str, line: int, message: str) -> None:
        self.source = source
        self.line = line
        self.message = message
        super().__init__(f"{source}:{line}: {message}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description plus the constructed domain objects."""

    raw: dict
    source: str
    field: CoefficientField
    mu: SpinningMeasure
    sim: SimConfig
    kind: str
    params: dict
    start: TreePoint
    output_dir: str
    formats: tuple


def _anchor_line(text: str, path: tuple) -> int:
    """Best-effort line of the deepest named key on a validation path."""
    names = [p for p in path if isinstance(p, str)]
    lines = text.splitlines()
    for name in reversed(names):
        key = re.compile(rf"^\s*(\[[\w.\"]*)?\b{re.escape(name)}\b")
        for idx, line in enumerate(lines, start=1):
            if key.match(line):
                return idx
    return 1


def _schema_check(instance, schema, text: str, source: str, prefix=()) -> None:
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(instance), key=lambda e: len(e.absolute_path))
    if errors:
        err = errors[-1]
        path = prefix + tuple(err.absolute_path)
        where = ".".join(str(p) for p in path) or "top level"
        anchor = path
        if err.validator == "additionalProperties":
            unknown = re.findall(r"'([^']+)'", err.message)
            if unknown:
                anchor = path + (unknown[0],)
        raise ConfigError(source, _anchor_line(text, anchor), f"{where}: {err.message}")


def _coefficient_list(spec, count: int, name: str) -> list:
    """Expand a scalar / table / list coefficient spec to one entry per ray."""
    def one(entry):
        if isinstance(entry, dict):
            return RadialCoefficient.from_config(entry)
        return RadialCoefficient.constant(float(entry))

    if isinstance(spec, list):
        if len(spec) != count:
            raise ValueError(f"{name} must list one entry per atom, got {len(spec)}")
        return [one(e) for e in spec]
    return [one(spec)] * count


def _build_field(model: dict) -> tuple:
    atoms = [int(a) for a in model["atoms"]]
    if len(set(atoms)) != len(atoms):
        raise ValueError("atoms must be distinct")
    weights = [float(w) for w in model["weights"]]
    if len(weights) != len(atoms):
        raise ValueError("weights must list one entry per atom")
    mu = SpinningMeasure.from_weights(weights, ids=atoms)
    gs = _coefficient_list(model["g"], len(atoms), "g")
    sigmas = _coefficient_list(model["sigma"], len(atoms), "sigma")
    ell_spec = model.get("ell", math.inf)
    if isinstance(ell_spec, list):
        if len(ell_spec) != len(atoms):
            raise ValueError("ell must list one entry per atom")
        ells = [float(e) for e in ell_spec]
    else:
        ells = [float(ell_spec)] * len(atoms)
    per_ray = {
        a: RayCoefficients(g=g, sigma=s, ell=e)
        for a, g, s, e in zip(atoms, gs, sigmas, ells)
    }
    return CoefficientField(per_ray=per_ray), mu


def _build_start(params: dict, mu: SpinningMeasure) -> TreePoint:
    spec = params.get("start")
    if spec is None:
        return ORIGIN
    ray = int(spec["ray"])
    if ray not in mu.ids:
        raise ValueError(f"start ray {ray} is not an atom of the measure")
    return TreePoint(ray, float(spec["radius"]))


def _check_kind_constraints(kind, params, sim, field, mu, fail) -> None:
    """Cross-block requirements that the per-block schemas cannot express."""
    if kind == "tv-decay":
        if sim.dt > 1e-2 + 1e-15:
            raise fail("sim: tv-decay needs dt <= 0.01 to keep the snapshot "
                       "bias below the histogram noise", "sim", "dt")
        if max(params["times"]) > sim.horizon + 1e-12:
            raise fail("experiment: snapshot times must lie within the horizon",
                       "experiment", "times")
    elif kind == "generator-check":
        if max(params["h_values"]) > sim.horizon + 1e-12:
            raise fail("experiment: h_values must lie within the horizon",
                       "experiment", "h_values")
    elif kind == "excursion-poisson":
        if sim.local_time_epsilon >= params["delta"]:
            raise fail("experiment: delta must exceed sim.local_time_epsilon",
                       "experiment", "delta")
    elif kind == "partition-check":
        for subset in params["subsets"]:
            for i in subset:
                if int(i) not in mu.ids:
                    raise fail(f"experiment: subset ray {i} is not a model atom",
                               "experiment", "subsets")
    elif kind == "coupling-holder":
        if len(mu.ids) < 2:
            raise fail("model: coupling experiments need at least two atoms",
                       "model", "atoms")
        try:
            p = float(params.get("p", 2.0))
            q = float(params.get("q", 1.0))
            rho = float(params.get("rho", holder_exponent(p, 1.0)))
            admissible = bound_constants(p, q, rho, sim.horizon).admissible
        except ValueError:
            admissible = False
        if not admissible:
            raise fail("experiment: inadmissible (p, q, rho) combination",
                       "experiment", "rho" if "rho" in params else "p")
    elif kind == "lyapunov":
        if not field.sigma_angular_independent():
            raise fail("model: rate certification needs an angular-"
                       "independent dispersion", "model", "sigma")
        if not params.get("closed_form", False):
            return
        # sigma is shared across rays already (angular independence)
        for ray_id in field.ray_ids:
            entry = field.per_ray[ray_id]
            ok = (entry.g.is_constant and entry.sigma.is_constant
                  and math.isinf(entry.ell) and entry.g.constant_value() < 0)
            if not ok:
                raise fail("experiment: closed_form needs constant negative "
                           "drift and infinite rays", "experiment", "closed_form")


def parse_config(text: str, source: str = "<config>",
                 seed_override: Optional[int] = None) -> ExperimentConfig:
    """Parse and validate a TOML experiment description."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as err:
        line = 1
        match = re.search(r"line (\d+)", str(err))
        if match:
            line = int(match.group(1))
        raise ConfigError(source, line, f"not valid TOML: {err}") from None
    _schema_check(raw, _BASE_SCHEMA, text, source)
    kind = raw["experiment"]["kind"]
    params = {k: v for k, v in raw["experiment"].items() if k != "kind"}
    kind_schema = {
        "type": "object",
        "properties": _KIND_SCHEMAS[kind],
        "required": _KIND_REQUIRED.get(kind, []),
        "additionalProperties": False,
    }
    _schema_check(params, kind_schema, text, source, prefix=("experiment",))

    def fail(message: str, *path: str) -> ConfigError:
        return ConfigError(source, _anchor_line(text, path), message)

    try:
        field, mu = _build_field(raw["model"])
    except ValueError as err:
        raise fail(f"model: {err}", "model", str(err).split()[0]) from None
    sim_block = raw["sim"]
    if seed_override is None:
        seed = int(sim_block["seed"])
    else:
        seed = int(seed_override)
    kwargs = {}
    if "local_time_epsilon" in sim_block:
        kwargs["local_time_epsilon"] = float(sim_block["local_time_epsilon"])
    try:
        sim = SimConfig(
            horizon=float(sim_block["horizon"]),
            dt=float(sim_block["dt"]),
            seed=seed,
            path_count=int(sim_block.get("paths", 1)),
            **kwargs,
        )
    except ValueError as err:
        raise fail(f"sim: {err}", "sim", str(err).split()[0]) from None
    try:
        start = _build_start(params, mu)
    except ValueError as err:
        raise fail(f"experiment: {err}", "experiment", "start") from None
    _check_kind_constraints(kind, params, sim, field, mu, fail)
    output = raw["output"]
    formats = tuple(output.get("formats", ["csv", "json"]))
    return ExperimentConfig(
        raw=raw,
        source=source,
        field=field,
        mu=mu,
        sim=sim,
        kind=kind,
        params=params,
        start=start,
        output_dir=output["directory"],
        formats=formats,
    )


def load_config(path: str, seed_override: Optional[int] = None) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            text = handle.read()
    except OSError as err:
        raise ConfigError(str(path), 1, f"cannot read config: {err.strerror}") from None
    return parse_config(text, source=str(path), seed_override=seed_override)


def read_seed_override(environ=None) -> Optional[int]:
    """Seed override from WALSH_LAB_SEED, validated."""
    env = os.environ if environ is None else environ
    value = env.get("WALSH_LAB_SEED")
    if value is None or value == "":
        return None
    try:
        seed = int(value)
    except ValueError:
        raise ConfigError("WALSH_LAB_SEED", 1,
                          f"seed override must be an integer, got {value!r}") from None
    if seed < 0:
        raise ConfigError("WALSH_LAB_SEED", 1, "seed override must be nonnegative")
    return seed


# ------------------------------------------------------------ serialization


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return repr(value)
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if math.isnan(value):
            return "nan"
        text = repr(value)
        return text if ("." in text or "e" in text or "E" in text) else text + ".0"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, list):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    if isinstance(value, dict):
        inner = ", ".join(f"{k} = {_format_value(value[k])}" for k in sorted(value))
        return "{" + inner + "}"
    raise TypeError(f"cannot serialize {type(value).__name__} to TOML")


_BLOCK_ORDER = ("model", "sim", "experiment", "output")


def _block_keys(name: str, block: dict) -> list:
    keys = sorted(block)
    if name == "experiment" and "kind" in block:
        keys.remove("kind")
        keys.insert(0, "kind")
    return keys


def serialize_config(config) -> str:
    """Deterministic TOML text for a parsed config tree.

    Accepts an :class:`ExperimentConfig` or its raw dict.  Blocks come
    in canonical order with sorted keys, so equal trees serialize to
    equal bytes.
    """
    raw = config.raw if isinstance(config, ExperimentConfig) else config
    blocks = [name for name in _BLOCK_ORDER if name in raw]
    blocks += sorted(k for k in raw if k not in _BLOCK_ORDER)
    lines = []
    for name in blocks:
        block = raw[name]
        lines.append(f"[{name}]")
        for key in _block_keys(name, block):
            lines.append(f"{key} = {_format_value(block[key])}")
        lines.append("")
    return "\n".join(lines)
