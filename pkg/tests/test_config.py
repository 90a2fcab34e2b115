import math

import pytest

from walsh_lab.config import (
    EXPERIMENT_KINDS,
    ConfigError,
    load_config,
    parse_config,
    read_seed_override,
    serialize_config,
)
from walsh_lab.geometry import ORIGIN, TreePoint


BASE = """
[model]
atoms = [0, 1, 2]
weights = [0.5, 0.3, 0.2]
g = -1.0
sigma = 1.0

[sim]
horizon = 4.0
dt = 0.001
paths = 10
seed = 41

[experiment]
kind = "simulate"

[output]
directory = "artifacts"
"""


def test_parse_happy_path():
    config = parse_config(BASE, "base.toml")
    assert config.kind == "simulate"
    assert config.mu.ids == (0, 1, 2)
    assert config.mu.weights == (0.5, 0.3, 0.2)
    assert config.field.ray_ids == (0, 1, 2)
    assert config.sim.horizon == 4.0
    assert config.sim.dt == 0.001
    assert config.sim.path_count == 10
    assert config.sim.seed == 41
    assert config.start == ORIGIN
    assert config.output_dir == "artifacts"
    assert config.formats == ("csv", "json")
    assert config.params == {}


def test_parse_explicit_start_and_formats():
    text = BASE.replace('kind = "simulate"',
                        'kind = "simulate"\nstart = {ray = 1, radius = 2.5}')
    text = text.replace('directory = "artifacts"',
                        'directory = "artifacts"\nformats = ["json"]')
    config = parse_config(text)
    assert config.start == TreePoint(1, 2.5)
    assert config.formats == ("json",)


def test_seed_override_parameter():
    config = parse_config(BASE, seed_override=7)
    assert config.sim.seed == 7
    assert config.raw["sim"]["seed"] == 41  # raw tree keeps the file's value


def test_coefficient_forms():
    text = BASE.replace(
        "g = -1.0",
        'g = [-1.0, {family = "affine", a = -0.5, b = -0.1}, '
        '{family = "tabulated", knots = [0.0, 1.0], values = [-2.0, -1.0]}]',
    ).replace("sigma = 1.0", "sigma = [1.0, 2.0, 1.5]\nell = [4.0, 8.0, 2.0]")
    config = parse_config(text)
    assert config.field.per_ray[0].g.constant_value() == -1.0
    assert float(config.field.per_ray[1].g(2.0)) == pytest.approx(-0.7)
    assert float(config.field.per_ray[2].g(0.5)) == pytest.approx(-1.5)
    assert config.field.per_ray[1].sigma.constant_value() == 2.0
    assert config.field.per_ray[2].ell == 2.0


def test_scalar_ell_applies_to_every_ray():
    config = parse_config(BASE.replace("sigma = 1.0", "sigma = 1.0\nell = 6.0"))
    assert all(config.field.per_ray[i].ell == 6.0 for i in (0, 1, 2))
    no_ell = parse_config(BASE)
    assert all(math.isinf(no_ell.field.per_ray[i].ell) for i in (0, 1, 2))


@pytest.mark.parametrize(
    "mangle, fragment",
    [
        (lambda t: t.replace("[model]", "[model]\nbogus = 1"), "bogus"),
        (lambda t: t.replace('kind = "simulate"', 'kind = "nonsense"'), "kind"),
        (lambda t: t.replace("[0.5, 0.3, 0.2]", "[0.5, 0.3]"), "weights"),
        (lambda t: t.replace("[0.5, 0.3, 0.2]", "[0.5, 0.3, 0.4]"), "sum"),
        (lambda t: t.replace("atoms = [0, 1, 2]", "atoms = [0, 1, 1]"), "atoms"),
        (lambda t: t.replace("dt = 0.001", "dt = -0.001"), "dt"),
        (lambda t: t.replace("[sim]\n", "[sim]\nunknown_knob = 2\n"), "unknown_knob"),
        (lambda t: t.replace("\n[output]\ndirectory = \"artifacts\"\n", "\n"), "output"),
        (lambda t: t.replace('kind = "simulate"', 'kind = "simulate"\nthin = 0'), "thin"),
        (lambda t: t.replace('kind = "simulate"', 'kind = "tv-decay"'), "times"),
        (lambda t: t.replace('kind = "simulate"',
                             'kind = "simulate"\nstart = {ray = 9, radius = 1.0}'), "start"),
        (lambda t: t.replace("dt = 0.001", "dt = 0.001\nlocal_time_epsilon = 0.005"),
         "local_time_epsilon"),
    ],
)
def test_rejections(mangle, fragment):
    with pytest.raises(ConfigError) as err:
        parse_config(mangle(BASE), "bad.toml")
    assert fragment in str(err.value)
    assert str(err.value).startswith("bad.toml:")


def test_error_line_points_at_offender():
    text = BASE.replace("[sim]\n", "[sim]\nunknown_knob = 2\n")
    with pytest.raises(ConfigError) as err:
        parse_config(text, "bad.toml")
    line = int(str(err.value).split(":")[1])
    assert text.splitlines()[line - 1].startswith("unknown_knob")


def test_toml_syntax_error_reports_line():
    text = BASE.replace("dt = 0.001", "dt = = 0.001")
    with pytest.raises(ConfigError) as err:
        parse_config(text, "bad.toml")
    assert "not valid TOML" in str(err.value)
    line = int(str(err.value).split(":")[1])
    assert "= =" in text.splitlines()[line - 1]


def _with_kind(kind, extra="", sim_extra=""):
    text = BASE.replace('kind = "simulate"', f'kind = "{kind}"\n{extra}')
    return text.replace("seed = 41", f"seed = 41\n{sim_extra}")


@pytest.mark.parametrize(
    "text, fragment",
    [
        (_with_kind("tv-decay", "times = [1.0, 2.0]",
                    sim_extra="local_time_epsilon = 0.5").replace(
                        "dt = 0.001", "dt = 0.05"), "tv-decay needs dt"),
        (_with_kind("tv-decay", "times = [1.0, 9.0]"), "within the horizon"),
        (_with_kind("generator-check", "h_values = [0.5, 5.0]"), "within the horizon"),
        (_with_kind("excursion-poisson",
                    "delta = 0.01\nlevel = 1.0\nreplications = 50"),
         "must exceed"),
        (_with_kind("partition-check", "subsets = [[0], [7]]"), "not a model atom"),
        (_with_kind("coupling-holder", "pairs = 4\nq = 2.0\np = 2.0"), "inadmissible"),
        (_with_kind("coupling-holder", "pairs = 4\nrho = 0.9"), "inadmissible"),
        (_with_kind("lyapunov", "closed_form = true").replace(
            "g = -1.0", 'g = {family = "affine", a = -1.0, b = -0.2}'),
         "closed_form"),
        (_with_kind("lyapunov", "closed_form = true").replace(
            "sigma = 1.0", "sigma = [1.0, 1.0, 2.0]"), "angular-independent"),
        (_with_kind("lyapunov", "").replace("sigma = 1.0", "sigma = [1.0, 1.0, 2.0]"),
         "angular-independent"),
    ],
)
def test_kind_constraints(text, fragment):
    with pytest.raises(ConfigError) as err:
        parse_config(text, "bad.toml")
    assert fragment in str(err.value)


def test_coupling_holder_needs_two_atoms():
    text = _with_kind("coupling-holder", "pairs = 4")
    text = text.replace("atoms = [0, 1, 2]", "atoms = [0]")
    text = text.replace("weights = [0.5, 0.3, 0.2]", "weights = [1.0]")
    with pytest.raises(ConfigError) as err:
        parse_config(text, "bad.toml")
    assert "two atoms" in str(err.value)


def test_closed_form_requires_infinite_rays():
    text = _with_kind("lyapunov", "closed_form = true")
    text = text.replace("sigma = 1.0", "sigma = 1.0\nell = 5.0")
    with pytest.raises(ConfigError):
        parse_config(text, "bad.toml")


# ------------------------------------------------------------- round trip


def test_round_trip_is_identity_on_the_tree():
    config = parse_config(BASE, "base.toml")
    text = serialize_config(config)
    again = parse_config(text, "serialized.toml")
    assert again.raw == config.raw


def test_serialization_is_idempotent():
    first = serialize_config(parse_config(BASE))
    second = serialize_config(parse_config(first))
    assert first == second


def test_serialization_canonicalizes_key_order():
    reordered = """
[output]
directory = "artifacts"

[sim]
seed = 41
dt = 0.001
paths = 10
horizon = 4.0

[experiment]
kind = "simulate"

[model]
sigma = 1.0
g = -1.0
weights = [0.5, 0.3, 0.2]
atoms = [0, 1, 2]
"""
    assert serialize_config(parse_config(reordered)) == \
        serialize_config(parse_config(BASE))


def test_serialization_survives_tables_and_strings(tmp_path):
    text = BASE.replace(
        "g = -1.0",
        'g = [{family = "tabulated", knots = [0.0, 0.5], values = [-1.0, -2.0]}, '
        "-1.5, -2.0]",
    ).replace('directory = "artifacts"', 'directory = "artifacts/run \\"A\\""')
    config = parse_config(text)
    round_tripped = parse_config(serialize_config(config))
    assert round_tripped.raw == config.raw
    path = tmp_path / "case.toml"
    path.write_text(serialize_config(config), encoding="utf-8")
    assert load_config(str(path)).raw == config.raw


# ------------------------------------------------------------ environment


def test_read_seed_override():
    assert read_seed_override({}) is None
    assert read_seed_override({"WALSH_LAB_SEED": "17"}) == 17
    with pytest.raises(ConfigError):
        read_seed_override({"WALSH_LAB_SEED": "seven"})
    with pytest.raises(ConfigError):
        read_seed_override({"WALSH_LAB_SEED": "-3"})


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError) as err:
        load_config(str(tmp_path / "absent.toml"))
    assert "cannot read config" in str(err.value)


def test_every_kind_has_a_runner():
    from walsh_lab.experiments import _RUNNERS

    assert set(_RUNNERS) == set(EXPERIMENT_KINDS)
