import numpy as np
import pytest

from rotctl import scenario as scen
from rotctl.sim import SimConfig


def test_builtins_load_and_build():
    for name in scen.BUILTIN:
        sc = scen.build(scen.load_any(name), name=name)
        assert isinstance(sc.sim, SimConfig)
        assert sc.desired.theta_star(0.0).shape == (sc.params.grid_size,)


def test_empty_file_takes_defaults():
    config = scen.loads("")
    assert config["rod"]["density"] == 1070.0
    assert config["sim"]["stop_tol"] == 0.15


def test_dump_roundtrip():
    for name in scen.BUILTIN:
        config = scen.load_any(name)
        assert scen.loads(scen.dumps(config)) == config


def test_override_returns_new_config():
    config = scen.load_any("arc_replication_10kpa")
    new = scen.set_override(config, "target.pressure=20000")
    assert new["target"]["pressure"] == 20000.0
    assert config["target"]["pressure"] == 10000.0
    assert scen.set_override(config, "sim.stop_tol=inf")["sim"]["stop_tol"] == np.inf
    both = 'sim.gain_mode="k_omega_and_k_theta_free"'
    assert scen.set_override(config, both)["sim"]["gain_mode"] == "k_omega_and_k_theta_free"


@pytest.mark.parametrize("bad", ["target.pressure", "pressure=3", "rod.nope=1", "rod.density=-1"])
def test_bad_overrides(bad):
    with pytest.raises(scen.ConfigError):
        scen.set_override(scen.load_any("arc_replication_10kpa"), bad)


def test_error_names_key_and_line():
    text = "[sim]\nt_end = 1.0\n\n[rod]\nlength = 0.3\ndensity = -5.0\n"
    with pytest.raises(scen.ConfigError) as info:
        scen.loads(text, "case.toml")
    assert info.value.key == "[rod].density"
    assert info.value.line == 6
    assert str(info.value).startswith("case.toml:6: [rod].density")


@pytest.mark.parametrize("text, key", [
    ("[rods]\n", "[rods]"),
    ("[rod]\nlenght = 1\n", "[rod].lenght"),
    ("[rod]\ngrid_size = 10.5\n", "[rod].grid_size"),
    ("[sim]\nactuation_mode = \"magic\"\n", "[sim].actuation_mode"),
    ("[target]\nkind = \"equilibrium\"\npressure = 5e4\n", "[target].pressure"),
    ("[actuators]\nbraid_angle_deg = 90.0\n", "[actuators].braid_angle_deg"),
])
def test_invalid_fields_named(text, key):
    with pytest.raises(scen.ConfigError) as info:
        scen.loads(text)
    assert info.value.key == key


def test_malformed_toml_reports_line():
    with pytest.raises(scen.ConfigError) as info:
        scen.loads("[rod]\ndensity = = 3\n")
    assert info.value.line == 2


def test_seed_argument_overrides_observer_seed():
    config = scen.load_any("arc_replication_10kpa")
    assert scen.build(config, seed=7).observer.seed == 7
    assert config["observer"]["seed"] == 0
