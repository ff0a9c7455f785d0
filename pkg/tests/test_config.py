import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfcswarm import config as cfgmod
from mfcswarm.config import ConfigError, RunConfig


def test_empty_file_gives_defaults():
    assert cfgmod.loads("") == RunConfig()


def test_default_vicsek_values():
    c = cfgmod.default_config("vicsek", "torus")
    e = c.env
    assert (e.n_agents, e.horizon, e.manifold) == (50, 200, "torus")
    assert c.ppo.lr == 5e-5 and c.ppo.batch_size == 4000 and c.ppo.minibatch_size == 1000
    assert c.policy.hidden == [256, 256]
    s = c.setup()
    assert s.features.n_anchors == 125 and s.xi.dim == 75
    assert s.features.sigma_pos == pytest.approx(0.12 / math.sqrt(2))


def test_default_aggregation_and_kuramoto():
    a = cfgmod.default_config("aggregation", "box", dim=3)
    assert a.env.dim == 3 and a.env.objective == "aggregate"
    k = cfgmod.default_config("kuramoto", "moebius")
    assert k.env.env == "kuramoto" and k.env.v0 == 0.0
    with pytest.raises(ConfigError):
        cfgmod.default_config("swarmalator")


def test_round_trip_defaults(tmp_path):
    c = cfgmod.default_config("aggregation", "box", dim=4)
    cfgmod.save(c, tmp_path / "c.toml")
    assert cfgmod.load(tmp_path / "c.toml") == c
    assert cfgmod.loads(cfgmod.dumps(c)) == c


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 500), lr=st.floats(1e-6, 1e-2), seed=st.integers(0, 2**31),
       kind=st.sampled_from(["torus", "moebius", "klein", "projective"]),
       ppa=st.integers(1, 7), scale=st.one_of(st.none(), st.floats(0.01, 1.0)),
       hidden=st.lists(st.integers(1, 64), min_size=1, max_size=3))
def test_round_trip_property(n, lr, seed, kind, ppa, scale, hidden):
    c = RunConfig().replace(env={"n_agents": n, "manifold": kind}, ppo={"lr": lr}, run={"seed": seed},
                            policy={"points_per_axis": ppa, "scale": scale, "hidden": hidden})
    assert cfgmod.loads(cfgmod.dumps(c)) == c


def test_integer_for_float_is_accepted():
    c = cfgmod.loads("[ppo]\nlr = 1\n[env]\nv0 = 0\n")
    assert c.ppo.lr == 1.0 and isinstance(c.ppo.lr, float)


@pytest.mark.parametrize("text", [
    "[ppo]\nlearning_rate = 0.1\n",
    "[optimizer]\nlr = 0.1\n",
    "ppo = 3\n",
    "[env]\nmanifold = \"sphere\"\n",
    "[ppo]\nminibatch_size = 333\n",
    "[run]\neval_agents = 5\n",
    "[env\n",
])
def test_bad_configs_rejected(text):
    with pytest.raises(ConfigError):
        cfgmod.loads(text)


def test_missing_file_names_path(tmp_path):
    p = tmp_path / "nope.toml"
    with pytest.raises(ConfigError, match="nope.toml"):
        cfgmod.load(p)


def test_replace_sections():
    c = RunConfig().replace(env={"n_agents": 7}, run={"seed": 3})
    assert c.env.n_agents == 7 and c.run.seed == 3
    assert c.ppo == RunConfig().ppo
