import pytest
from hypothesis import given, strategies as st

from relmerge.config import RunConfig, load_config, parse_config_text
from relmerge.errors import ConfigError


def test_defaults_round_trip_through_text(tmp_path):
    rc = RunConfig()
    path = rc.echo(tmp_path, "x")
    assert path.name == "x.config.txt"
    assert load_config(path) == rc


@given(st.integers(-10**9, 10**9), st.floats(allow_nan=False, allow_infinity=False), st.booleans(),
       st.text(st.characters(whitelist_categories=("Ll", "Nd")), max_size=8))
def test_modified_configs_round_trip(seed, lr, self_ref, url):
    rc = RunConfig(seed=seed, lr=lr, self_reference=self_ref, embedder_url=url)
    assert load_config(None, parse_config_text(rc.to_text())) == rc


def test_overrides_win_over_file(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# comment\nsteps = 10\n\nlr = 0.5  # trailing\n")
    rc = load_config(p, {"steps": 3})
    assert rc.steps == 3 and rc.lr == 0.5


@pytest.mark.parametrize("text", ["bogus = 1", "steps 10", "steps = ten", "steps = 1\nsteps = 2",
                                  "self_reference = maybe"])
def test_bad_configs_are_rejected(tmp_path, text):
    p = tmp_path / "c.txt"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p)


def test_missing_file_and_helpers(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.txt")
    rc = RunConfig(inject_layers="0,2")
    assert rc.layers(4) == (0, 2) and RunConfig().layers(4) is None
    with pytest.raises(ConfigError):
        RunConfig(inject_layers="7").layers(4)
    assert RunConfig().mixture_dict() == {1: 0.25, 2: 0.4, 3: 0.2, 4: 0.15}
    with pytest.raises(ConfigError):
        RunConfig(mixture="1-0.5").mixture_dict()
