import pytest
from hypothesis import given
from hypothesis import strategies as st

from ldprecon.config import RunConfig, build_config, load_config, parse_pairs, require
from ldprecon.exceptions import ConfigError


def test_defaults_match_reference_setup():
    cfg = RunConfig()
    assert cfg.image_shape == (3, 32, 32)
    assert (cfg.batch, cfg.units, cfg.bias_copies, cfg.rounds) == (8, 256, 100, 1000)
    assert cfg.ldp().sigma == pytest.approx(0.002)
    assert cfg.structure().K == 256
    assert cfg.attack().weights.w_mu == 1e6


def test_parse_comments_and_types(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# header\nepsilon = 5  # inline\n\nsweep_values=1,5,10\noptimize=no\n")
    cfg = load_config(path, ["batch=4"])
    assert cfg.epsilon == 5.0 and cfg.batch == 4 and cfg.optimize is False
    assert cfg.sweep_values == (1.0, 5.0, 10.0)


@pytest.mark.parametrize("line,needle", [("nope=1", "'nope'"), ("epsilon=", "'epsilon'"),
                                         ("just text", "key=value")])
def test_parse_errors_name_the_problem(line, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_pairs([line])


def test_bad_values_and_validation():
    with pytest.raises(ConfigError, match="'batch'"):
        build_config({"batch": "eight"})
    with pytest.raises(ConfigError, match="'batch'"):
        build_config({"batch": "300"})
    with pytest.raises(ConfigError, match="'sweep_axis'"):
        build_config({"sweep_axis": "lr"})
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/run.cfg")


def test_require():
    with pytest.raises(ConfigError, match="missing required key 'sweep_axis'"):
        require(RunConfig(), "sweep_axis")
    require(RunConfig(sweep_axis="epsilon"), "sweep_axis")


@given(st.floats(0.01, 100), st.integers(1, 16), st.booleans())
def test_text_echo_round_trips(eps, batch, denoise):
    cfg = RunConfig(epsilon=eps, batch=batch, denoise=denoise, fl_users=(2, 7))
    assert load_config(None, cfg.to_text().splitlines()) == cfg
