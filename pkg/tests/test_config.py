import pytest

from sfit.config import RunConfig, dump_config, load_config, parse_config
from sfit.errors import ConfigError


def test_defaults():
    cfg = RunConfig("train_sfit")
    assert cfg.epochs == 10 and cfg.batch_size == 16 and cfg.base_lr == 3e-4
    assert (cfg.beta1, cfg.beta2, cfg.adam_eps) == (0.9, 0.999, 1e-8)
    w = cfg.weights
    assert (w.w_kd, w.w_rp, w.w_style, w.w_batch, w.w_pixel, w.w_bn) == (1, 1, 0, 0, 0, 0)


def test_round_trip(tmp_path):
    cfgs = [RunConfig("train_source", seed=3, epochs=2), RunConfig("train_sfit", w_rp=0.0, w_style=1.0, out="x")]
    (tmp_path / "c.toml").write_text(dump_config(*cfgs))
    back = load_config(tmp_path / "c.toml")
    assert back == {c.stage: c for c in cfgs}


def test_unknown_key():
    with pytest.raises(ConfigError, match="unknown keys"):
        parse_config("[stage.train_source]\nepochz = 3\n")


def test_unknown_stage_and_table():
    with pytest.raises(ConfigError):
        parse_config("[stage.bogus]\nepochs = 3\n")
    with pytest.raises(ConfigError):
        parse_config("[other]\nx = 1\n")


@pytest.mark.parametrize("text", ["base_lr = 0.0", "epochs = -2", "w_kd = -1.0", "seed = 'a'", "adapt_method = 'dann'"])
def test_invalid_values(text):
    with pytest.raises(ConfigError):
        parse_config(f"[stage.train_sfit]\n{text}\n")


def test_int_accepted_for_float():
    assert parse_config("[stage.train_sfit]\nw_rp = 0\n")["train_sfit"].w_rp == 0.0
