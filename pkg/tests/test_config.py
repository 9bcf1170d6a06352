"""Tests for the flat key = value run configuration."""

import pytest

from gradicon.config import ConfigError, RunConfig, echo, load_config, parse_config, set_values


class TestParse:
    """Reading configuration text."""

    def test_defaults(self):
        cfg = parse_config("")
        assert cfg == RunConfig() and cfg.size == 64 and cfg.lam is None

    def test_values_comments_and_alias(self):
        cfg = parse_config("# desk run\nsize = 32  # smaller\nlambda = 2.5\naugment = yes\nreg = icon\n")
        assert (cfg.size, cfg.lam, cfg.augment, cfg.reg) == (32, 2.5, True, "icon")

    def test_auto_lambda(self):
        assert parse_config("lambda = auto").lam is None

    def test_unknown_key_suggests(self):
        with pytest.raises(ConfigError, match=r"<config>:2: unknown key 'itres'; did you mean 'iters'\?"):
            parse_config("size = 32\nitres = 5")

    def test_malformed_line(self):
        with pytest.raises(ConfigError, match=":1: expected 'key = value'"):
            parse_config("size 32")

    def test_duplicate(self):
        with pytest.raises(ConfigError, match="already set on line 1"):
            parse_config("seed = 1\nseed = 2")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="bad value for size"):
            parse_config("size = big")
        with pytest.raises(ConfigError, match="expected true or false"):
            parse_config("augment = maybe")

    @pytest.mark.parametrize(
        "line, message",
        [
            ("iters = 0", "iters must be at least 1"),
            ("stages = 3", "stages must be 1 or 2"),
            ("reg = tv", "reg must be one of"),
            ("sim = ncc", "sim must be mse or lncc"),
            ("regularizers = icon,tv", "unknown tv"),
            ("size = 40", "divisible by 16"),
            ("holdout = 500", "must be smaller than images"),
            ("sweep_seeds = 0,x", "comma separated list"),
            ("lambda = -1", "lam must be non-negative"),
            ("probe_hi = 1e-4", "must exceed probe_lo"),
        ],
    )
    def test_validation(self, line, message):
        with pytest.raises(ConfigError, match=message):
            parse_config(line)


class TestFiles:
    """Loading, echoing and overriding."""

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.cfg")

    def test_echo_round_trip(self, tmp_path):
        cfg = parse_config("size = 32\nlevels = 2\nlambda = 0.1\nlam0_icon = 1e4\naugment = true\nsweep_seeds = 0,1")
        path = tmp_path / "echo.cfg"
        path.write_text(echo(cfg))
        assert load_config(path) == cfg
        assert "lambda = 0.1" in echo(cfg) and "lam_icon = auto" in echo(cfg)

    def test_set_values(self):
        cfg = set_values(RunConfig(), {"seed": "7", "lambda": 3.0})
        assert cfg.seed == 7 and cfg.lam == 3.0
        with pytest.raises(ConfigError, match="override: unknown key"):
            set_values(RunConfig(), {"sede": 1})

    def test_derived_objects(self):
        cfg = parse_config("reg = bending\nlambda = 0.5\nregularizers = icon, gradicon\nlam0_icon = 9")
        train = cfg.train_config(stages=1)
        assert train.reg.kind == "bending" and train.lam == 0.5 and train.stages == 1
        assert cfg.regularizer_list() == ["icon", "gradicon"] and cfg.lam0() == {"icon": 9.0}
        assert cfg.seed_list("converge_seeds") == [0, 1, 2]
        assert cfg.warp_spec().landmarks == cfg.landmarks
