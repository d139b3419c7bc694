import pytest

from sbp.config import config_to_text, default_config, parse_config
from sbp.errors import ConfigurationError


class TestParse:
    def test_defaults_from_empty(self):
        cfg = parse_config("")
        assert cfg.model.kind == "mlp"
        assert cfg.sbp.keep_ratio == 0.5
        assert cfg.train.batch_size == 16

    def test_overrides_and_comments(self):
        cfg = parse_config("""
        # a comment
        model.kind = vit
        model.grid = 4x4
        sbp.mode = query_only
        train.lr = 0.25
        sbp.resample_each_step = false
        """)
        assert cfg.model.kind == "vit"
        assert cfg.model.grid == (4, 4)
        assert cfg.sbp.mode == "query_only"
        assert cfg.train.lr == 0.25
        assert cfg.sbp.resample_each_step is False

    def test_unknown_section_is_error(self):
        with pytest.raises(ConfigurationError, match="unknown section"):
            parse_config("optimizer.lr = 0.1")

    def test_unknown_key_is_error(self):
        with pytest.raises(ConfigurationError, match="unknown key"):
            parse_config("model.depthh = 3")

    def test_missing_section_prefix(self):
        with pytest.raises(ConfigurationError, match="section prefix"):
            parse_config("kind = vit")

    def test_missing_equals(self):
        with pytest.raises(ConfigurationError):
            parse_config("model.kind vit")

    def test_bad_int_value(self):
        with pytest.raises(ConfigurationError, match="bad value"):
            parse_config("train.steps = soon")

    def test_bad_bool_value(self):
        with pytest.raises(ConfigurationError, match="bad value"):
            parse_config("sbp.enabled = yes")

    def test_error_includes_line_number(self):
        with pytest.raises(ConfigurationError, match="line 2"):
            parse_config("model.kind = mlp\nbogus.key = 1")


class TestValidate:
    @pytest.mark.parametrize("line", [
        "model.kind = resnet",
        "sbp.mode = rows",
        "sbp.sampler = halton",
        "sbp.sharing = both",
        "sbp.schedule = sawtooth",
        "sbp.keep_ratio = 0.0",
        "sbp.keep_ratio = 1.5",
        "train.steps = 0",
        "train.lr = -0.1",
        "model.grid = 4x4x4",
    ])
    def test_invalid_values_rejected(self, line):
        with pytest.raises(ConfigurationError):
            parse_config(line)


class TestRoundtrip:
    def test_text_roundtrip(self):
        cfg = parse_config("model.kind = conv\nmodel.grid = 6x4\ntrain.seed = 9\n")
        back = parse_config(config_to_text(cfg))
        assert back == cfg

    def test_default_roundtrip(self):
        cfg = default_config()
        assert parse_config(config_to_text(cfg)) == cfg
