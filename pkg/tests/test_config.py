import math

import pytest

from weakcap.config import RunConfig, load_config, parse_config
from weakcap.errors import ConfigError


def test_defaults_and_aliases(tmp_path):
    cfg = parse_config("# comment\nlambda = 0.5  # trailing\nT_max = 12\nE = 8\nshared_features = false\n",
                       tmp_path)
    assert cfg.lam == 0.5 and cfg.max_len == 12 and cfg.kg_dim == 8 and cfg.shared_features is False
    assert cfg.theta_c == 0.99 and cfg.delta == 0.1 and cfg.beam == 5
    assert math.isnan(cfg.s_max)


def test_paths_resolve_against_config_dir(tmp_path):
    cfg = parse_config("corpus = data/c.conllu\n", tmp_path)
    assert cfg.corpus == str((tmp_path / "data" / "c.conllu").resolve())
    assert cfg.hypernyms == ""


@pytest.mark.parametrize("text, key", [
    ("thetac = 0.5", "thetac"),
    ("theta_c = 1.5", "theta_c"),
    ("beam = 0", "beam"),
    ("beam = five", "beam"),
    ("optimizer = lbfgs", "optimizer"),
    ("shared_features = maybe", "shared_features"),
])
def test_errors_name_the_key(text, key, tmp_path):
    with pytest.raises(ConfigError) as info:
        parse_config(text, tmp_path)
    assert info.value.key == key


def test_malformed_line(tmp_path):
    with pytest.raises(ConfigError):
        parse_config("just words\n", tmp_path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_config(tmp_path / "missing.cfg")
    assert info.value.key == "config"


def test_check_paths(tmp_path):
    (tmp_path / "c.conllu").write_text("")
    cfg = parse_config("corpus = c.conllu\nembeddings = e.txt\n", tmp_path)
    with pytest.raises(ConfigError) as info:
        cfg.check_paths(("corpus", "embeddings"))
    assert info.value.key == "embeddings"
    with pytest.raises(ConfigError) as info:
        cfg.check_paths(("features",))
    assert info.value.key == "features"


def test_dumps_roundtrip(tmp_path):
    cfg = parse_config("corpus = a.conllu\nseed = 11\ns_max = 2.5\nlr = 0.003\n", tmp_path)
    back = parse_config(cfg.dumps(), tmp_path / "elsewhere")
    assert back == cfg
    auto = RunConfig()
    text = auto.dumps()
    assert "s_max = auto" in text and "shared_features = true" in text
    again = parse_config(text, tmp_path)
    assert math.isnan(again.s_max) and again.shared_features
