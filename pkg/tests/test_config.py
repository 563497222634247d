import pytest

from colocate import config as cf
from colocate.config import ConfigError
from colocate.synth import PIPELINE_TABLE


def test_defaults_validate():
    cfg = cf.from_dict({})
    assert cfg.preset == "" and cfg.agg_width == 4 and cfg.tol == 200


@pytest.mark.parametrize("name", sorted(PIPELINE_TABLE))
def test_full_presets_reproduce_the_table(name):
    row = PIPELINE_TABLE[name]
    cfg = cf.from_dict({}, preset=name)
    assert cfg.synth.profile == name and cfg.synth.scale == 1.0
    assert (cfg.dataset.n_train, cfg.locate.n_inf, cfg.locate.s) == (row.n_train, row.n_inf, row.stride)
    d = cfg.dataset
    assert (d.cipher_start, d.cipher_rest, d.noise) == (row.cipher_start, row.cipher_rest, row.noise)


def test_scaled_aes_preset():
    cfg = cf.from_dict({}, preset="aes128-scaled")
    d = cfg.dataset
    assert (d.n_train, d.cipher_start, d.cipher_rest, d.noise) == (2200, 8192, 8192, 4096)
    assert (cfg.locate.n_inf, cfg.locate.s, cfg.synth.scale) == (2000, 100, 10.0)


def test_file_overrides_preset(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('preset = "simon128-desk"\n[locate]\nk = 7\nth = "auto"\n[synth]\nsigma = 1\n')
    cfg = cf.load(path, seed=12)
    assert cfg.preset == "simon128-desk" and cfg.locate.k == 7 and cfg.locate.th == "auto"
    assert cfg.synth.sigma == 1.0 and isinstance(cfg.synth.sigma, float)
    assert cfg.synth.seed == cfg.train.seed == 12
    # the command line preset wins over the file
    assert cf.load(path, preset="aes128").synth.profile == "aes128"


@pytest.mark.parametrize("doc, key", [
    ({"synth": {"sigmaa": 1.0}}, "synth.sigmaa"),
    ({"attacks": {}}, "attacks"),
    ({"locate": {"n_inf": 5, "bogus": 1}}, "locate.bogus"),
])
def test_unknown_keys_are_named(doc, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        cf.from_dict(doc)


@pytest.mark.parametrize("doc", [
    {"locate": {"k": 4}},
    {"locate": {"th": "high"}},
    {"locate": {"th": True}},
    {"locate": {"auto_quantile": 1.0}},
    {"synth": {"profile": "des"}},
    {"synth": {"rd_max": 2.5}},
    {"synth": {"prologue_frac": 1.5}},
    {"synth": {"sessions": [{"name": "x", "num_cos": 0}]}},
    {"synth": {"sessions": [{"name": "x", "num_cos": 2, "colour": 1}]}},
    {"train": {"batch": 1}},
    {"attack": {"schedule": [10, 10]}},
    {"dataset": "flat"},
])
def test_bad_values(doc):
    with pytest.raises(ConfigError):
        cf.from_dict(doc)


def test_unknown_preset_and_bad_toml(tmp_path):
    with pytest.raises(ConfigError, match="unknown preset"):
        cf.from_dict({}, preset="rot13")
    bad = tmp_path / "bad.toml"
    bad.write_text("[synth\n")
    with pytest.raises(ConfigError):
        cf.load(bad)
    with pytest.raises(ConfigError):
        cf.load(None, seed=-1)


def test_digest_is_stable_and_sensitive():
    a, b = cf.from_dict({}), cf.from_dict({})
    assert a.digest() == b.digest() and len(a.digest()) == 64
    assert cf.from_dict({"locate": {"k": 3}}).digest() != a.digest()
    assert cf.from_dict({}, preset="aes128-desk").digest() != a.digest()
