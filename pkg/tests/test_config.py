import pytest

from voldit.config import RunConfig
from voldit.errors import ConfigError


def test_defaults_validate():
    cfg = RunConfig()
    d = cfg.validate()
    assert (d.size, d.patch, d.num_tokens, d.latent_channels) == ("XS", 2, 8, 512)
    assert cfg.schedule.T == 300
    assert cfg.sample.n == 100 and cfg.evaluate.n_fake == 100 and cfg.evaluate.pairs == 100


def test_text_roundtrip():
    cfg = RunConfig.from_text("[model]\nsize = S\npatch = 4\n[data]\ngeometry = 64,64,64\n[adapter]\nlayers = 1,3\n")
    assert cfg.model.size == "S" and cfg.data.geometry == (64, 64, 64)
    again = RunConfig.from_text(cfg.to_text())
    assert again == cfg
    assert again.injection_layers(12) == (1, 3)
    assert RunConfig().injection_layers(6) == tuple(range(1, 7))


@pytest.mark.parametrize("text", [
    "[model]\nsize = XL\n",
    "[model]\npatch = 3\n",
    "[data]\ngeometry = 32,30,32\n",
    "[data]\ngeometry = 32,32,48\n[model]\npatch = 4\n",
    "[train]\nsubset = test\n",
    "[adapter]\nmode = sometimes\n",
    "[adapter]\npi = -1\n",
    "[adapter]\nlayers = 0,7\n",
    "[sample]\nmode = euler\n",
    "[evaluate]\nthreshold = 1.5\n",
    "[schedule]\nT = 0\n",
    "[nonsense]\nx = 1\n",
    "[model]\ncolour = red\n",
    "[train]\nsteps = many\n",
    "not an ini file",
])
def test_invalid_configs_are_rejected(text):
    with pytest.raises(ConfigError):
        RunConfig.from_text(text).validate()


def test_load_from_file(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[train]\nlr = 0.001\n")
    assert RunConfig.load(p).train.lr == 0.001
