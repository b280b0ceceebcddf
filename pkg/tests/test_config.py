import pytest

from crayonlm.config import RunConfig, load_run_config, parse_run_config
from crayonlm.errors import ConfigError


def test_defaults_round_trip_through_text():
    cfg = RunConfig()
    assert parse_run_config(cfg.dumps()) == cfg


def test_run_config_uses_stage_learning_rates():
    cfg = RunConfig()
    assert (cfg.cpt_config().lr_max, cfg.cpt_config().lr_min) == (1e-4, 1e-6)
    assert (cfg.cit_config().lr_max, cfg.cit_config().lr_min) == (1e-5, 1e-6)


def test_parse_values_and_comments():
    cfg = parse_run_config("# comment\nseed = 7\nnoise_std=0.5  # trailing\n\ndual_qlora = off\n")
    assert (cfg.seed, cfg.noise_std, cfg.dual_qlora) == (7, 0.5, False)
    assert cfg.cit_config().dual_qlora is False


@pytest.mark.parametrize("text", ["sede = 1\n", "seed = 1\nseed = 2\n", "seed: 1\n", "seed = one\n",
                                  "dual_qlora = maybe\n", "n_train = 0\n", "n_thing_classes = 81\n",
                                  "cpt_lr_min = 1\n", "d_model = 10\n"])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_run_config(text)


def test_overrides_validated():
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(bogus=1)
    assert RunConfig().with_overrides(sem_query=False).cpt_config().sem_query is False


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "none.txt")
    (tmp_path / "c.txt").write_text("seed = 3\n")
    assert load_run_config(tmp_path / "c.txt").seed == 3
