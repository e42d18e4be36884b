import pytest

from gppbed.config import (
    PAPER_SIZES,
    THREADS_ENV,
    RunConfig,
    config_hash,
    load_config,
    normalize_keys,
)
from gppbed.errors import ConfigError


@pytest.fixture(autouse=True)
def isolated_env(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(THREADS_ENV, raising=False)


def write_config(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return path


def test_aliases_are_normalized():
    assert normalize_keys({"N": 1, "j": 2, "K": 3, "s": 4.0, "design-mode": "random"}) == {
        "n_outer": 1,
        "n_inner": 2,
        "n_groups": 3,
        "threshold": 4.0,
        "design_mode": "random",
    }


def test_file_values_are_coerced(tmp_path):
    path = write_config(tmp_path, "experiment=linear-toy\nN=20\nJ=30\nS=1.5\nseed=7\n")
    config = load_config(path)
    assert config.experiment == "linear-toy"
    assert (config.outer_size, config.inner_size) == (20, 30)
    assert config.threshold == 1.5
    assert config.seed == 7


def test_unknown_key_is_rejected(tmp_path):
    path = write_config(tmp_path, "experiment=parametric\nbogus_knob=1\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_out_of_range_values_are_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path, "n_outer=0\n"))
    with pytest.raises(ConfigError):
        load_config(seed=-1)
    with pytest.raises(ConfigError):
        load_config(repeats=3)
    with pytest.raises(ConfigError):
        load_config(n_groups=1)
    with pytest.raises(ConfigError):
        load_config(truth_x=2.0)


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


def test_overrides_win_over_file_and_none_is_ignored(tmp_path):
    path = write_config(tmp_path, "seed=3\noutput_dir=from_file\n")
    config = load_config(path, seed=11, output_dir=None)
    assert config.seed == 11
    assert config.output_dir == "from_file"


def test_thread_count_from_environment(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "4")
    assert load_config().threads == 4
    assert load_config(threads=2).threads == 2


def test_bad_thread_environment_is_config_error(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "many")
    with pytest.raises(ConfigError):
        load_config()


def test_default_sizes_follow_experiment():
    for experiment, size in PAPER_SIZES.items():
        config = RunConfig(experiment=experiment)
        assert config.outer_size == size
        assert config.inner_size == size


def test_grouping_defaults_by_case():
    assert not RunConfig(experiment="parametric").use_grouping
    assert RunConfig(experiment="structural").use_grouping
    assert RunConfig(experiment="parametric", grouping=True).use_grouping
    assert RunConfig(experiment="diagnostics", case="structural").sequential_case == "structural"


def test_blank_optional_values_become_none(tmp_path):
    config = load_config(write_config(tmp_path, "threshold=\nn_outer=\n"))
    assert config.threshold is None
    assert config.n_outer is None


def test_config_is_frozen():
    config = RunConfig()
    with pytest.raises(Exception):
        config.seed = 5


def test_config_hash_is_stable_and_sensitive():
    assert config_hash(RunConfig(seed=1)) == config_hash(RunConfig(seed=1))
    assert config_hash(RunConfig(seed=1)) != config_hash(RunConfig(seed=2))
    assert len(config_hash(RunConfig())) == 64


def test_setup_carries_sizes():
    setup = RunConfig(experiment="structural", n_outer=12, n_inner=8, grid_size=32).setup()
    assert setup.case == "structural"
    assert (setup.n_outer, setup.n_inner, setup.grid_size) == (12, 8, 32)
    assert setup.grouping
