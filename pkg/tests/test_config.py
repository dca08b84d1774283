import pytest

from memsifter.config import PipelineConfig, load_config
from memsifter.errors import ConfigError


def test_documented_defaults():
    cfg = load_config(env={})
    assert cfg.top_k == 10
    assert cfg.proxy_context_budget_tokens == 131_072
    assert cfg.prefilter_enabled is True
    assert cfg.include_full_cutoff is True
    assert cfg.alpha == 1.0
    assert cfg.beta0 == 0.5
    assert cfg.tau == 0.2
    assert cfg.grpo_group_size == 6
    assert cfg.batch_size == 32
    assert cfg.eps_std == 1e-8
    assert cfg.proxy_temperature == 1.0
    assert cfg.working_temperature == 0.0
    assert cfg.backend.max_retries == 3


def test_file_overrides_defaults(tmp_path):
    path = tmp_path / "pipeline.toml"
    path.write_text('tau = 0.3\ntop_k = 5\n\n[backend]\nmax_retries = 7\n')
    cfg = load_config(path, env={})
    assert cfg.tau == 0.3
    assert cfg.top_k == 5
    assert cfg.backend.max_retries == 7
    assert cfg.batch_size == 32  # untouched default


def test_env_overrides_file(tmp_path):
    path = tmp_path / "pipeline.toml"
    path.write_text("tau = 0.3\n")
    cfg = load_config(path, env={"MEMSIFTER_TAU": "0.4", "MEMSIFTER_BACKEND_TIMEOUT_MS": "5000"})
    assert cfg.tau == 0.4
    assert cfg.backend.timeout_ms == 5000


def test_out_of_range_names_field():
    with pytest.raises(ConfigError) as err:
        load_config(env={"MEMSIFTER_TAU": "1.5"})
    assert err.value.field == "tau"


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "pipeline.toml"
    path.write_text("tua = 0.3\n")
    with pytest.raises(ConfigError):
        load_config(path, env={})


def test_unparseable_env_value():
    with pytest.raises(ConfigError):
        load_config(env={"MEMSIFTER_TOP_K": "many"})


def test_connection_env_vars_ignored_by_config():
    cfg = load_config(env={"MEMSIFTER_API_KEY": "sk-x", "MEMSIFTER_API_BASE": "https://x"})
    assert cfg == PipelineConfig()


def test_fingerprint_stable_and_sensitive():
    base = load_config(env={})
    again = load_config(env={})
    changed = load_config(env={"MEMSIFTER_TOP_K": "9"})
    assert base.fingerprint() == again.fingerprint()
    assert base.fingerprint() != changed.fingerprint()


def test_resolution_idempotent(tmp_path):
    path = tmp_path / "pipeline.toml"
    path.write_text("beta0 = 0.25\n")
    env = {"MEMSIFTER_BATCH_SIZE": "16"}
    assert load_config(path, env=env) == load_config(path, env=env)


def test_bool_env_parsing():
    cfg = load_config(env={"MEMSIFTER_PREFILTER_ENABLED": "off"})
    assert cfg.prefilter_enabled is False
