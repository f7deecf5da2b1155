import pytest

from fmse.config import RunConfig, build, parse_override, replace_section, resolve
from fmse.errors import ConfigError


def test_defaults():
    cfg = resolve()
    assert cfg.train.learning_rate == 1e-4 and cfg.train.batch_size == 32 and cfg.train.ema_decay == 0.999
    assert cfg.path.sigma_max == 0.5 and cfg.path.t_eps == 0.03
    assert cfg.precond.sigma_data == 0.1 and cfg.sampler.n_steps == 5


def test_precedence(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("train:\n  max_steps: 10\n  seed: 4\n")
    cfg = resolve(f, ["train.max_steps=20"])
    assert cfg.train.max_steps == 20 and cfg.train.seed == 4


def test_env_fallback(tmp_path, monkeypatch):
    f = tmp_path / "c.json"
    f.write_text('{"sampler": {"n_steps": 9}}')
    monkeypatch.setenv("FMSE_CONFIG", str(f))
    assert resolve().sampler.n_steps == 9


def test_parse_override_types():
    assert parse_override("a.b=3") == {"a": {"b": 3}}
    assert parse_override("a=[1, 2]") == {"a": [1, 2]}
    assert parse_override("a=x1-edm") == {"a": "x1-edm"}
    assert parse_override("a=3e-3") == {"a": 0.003}
    assert parse_override("a=true") == {"a": True}
    with pytest.raises(ConfigError):
        parse_override("novalue")


@pytest.mark.parametrize("doc,key", [({"trian": {}}, "trian"), ({"train": {"lr": 1}}, "train.lr"),
                                     ({"train": 3}, "train")])
def test_unknown_or_malformed_keys(doc, key):
    with pytest.raises(ConfigError, match=key):
        build(doc)


def test_invalid_values_name_section():
    with pytest.raises(ConfigError, match="sampler"):
        build({"sampler": {"n_steps": 0}})


def test_digest_changes_with_config():
    a = RunConfig()
    b = replace_section(a, "train", seed=1)
    assert a.digest() != b.digest() and a.digest() == RunConfig().digest()


def test_bad_file(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        resolve(f)
    with pytest.raises(ConfigError):
        resolve(tmp_path / "missing.yaml")
