import json

import pytest

from splitvfl.config import SessionConfig, SplitCounts, job_from_dict, load_job_config
from splitvfl.errors import ConfigError
from splitvfl.models import SplitModelConfig
from splitvfl.nn import OptimizerConfig


def test_digest_is_stable_and_sensitive():
    a = SessionConfig()
    assert a.digest() == SessionConfig().digest()
    assert len(a.digest()) == 32
    for change in ({"batch_size": 16}, {"epochs": 6}, {"shuffle_seed": 8}, {"split": SplitCounts(61, 15, 15)},
                   {"optimizer": OptimizerConfig(0.02)}, {"model": SplitModelConfig(image_blocks=3)}):
        assert a.replace(**change).digest() != a.digest(), change


def test_canonical_form_sorted_and_round_trips():
    cfg = SessionConfig(epochs=3, salt=bytes(range(16, 32)))
    text = cfg.canonical()
    data = json.loads(text)
    assert list(data) == sorted(data)
    assert SessionConfig.from_dict(data) == cfg


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        SessionConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        job_from_dict({"session": {}, "extra": 1}, base=None)


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        SessionConfig.from_dict({"batch_size": 0})
    with pytest.raises(ConfigError):
        SessionConfig.from_dict({"salt": "00"})
    with pytest.raises(ConfigError):
        SessionConfig.from_dict({"optimizer": {"learning_rate": 0.1, "nesterov": True}})


def test_job_paths_resolve_against_config_dir(tmp_path):
    path = tmp_path / "sub" / "job.json"
    path.parent.mkdir()
    path.write_text(json.dumps({
        "session": {"epochs": 1},
        "guest": {"tabular_csv": "../data/t.csv"},
        "host": {"image_dir": "imgs", "manifest": "imgs/m.csv"},
        "transport": {"address": "127.0.0.1:9000", "listen": "host", "timeout": 5},
        "output_dir": "out",
    }))
    job = load_job_config(path)
    assert job.guest.tabular_csv == path.parent / "../data/t.csv"
    assert job.host.manifest == path.parent / "imgs/m.csv"
    assert job.output_dir == path.parent / "out"
    assert job.transport.listen == "host" and job.session.epochs == 1


def test_bad_job_files(tmp_path):
    with pytest.raises(ConfigError):
        load_job_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_job_config(tmp_path / "bad.json")
    (tmp_path / "t.json").write_text(json.dumps({"transport": {"listen": "nobody"}}))
    with pytest.raises(ConfigError):
        load_job_config(tmp_path / "t.json")
