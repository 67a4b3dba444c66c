import struct

import numpy as np
import pytest

from rdpg.container import (MAGIC, load_checkpoint, load_episodes, load_params, read_container, save_checkpoint,
                            save_episodes, save_params, write_container)
from rdpg.errors import ConfigurationError
from rdpg.gradcheck import tiny_config
from rdpg.networks import ActorNet, NetConfig
from rdpg.replay import Episode, EpisodeStore
from rdpg.tdlearn import Learner, TdConfig, update


def test_round_trip_is_bit_exact(tmp_path):
    arrays = {"a": np.array([0.1, -0.0, np.inf, np.nan, 5e-324]),
              "b": np.arange(12.0).reshape(3, 4), "empty": np.zeros((0, 3))}
    write_container(tmp_path / "x.bin", arrays, {"note": "hi"}, kind="test")
    back, meta, kind = read_container(tmp_path / "x.bin")
    assert kind == "test" and meta == {"note": "hi"}
    for k, v in arrays.items():
        assert back[k].shape == v.shape and back[k].tobytes() == v.tobytes()


def test_header_layout(tmp_path):
    write_container(tmp_path / "x.bin", {"a": np.ones(2)}, kind="k")
    raw = (tmp_path / "x.bin").read_bytes()
    assert raw[:8] == MAGIC
    assert struct.unpack_from("<I", raw, 8)[0] == 1
    assert struct.unpack_from("<I", raw, 12)[0] == 1 and raw[16:17] == b"k"
    assert raw[-16:] == np.ones(2).astype("<f8").tobytes()


def test_rejects_foreign_and_mismatched_files(tmp_path):
    (tmp_path / "junk").write_bytes(b"not a container at all")
    with pytest.raises(ConfigurationError):
        read_container(tmp_path / "junk")
    write_container(tmp_path / "p.bin", {"a": np.ones(1)}, kind="paramset")
    with pytest.raises(ConfigurationError):
        read_container(tmp_path / "p.bin", "teacher")
    raw = bytearray((tmp_path / "p.bin").read_bytes())
    raw[8:12] = struct.pack("<I", 99)
    (tmp_path / "v.bin").write_bytes(bytes(raw))
    with pytest.raises(ConfigurationError, match="version"):
        read_container(tmp_path / "v.bin")


def test_paramset_round_trip(tmp_path):
    ps = ActorNet(NetConfig()).init(np.random.default_rng(0), seed=0)
    save_params(tmp_path / "a.bin", ps)
    back = load_params(tmp_path / "a.bin")
    assert back.bitwise_equal(ps) and back.meta["net"] == "actor"


def test_episode_file_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    eps = [Episode(rng.standard_normal((T + 1, 14)), rng.uniform(-1, 1, (T, 2)), rng.standard_normal(T), T % 2 == 0)
           for T in (3, 8)]
    save_episodes(tmp_path / "t.bin", eps)
    back, meta = load_episodes(tmp_path / "t.bin")
    assert meta["obs_dim"] == 14 and meta["action_dim"] == 2
    for a, b in zip(eps, back):
        assert a.obs.tobytes() == b.obs.tobytes() and a.actions.tobytes() == b.actions.tobytes()
        assert a.rewards.tobytes() == b.rewards.tobytes() and a.terminal == b.terminal


def test_empty_episode_file(tmp_path):
    save_episodes(tmp_path / "t.bin", [])
    assert load_episodes(tmp_path / "t.bin")[0] == []


def test_checkpoint_resume_continues_bitwise(tmp_path):
    rng = np.random.default_rng(2)
    cfg, td = tiny_config(), TdConfig(N=4, l=3, u=3, s=2)
    lr = Learner.create(cfg, td, rng)
    store = EpisodeStore()
    for _ in range(2):
        obs = rng.uniform(0.5, 2, (13, cfg.obs_dim))
        store.inject([Episode(obs, rng.uniform(-1, 1, (12, 2)), rng.standard_normal(12), True)])
    update(store, lr, td, np.random.default_rng(5))
    save_checkpoint(tmp_path / "c.ckpt", lr)
    lr2, _ = load_checkpoint(tmp_path / "c.ckpt", cfg, td)
    assert lr2.updates == lr.updates
    r1 = update(store, lr, td, np.random.default_rng(6))
    r2 = update(store, lr2, td, np.random.default_rng(6))
    assert r1.loss == r2.loss
    for k, v in lr.param_sets().items():
        assert v.bitwise_equal(lr2.param_sets()[k])


def test_checkpoint_dim_mismatch(tmp_path):
    lr = Learner.create(tiny_config(), TdConfig(), np.random.default_rng(0))
    save_checkpoint(tmp_path / "c.ckpt", lr)
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "c.ckpt", NetConfig())
