from __future__ import annotations

import pytest
import torch

from qbtlab.checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from qbtlab.config import ConfigError, apply_overrides, config_from_dict, dump_config, load_config
from qbtlab.model import ModelConfig, build_model
from qbtlab.training import BatchSource, OptimizerState, Trainer, ebt_step


def test_checkpoint_round_trip_with_optimizer(tmp_path, tiny_model, small_task):
    trainer = Trainer(tiny_model, OptimizerState(lr=1e-3))
    ebt_step(trainer, BatchSource(small_task.train, 4).sample())
    path = tmp_path / "m.qbt"
    save_checkpoint(path, tiny_model, {"note": "x"}, trainer.state)
    model, meta, opt = load_checkpoint(path)
    assert meta["note"] == "x"
    for (n, p), (_, q) in zip(tiny_model.named_parameters(), model.named_parameters()):
        assert torch.equal(p, q), n
    assert opt.step == 1 and opt.param_steps == trainer.state.param_steps
    for k, v in trainer.state.exp_avg_sq.items():
        assert torch.equal(v, opt.exp_avg_sq[k])
    # tying survives the round trip
    assert model.encoder_head_weight.data_ptr() == model.encoder.embed.weight.data_ptr()


def test_checkpoint_header_and_errors(tmp_path, tiny_model):
    path = tmp_path / "m.qbt"
    save_checkpoint(path, tiny_model)
    assert path.read_bytes()[:8] == b"QBTCKPT1"
    header, arrays = read_checkpoint(path)
    assert header["model_config"]["vocab_size"] == 24
    assert all(a.dtype.str == "<f4" for a in arrays.values())
    bad = tmp_path / "bad.qbt"
    bad.write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    trunc = tmp_path / "trunc.qbt"
    trunc.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(CheckpointError):
        load_checkpoint(trunc)


def test_checkpoint_is_deterministic(tmp_path, tiny_cfg):
    a, b = tmp_path / "a.qbt", tmp_path / "b.qbt"
    save_checkpoint(a, build_model(tiny_cfg, seed=4))
    save_checkpoint(b, build_model(tiny_cfg, seed=4))
    assert a.read_bytes() == b.read_bytes()


def test_config_defaults_and_unknown_keys(tmp_path, monkeypatch):
    monkeypatch.delenv("QBTLAB_SEED", raising=False)
    cfg = config_from_dict({})
    assert cfg.training.batch_size == 32 and cfg.optimizer.lr == 1e-4 and cfg.penalty.weight == 0.05
    assert cfg.task.corpus_size_per_lang == 20000 and cfg.task.test_size == 500
    with pytest.raises(ConfigError):
        config_from_dict({"trainig": {}})
    with pytest.raises(ConfigError):
        config_from_dict({"training": {"batchsize": 3}})
    with pytest.raises(ConfigError):
        config_from_dict({"init": {"method": "magic"}})


def test_config_round_trip_and_env_seed(tmp_path, monkeypatch):
    monkeypatch.delenv("QBTLAB_SEED", raising=False)
    cfg = config_from_dict({"seed": 3, "model": {"d_model": 32}})
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml").to_dict() == cfg.to_dict()
    monkeypatch.setenv("QBTLAB_SEED", "11")
    assert load_config(tmp_path / "c.yaml").seed == 11


def test_overrides():
    cfg = apply_overrides(config_from_dict({}, apply_env=False), ["training.batch_size=8", "penalty.enabled=false"])
    assert cfg.training.batch_size == 8 and cfg.penalty.enabled is False
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["training.nope=1"])
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["training.batch_size"])


def test_model_config_mismatch_detected(tmp_path, tiny_model):
    path = tmp_path / "m.qbt"
    save_checkpoint(path, tiny_model)
    import json
    import struct
    data = path.read_bytes()
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    header["model_config"]["d_ff"] = 64
    new = json.dumps(header).encode()
    (tmp_path / "x.qbt").write_bytes(data[:8] + struct.pack("<Q", len(new)) + new + data[16 + hlen:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.qbt")
    assert ModelConfig(**header["model_config"]).d_ff == 64
