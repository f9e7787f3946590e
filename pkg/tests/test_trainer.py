"""Training-harness tests: Adam mechanics, the LR schedule, domain-loop
determinism, and checkpoint integrity/round-tripping."""

import json

import numpy as np
import pytest

from dkua import data as dx
from dkua.distribution import DomainStats
from dkua.errors import ConfigError, IntegrityError
from dkua.model import DkuaModel
from dkua.numerics import Tensor
from dkua.trainer import (Adam, TrainConfig, lifelong_train, load_checkpoint,
                          load_train_config, lr_at, prune_optimizer,
                          save_checkpoint, train_domain)

from conftest import small_spec


def tiny_train_config(**overrides):
    params = dict(seed=0, epochs=2, embed_dim=6, depth=1, heads=2)
    params.update(overrides)
    return TrainConfig(**params)


def make_sequence(tmp_path, n_seen=2, unseen=True):
    spec = {"seen": [small_spec(name=f"d{i}", pattern_id=i)
                     for i in range(n_seen)],
            "unseen": [small_spec(name="u0", pattern_id=3)] if unseen else []}
    dx.synthesize_sequence(spec, seed=0, out_dir=tmp_path / "data")
    return tmp_path / "data"


# ---------------------------------------------------------------------- adam


def test_adam_zero_gradient_is_a_no_op():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    Adam().step([("p", p)], lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_adam_first_step_moves_by_lr_in_gradient_direction():
    # with bias correction the first update is lr * g / (|g| + eps)
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    p.grad = np.array([0.5, -2.0])
    Adam().step([("p", p)], lr=0.1)
    np.testing.assert_allclose(p.data, [1.0 - 0.1, -1.0 + 0.1], atol=1e-6)


def test_adam_skips_frozen_params():
    p = Tensor(np.array([1.0]), requires_grad=False)
    p.grad = np.array([5.0])
    opt = Adam()
    opt.step([("p", p)], lr=0.1)
    assert p.data[0] == 1.0 and "p" not in opt.state


def test_adam_drop_clears_state():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([1.0])
    opt = Adam()
    opt.step([("p", p)], lr=0.1)
    assert "p" in opt.state
    opt.drop(["p"])
    assert "p" not in opt.state


# ------------------------------------------------------------------ schedule


def test_lr_schedule_steps_by_period():
    cfg = TrainConfig(seed=0, lr=5e-6, lr_decay=0.1, lr_period=10)
    assert lr_at(cfg, 0) == 5e-6
    assert lr_at(cfg, 9) == 5e-6
    assert abs(lr_at(cfg, 10) - 5e-7) < 1e-20
    assert abs(lr_at(cfg, 25) - 5e-8) < 1e-21


# -------------------------------------------------------------------- config


def test_config_validation_and_loading(tmp_path):
    with pytest.raises(ConfigError):
        TrainConfig(seed=0, epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(seed=0, lr=-1.0)
    path = tmp_path / "cfg.json"
    path.write_text('{"seed": 3, "epochs": 4}')
    cfg = load_train_config(path)
    assert cfg.seed == 3 and cfg.epochs == 4
    path.write_text('{"seed": 3, "unknown_knob": 1}')
    with pytest.raises(ConfigError, match="unknown_knob"):
        load_train_config(path)
    path.write_text('{"epochs": 4}')
    with pytest.raises(ConfigError, match="seed"):
        load_train_config(path)


# --------------------------------------------------------------- domain loop


def run_lifelong(tmp_path, tag, **overrides):
    data_dir = make_sequence(tmp_path)
    out = tmp_path / tag
    lifelong_train(tiny_train_config(**overrides), data_dir, out)
    return out


def test_lifelong_run_layout_and_determinism(tmp_path):
    a = run_lifelong(tmp_path, "run_a")
    b = run_lifelong(tmp_path, "run_b")
    assert (a / "config.json").exists()
    assert (a / "metrics" / "curve.csv").exists()
    losses_a = (a / "logs" / "losses.jsonl").read_bytes()
    losses_b = (b / "logs" / "losses.jsonl").read_bytes()
    assert losses_a == losses_b
    for t in (1, 2):
        pa = (a / "checkpoints" / f"domain_{t}" / "params.bin").read_bytes()
        pb = (b / "checkpoints" / f"domain_{t}" / "params.bin").read_bytes()
        assert pa == pb


def test_curve_covers_seen_so_far_plus_unseen(tmp_path):
    out = run_lifelong(tmp_path, "run")
    lines = (out / "metrics" / "curve.csv").read_text().splitlines()
    assert lines[0] == "trained_through_domain,eval_domain,mAP,rank1"
    keys = [tuple(l.split(",")[:2]) for l in lines[1:]]
    assert keys == [("1", "d0"), ("1", "u0"),
                    ("2", "d0"), ("2", "d1"), ("2", "u0")]
    for line in lines[1:]:
        m, r1 = map(float, line.split(",")[2:])
        assert 0.0 <= m <= 1.0 and 0.0 <= r1 <= 1.0


def test_first_domain_losses_reduce_to_reid(tmp_path):
    out = run_lifelong(tmp_path, "run")
    for line in (out / "logs" / "losses.jsonl").read_text().splitlines():
        rec = json.loads(line)
        if rec["domain"] == 1:
            assert rec["l_ka"] == 0.0
            assert rec["l_uka"] == 0.0
            assert rec["l_dkt"] == 0.0
            assert rec["total"] == rec["l_reid"]


def test_domain_identity_overlap_rejected(tmp_path):
    data_dir = make_sequence(tmp_path)
    # rewrite the second domain's index to reuse domain-one identity ids
    d1 = dx.load_domain(data_dir / "d1")
    clashing = [dx.IndexRecord(r.path, r.identity - 4, r.camera, r.domain,
                               r.split) for r in d1.records]
    dx.write_index(data_dir / "d1" / "index.tsv", clashing)
    with pytest.raises(ConfigError, match="shared across domains"):
        lifelong_train(tiny_train_config(), data_dir, tmp_path / "run")


def test_prune_optimizer_drops_frozen_and_unify_state(tmp_path):
    rng = np.random.default_rng(0)
    cfg = tiny_train_config()
    model = DkuaModel(cfg.backbone_config(), rng)
    model.grow_domain(3, rng)
    opt = Adam()
    opt.state = {"tm.0.out.w": 1, "unify.w": 2, "backbone.pos": 3}
    model.grow_domain(2, rng)
    prune_optimizer(opt, model)
    assert set(opt.state) == {"backbone.pos"}


# --------------------------------------------------------------- checkpoints


def checkpointed_run(tmp_path):
    data_dir = make_sequence(tmp_path)
    out = tmp_path / "run"
    lifelong_train(tiny_train_config(), data_dir, out)
    return out / "checkpoints" / "domain_2"


def test_checkpoint_round_trip(tmp_path):
    ckpt = checkpointed_run(tmp_path)
    model, stats, config, step = load_checkpoint(ckpt)
    assert model.t == 2 and stats.completed == 2 and step > 0
    assert config.seed == 0

    # saving the loaded model must reproduce the payload bitwise
    again = tmp_path / "again"
    save_checkpoint(again, model, stats, config, step)
    assert (again / "params.bin").read_bytes() == \
        (ckpt / "params.bin").read_bytes()
    # frozen flags survive the round trip
    assert model.tms[0].frozen and not model.tms[1].frozen


def test_checkpoint_truncated_payload_rejected(tmp_path):
    ckpt = checkpointed_run(tmp_path)
    payload = (ckpt / "params.bin").read_bytes()
    (ckpt / "params.bin").write_bytes(payload[:-8])
    with pytest.raises(IntegrityError, match="length"):
        load_checkpoint(ckpt)


def test_checkpoint_corrupted_payload_rejected(tmp_path):
    ckpt = checkpointed_run(tmp_path)
    payload = bytearray((ckpt / "params.bin").read_bytes())
    payload[100] ^= 0xFF
    (ckpt / "params.bin").write_bytes(bytes(payload))
    with pytest.raises(IntegrityError, match="checksum"):
        load_checkpoint(ckpt)


def test_checkpoint_bad_format_rejected(tmp_path):
    ckpt = checkpointed_run(tmp_path)
    manifest = json.loads((ckpt / "manifest.json").read_text())
    manifest["format"] = "something else"
    (ckpt / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(IntegrityError, match="format"):
        load_checkpoint(ckpt)


def test_stats_accumulate_only_in_final_epoch(tmp_path):
    data_dir = make_sequence(tmp_path, n_seen=1, unseen=False)
    domain = dx.load_domain(data_dir / "d0")
    cfg = tiny_train_config(epochs=3)
    rng_init = np.random.default_rng(0)
    model = DkuaModel(cfg.backbone_config(), rng_init)
    model.grow_domain(domain.class_count, rng_init)
    stats = DomainStats(cfg.embed_dim)
    stats.open_domain(domain.class_count)
    train_domain(model, stats, domain, cfg, Adam(),
                 np.random.default_rng(1), None)
    # one epoch is one PK pass over 4 identities = 16 instances
    assert stats._n == 16
