import math

import numpy as np
import pytest
import torch

from helpers import analytic_generator_params
from mccan.data import PhantomConfig, make_phantom_dataset
from mccan.networks import count_params
from mccan.training import (
    CHECKPOINT_FORMAT,
    CheckpointError,
    ReplayBuffer,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    TrainingError,
    _lr_factor,
    load_checkpoint,
    load_model,
    read_log,
    resume,
    train,
)


def tiny_cfg(**kw):
    base = dict(
        mode="mccan", n_domains=3, epochs=2, batch_size=2, crop=16, base_width=2, n_resblocks=1,
        disc_width=2, disc_layers=2, buffer_capacity=4, seed=1, dtype="float64",
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def ds3():
    return make_phantom_dataset(PhantomConfig(n_images=4, side=32, seed=0))


@pytest.fixture(scope="module")
def ds2():
    return make_phantom_dataset(PhantomConfig(n_images=4, side=32, noise_sigmas=(50, 0), seed=0))


def losses_only(records):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in records]


@pytest.mark.parametrize(
    "mode,n,gens,discs",
    [("ccadn", 2, 2, 2), ("mccan", 3, 4, 3), ("mccan_no_global", 3, 4, 4), ("mccan_no_local", 3, 4, 3)],
)
def test_topology(mode, n, gens, discs, ds2, ds3):
    t = Trainer(tiny_cfg(mode=mode, n_domains=n), ds2 if n == 2 else ds3)
    assert len(t.nets.generators) == gens and len(t.nets.discriminators) == discs
    for _, g in t.nets.generator_items():
        assert count_params(g) == analytic_generator_params(1, 2, 1, 2)


def test_no_global_binds_two_discriminators_to_z(ds3):
    t = Trainer(tiny_cfg(mode="mccan_no_global"), ds3)
    assert sorted(b.key for b in t.nets.bindings if b.domain == 1) == ["D_Z@X", "D_Z@Y"]


def test_step_records_and_log(tmp_path, ds3):
    ckpt, log = train(tiny_cfg(), ds3, tmp_path)
    recs = read_log(log)
    t = Trainer(tiny_cfg(), ds3)
    assert len(recs) == t.total_steps == 2 * math.ceil(4 / 2)
    r = recs[0]
    assert set(r) == {"step", "epoch", "lr", "disc_objective", "adversarial", "cycle", "identity", "composite", "wall_time"}
    assert len(r["cycle"]) == 6
    expect = r["adversarial"] + 10 * sum(r["cycle"].values()) + 0.5 * r["identity"]
    assert r["composite"] == pytest.approx(expect, rel=1e-9)
    assert load_checkpoint(ckpt)["format"] == CHECKPOINT_FORMAT


def test_resume_matches_uninterrupted_run(tmp_path, ds3):
    cfg = tiny_cfg(epochs=3, checkpoint_interval=3)
    _, log_full = train(cfg, ds3, tmp_path / "full")
    full = losses_only(read_log(log_full))
    _, log_a = train(cfg, ds3, tmp_path / "part", max_steps=3)
    assert len(read_log(log_a)) == 3
    resume(tmp_path / "part" / "checkpoint.pt", ds3, tmp_path / "part")
    part = losses_only(read_log(log_a))
    assert len(part) == len(full)
    for a, b in zip(full[3:], part[3:]):
        assert b["composite"] == pytest.approx(a["composite"], rel=1e-6)
    assert part == full  # in fact bit-identical on one thread


def test_resume_refuses_other_mode(tmp_path, ds3):
    ckpt, _ = train(tiny_cfg(epochs=1), ds3, tmp_path, max_steps=1)
    with pytest.raises(CheckpointError):
        resume(ckpt, ds3, tmp_path, mode="mccan_no_local")


def test_corrupted_checkpoint_refused(tmp_path, ds3):
    ckpt, _ = train(tiny_cfg(epochs=1), ds3, tmp_path, max_steps=1)
    data = ckpt.read_bytes()
    bad = tmp_path / "bad.pt"
    bad.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        resume(bad, ds3, tmp_path)
    junk = tmp_path / "junk.pt"
    junk.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_model(junk)
    other = tmp_path / "other.pt"
    torch.save({"format": "something-else/9"}, other)
    with pytest.raises(CheckpointError):
        load_checkpoint(other)


def test_lambda_cyc_affects_only_generators(ds3):
    a = Trainer(tiny_cfg(), ds3)
    b = Trainer(tiny_cfg(lambda_cyc=0.0), ds3)
    # generators start at the identity, so cycle terms first contribute on step two
    for _ in range(2):
        a.train_step()
        b.train_step()
    for (k, da), db in zip(a.nets.discriminators.items(), b.nets.discriminators.values()):
        for p, q in zip(da.parameters(), db.parameters()):
            assert torch.equal(p, q), k
    diffs = [not torch.equal(p, q) for p, q in zip(a.nets.generators.parameters(), b.nets.generators.parameters())]
    assert any(diffs)


def test_mccan_on_two_domains_reproduces_ccadn(ds2):
    spec = dict(n_domains=2, n_resblocks=1, epochs=2)
    a = Trainer(tiny_cfg(mode="ccadn", **spec), ds2)
    b = Trainer(tiny_cfg(mode="mccan", **spec), ds2)
    for _ in range(4):
        ra, rb = a.train_step(), b.train_step()
        ra.pop("wall_time"), rb.pop("wall_time")
        assert ra == rb


def test_missing_domain_is_config_error(ds2):
    with pytest.raises(TrainingError):
        Trainer(tiny_cfg(n_domains=3), ds2)


@pytest.mark.filterwarnings("ignore:Detected call of:UserWarning")  # no optimizer step ever succeeds here
def test_nonfinite_guard(ds3):
    t = Trainer(tiny_cfg(max_nonfinite=3), ds3)
    with torch.no_grad():
        next(t.nets.generator(0, 1).parameters()).fill_(float("nan"))
    t.train_step()
    t.train_step()
    with pytest.raises(TrainingDiverged, match="3 consecutive"):
        t.train_step()


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(batch_size=0), dict(buffer_capacity=-1), dict(adv_form="hinge"), dict(mode="x")])
def test_config_validation(kw):
    with pytest.raises((TrainingError, ValueError)):
        tiny_cfg(**kw)


def test_config_file_roundtrip(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[train]\nmode = mccan-no-global\nepochs = 7\nlr = 1e-3\ncrop = 32\ndecay_start = none\n")
    cfg = TrainConfig.from_file(p, seed=5)
    assert (cfg.mode, cfg.epochs, cfg.lr, cfg.crop, cfg.seed, cfg.decay_start) == ("mccan_no_global", 7, 1e-3, 32, 5, 3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    p.write_text("[train]\nlearning_rate = 1\n")
    with pytest.raises(TrainingError):
        TrainConfig.from_file(p)


def test_default_resblocks_follow_mode():
    assert TrainConfig(mode="ccadn", n_domains=2).n_resblocks == 9
    assert TrainConfig(mode="mccan").n_resblocks == 4


def test_lr_schedule():
    f = _lr_factor(10, 5)
    assert [f(e) for e in range(11)] == [1, 1, 1, 1, 1, 1.0, 0.8, 0.6, 0.4, 0.2, 0.0]


def test_replay_buffer_capacity_zero_is_fresh():
    buf = ReplayBuffer(0, seed=0)
    x = torch.randn(3, 1, 4, 4)
    assert buf.query(x) is x and len(buf) == 0


def test_replay_buffer_mix():
    buf = ReplayBuffer(5, seed=0)
    for i in range(5):
        buf.query(torch.full((1, 1, 1, 1), -1.0 - i))
    assert len(buf) == 5
    fresh = 0
    for i in range(2000):
        out = buf.query(torch.full((1, 1, 1, 1), float(i)))
        fresh += float(out) == i
        assert len(buf) == 5
    # binomial(2000, 1/2): 6 SD band
    assert abs(fresh - 1000) < 6 * math.sqrt(500)


def test_replay_buffer_state_roundtrip():
    a = ReplayBuffer(3, seed=1)
    for i in range(6):
        a.query(torch.full((2, 1, 1, 1), float(i)))
    b = ReplayBuffer(3, seed=99)
    b.load_state_dict(a.state_dict())
    x = torch.arange(8.0).reshape(8, 1, 1, 1)
    assert torch.equal(a.query(x), b.query(x))
