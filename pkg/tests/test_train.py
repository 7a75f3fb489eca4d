import json

import numpy as np
import pytest

from demark import checkpoint as ckpt_io
from demark import losses, network, optim, synth, train, using_dtype
from demark.engine import ConfigError, tensor


def named_scalar(name, value, grad=None):
    t = tensor(np.array(value, dtype=np.float64), requires_grad=True)
    if grad is not None:
        t.grad = np.array(grad, dtype=np.float64)
    return {name: t}


# ---------------------------------------------------------------------------
# optimizer


def test_zero_grad_zero_decay_is_noop():
    named = named_scalar("w", 0.375, grad=0.0)
    state = optim.init_adamw(named, lr=1e-3, weight_decay=0.0)
    optim.adamw_step(named, state)
    assert named["w"].item() == 0.375
    assert state.step_count == 1


def test_hand_step_matches_update_rule():
    with using_dtype(np.float64):
        named = named_scalar("w", 0.0, grad=1.0)
        state = optim.init_adamw(named, lr=1e-3, weight_decay=0.0)
        optim.adamw_step(named, state)
        assert named["w"].item() == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-9)


def test_descent_on_quadratic():
    with using_dtype(np.float64):
        named = named_scalar("w", 1.0)
        state = optim.init_adamw(named, lr=0.05, weight_decay=0.0)
        seen = [1.0]
        for _ in range(10):
            named["w"].grad = np.array(2.0 * named["w"].item())
            optim.adamw_step(named, state)
            seen.append(abs(named["w"].item()))
        assert all(b < a for a, b in zip(seen, seen[1:]))


def test_nan_grad_aborts_with_name():
    named = named_scalar("enc.0.w", 1.0, grad=np.nan)
    state = optim.init_adamw(named)
    with pytest.raises(FloatingPointError, match="enc.0.w"):
        optim.adamw_step(named, state)


def test_zero_lr_freezes_params_despite_decay():
    rng = np.random.default_rng(0)
    named = {f"p{i}": tensor(rng.random(3), requires_grad=True) for i in range(3)}
    before = {n: t.numpy().copy() for n, t in named.items()}
    for t in named.values():
        t.grad = rng.random(3)
    state = optim.init_adamw(named, lr=0.0, weight_decay=0.5)
    optim.adamw_step(named, state)
    for n, t in named.items():
        np.testing.assert_array_equal(t.numpy(), before[n])


def test_decay_exclusions():
    names = ["enc.0.block0.ln1.g", "enc.0.block0.ln2.b", "dec.0.1.block0.attn.sigma",
             "enc.0.block0.attn.q.w"]
    named = {n: tensor(np.ones(2), requires_grad=True) for n in names}
    state = optim.init_adamw(named, lr=0.1, weight_decay=0.5)
    optim.adamw_step(named, state)  # all grads None: decay-only update
    for n in names[:3]:
        np.testing.assert_array_equal(named[n].numpy(), np.ones(2, dtype=np.float32))
    assert (named[names[3]].numpy() < 1.0).all()


def test_step_touches_exactly_nonzero_grad_params():
    rng = np.random.default_rng(1)
    named = {"a": tensor(rng.random(4), requires_grad=True),
             "b": tensor(rng.random(4), requires_grad=True)}
    before = {n: t.numpy().copy() for n, t in named.items()}
    named["a"].grad = np.full(4, 0.5, dtype=np.float32)
    named["b"].grad = np.zeros(4, dtype=np.float32)
    state = optim.init_adamw(named, lr=1e-2, weight_decay=0.0)
    optim.adamw_step(named, state)
    assert not np.array_equal(named["a"].numpy(), before["a"])
    np.testing.assert_array_equal(named["b"].numpy(), before["b"])


# ---------------------------------------------------------------------------
# checkpoint container


def payload_roundtrip(tmp_path, tensors):
    p = tmp_path / "x.wmfk"
    ckpt_io.save_checkpoint(p, tensors)
    return p, ckpt_io.load_checkpoint(p)


def test_checkpoint_roundtrip_dtypes_and_bytes(tmp_path):
    rng = np.random.default_rng(2)
    tensors = {
        "w": rng.random((2, 3)).astype(np.float32),
        "wide": rng.random(4),
        "meta.step": np.array(17, dtype=np.int64),
        "meta.rng": np.frombuffer(b"hello", dtype=np.uint8).copy(),
    }
    p1, back = payload_roundtrip(tmp_path, tensors)
    for name, arr in tensors.items():
        assert back[name].dtype == arr.dtype
        np.testing.assert_array_equal(back[name], arr)
    p2 = tmp_path / "y.wmfk"
    ckpt_io.save_checkpoint(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_error_paths(tmp_path):
    p, _ = payload_roundtrip(tmp_path, {"w": np.zeros(2, dtype=np.float32)})
    raw = bytearray(p.read_bytes())

    bad_magic = tmp_path / "bad_magic.wmfk"
    bad_magic.write_bytes(b"NOPE" + bytes(raw[4:]))
    with pytest.raises(ckpt_io.CheckpointError, match="magic"):
        ckpt_io.load_checkpoint(bad_magic)

    bad_version = tmp_path / "bad_version.wmfk"
    tampered = bytearray(raw)
    tampered[4] = 99
    bad_version.write_bytes(bytes(tampered))
    with pytest.raises(ckpt_io.CheckpointError, match="version"):
        ckpt_io.load_checkpoint(bad_version)

    truncated = tmp_path / "trunc.wmfk"
    truncated.write_bytes(bytes(raw[:-3]))
    with pytest.raises(ckpt_io.CheckpointError, match="truncated"):
        ckpt_io.load_checkpoint(truncated)

    trailing = tmp_path / "trail.wmfk"
    trailing.write_bytes(bytes(raw) + b"xx")
    with pytest.raises(ckpt_io.CheckpointError, match="trailing"):
        ckpt_io.load_checkpoint(trailing)


def test_load_into_mismatches(tmp_path):
    named = {"w": tensor(np.zeros((2, 2)), requires_grad=True)}
    with pytest.raises(ckpt_io.CheckpointError, match="missing tensor w"):
        ckpt_io.load_into(named, {})
    with pytest.raises(ckpt_io.CheckpointError, match="shape mismatch for w"):
        ckpt_io.load_into(named, {"w": np.zeros((3, 3), dtype=np.float32)})


# ---------------------------------------------------------------------------
# training loop


def tiny_net_cfg(**kw):
    kw.setdefault("base_channels", 4)
    kw.setdefault("heads_per_level", (1, 2, 2, 4))
    return network.NetworkConfig(**kw)


def fake_data(n=4, size=16, seed=3):
    rng = np.random.default_rng(seed)
    return {
        "J": rng.random((n, 3, size, size)).astype(np.float32),
        "I": rng.random((n, 3, size, size)).astype(np.float32),
        "M": (rng.random((n, 1, size, size)) > 0.7).astype(np.float32),
    }


def tiny_train_cfg(**kw):
    kw.setdefault("steps", 3)
    kw.setdefault("batch_size", 2)
    kw.setdefault("image_size", 16)
    kw.setdefault("lambda_perc", 0.25)
    return train.TrainConfig(**kw)


def test_zero_steps_returns_init(tmp_path):
    cfg = tiny_net_cfg()
    res = train.train(cfg, tiny_train_cfg(steps=0), fake_data(), tmp_path / "r")
    fresh = network.named_parameters(network.init_params(cfg, seed=0))
    for n, t in network.named_parameters(res.params).items():
        np.testing.assert_array_equal(t.numpy(), fresh[n].numpy())
    assert res.history == []
    assert res.checkpoint_path.is_file()


def test_same_seed_same_log_and_checkpoint(tmp_path):
    cfg = tiny_net_cfg()
    data = fake_data()
    r1 = train.train(cfg, tiny_train_cfg(), data, tmp_path / "a")
    r2 = train.train(cfg, tiny_train_cfg(), data, tmp_path / "b")
    assert r1.history == r2.history
    assert (tmp_path / "a/checkpoint.wmfk").read_bytes() == \
           (tmp_path / "b/checkpoint.wmfk").read_bytes()
    assert (tmp_path / "a/log.jsonl").read_text() == (tmp_path / "b/log.jsonl").read_text()


def test_split_run_equals_uninterrupted(tmp_path):
    cfg = tiny_net_cfg()
    data = fake_data()
    full = train.train(cfg, tiny_train_cfg(steps=5), data, tmp_path / "full")
    train.train(cfg, tiny_train_cfg(steps=3), data, tmp_path / "part1")
    resumed = train.train(cfg, tiny_train_cfg(steps=2), data, tmp_path / "part2",
                          resume_from=tmp_path / "part1/checkpoint.wmfk")
    a = ckpt_io.load_checkpoint(tmp_path / "full/checkpoint.wmfk")
    b = ckpt_io.load_checkpoint(tmp_path / "part2/checkpoint.wmfk")
    assert set(a) == set(b)
    for key in a:
        if key == "meta.config":  # records the command, differs by steps on purpose
            continue
        np.testing.assert_array_equal(a[key], b[key], err_msg=key)
    assert [r["step"] for r in resumed.history] == [4, 5]
    tail = [r["loss_total"] for r in full.history[3:]]
    resumed_losses = [r["loss_total"] for r in resumed.history]
    assert resumed_losses == tail


def test_loss_decreases_on_tiny_overfit(tmp_path):
    cfg = tiny_net_cfg()
    data = fake_data(n=2)
    res = train.train(cfg, tiny_train_cfg(steps=30, batch_size=2, lambda_perc=0.0),
                      data, tmp_path / "d")
    first = res.history[0]["loss_total"]
    last = np.mean([r["loss_total"] for r in res.history[-5:]])
    assert last < first


def test_divergent_loss_aborts_without_final_checkpoint(tmp_path):
    data = fake_data()
    data["J"][0, 0, 0, 0] = np.nan
    cfg = tiny_net_cfg()
    out = tmp_path / "nan"
    with pytest.raises(train.TrainingDiverged):
        train.train(cfg, tiny_train_cfg(steps=2, batch_size=4), data, out)
    assert not (out / "checkpoint.wmfk").exists()


def test_no_deep_sup_equals_zeroed_depth_weights(tmp_path):
    data = fake_data()
    res_a = train.train(tiny_net_cfg(deep_supervision_enabled=False),
                        tiny_train_cfg(steps=2), data, tmp_path / "a")
    res_b = train.train(tiny_net_cfg(), tiny_train_cfg(steps=2, lambda_d=(0.0, 0.0, 1.0)),
                        data, tmp_path / "b")
    na = network.named_parameters(res_a.params)
    nb = network.named_parameters(res_b.params)
    for n in na:
        np.testing.assert_array_equal(na[n].numpy(), nb[n].numpy(), err_msg=n)


def test_restore_rejects_unknown_tensor(tmp_path):
    cfg = tiny_net_cfg()
    res = train.train(cfg, tiny_train_cfg(steps=1), fake_data(), tmp_path / "r")
    tensors = ckpt_io.load_checkpoint(res.checkpoint_path)
    tensors["mystery.w"] = np.zeros(2, dtype=np.float32)
    params = network.init_params(cfg, seed=0)
    named = network.named_parameters(params)
    opt = optim.init_adamw(named)
    rng = np.random.default_rng(0)
    with pytest.raises(ckpt_io.CheckpointError, match="mystery.w"):
        train.restore_training_state(named, opt, tensors, rng)


def test_checkpoint_contents_inventory(tmp_path):
    cfg = tiny_net_cfg()
    res = train.train(cfg, tiny_train_cfg(steps=1), fake_data(), tmp_path / "inv")
    tensors = ckpt_io.load_checkpoint(res.checkpoint_path)
    named = network.named_parameters(res.params)
    expect = set(named)
    expect |= {f"opt.m.{n}" for n in named} | {f"opt.v.{n}" for n in named}
    expect |= {"meta.step", "meta.rng", "meta.config"}
    assert set(tensors) == expect
    assert int(tensors["meta.step"]) == 1
    rebuilt = train.network_config_from_checkpoint(tensors)
    assert rebuilt == cfg
    # exactly one head weight tensor rides in the checkpoint
    assert [n for n in tensors if n.startswith("head.")] == ["head.b", "head.w"]


def test_extractor_untouched_by_training_step(tmp_path):
    fx = losses.init_extractor(seed=0)
    before = [(w.numpy().copy(), b.numpy().copy()) for w, b in fx.stages]
    data = fake_data(n=2)
    cfg = tiny_net_cfg()
    train.train(cfg, tiny_train_cfg(steps=2), data, tmp_path / "fx")
    for (w0, b0), (w, b) in zip(before, fx.stages):
        np.testing.assert_array_equal(w0, w.numpy())
        np.testing.assert_array_equal(b0, b.numpy())


def test_load_training_set_from_generated(tmp_path):
    bg = tmp_path / "bg"
    assets = tmp_path / "assets"
    synth.write_demo_backgrounds(bg, n=2, size=64, seed=1)
    synth.write_demo_assets(assets, n=2, seed=2)
    out = tmp_path / "ds"
    synth.generate_dataset(bg, assets, synth.SynthesisParams(seed=3), 3, out)
    data = train.load_training_set(out)
    assert data["J"].shape == (3, 3, 64, 64)
    assert data["M"].shape == (3, 1, 64, 64)
    assert data["J"].dtype == np.float32
    assert set(np.unique(data["M"])) <= {0.0, 1.0}
    with pytest.raises(ConfigError):
        train.load_training_set(tmp_path / "missing")


def test_evaluate_dataset_keys():
    data = fake_data(n=2, size=16)
    cfg = tiny_net_cfg()
    params = network.init_params(cfg, seed=5)
    report = train.evaluate_dataset(params, cfg, data)
    assert set(report) == {"psnr", "psnr_identity", "f1", "iou"}
    assert np.isfinite(report["psnr"]) and np.isfinite(report["psnr_identity"])
