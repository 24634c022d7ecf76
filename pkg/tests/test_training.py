import numpy as np
import pytest

from lordnet.channel import generate_dataset, sample_rayleigh_channel, snr_params
from lordnet.errors import ConfigError, ShapeError, TrainingError
from lordnet.likelihood import SystemParams
from lordnet.training import (AdamState, TrainConfig, adam_step, alternating_groups,
                              init_theta, moving_average, network_loss, stage1_loss, train,
                              train_alternating, train_one_stage, train_stage1, train_stage2,
                              train_two_stage, train_variant)
from lordnet.unfolded import UnfoldedWeights, backward, detect, forward


def make_data(m=12, n=3, snr=8.0, B=64, seed=0, channel_seed=0):
    theta = snr_params(sample_rayleigh_channel(m, n, channel_seed), snr)
    return theta, generate_dataset(theta, B=B, seed=seed, snr_db=snr)


def small_config(**kw):
    base = dict(L=5, epochs_stage1=20, epochs_stage2=10, batch_size=16, lr_stage1=1e-2,
                lr_stage2=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_adam_zero_gradient_keeps_params():
    params = {"a": np.array([1.0, -2.0])}
    out, state = adam_step(params, {"a": np.zeros(2)}, AdamState(), 0.1)
    np.testing.assert_array_equal(out["a"], params["a"])
    assert state.step == 1


def test_adam_first_step():
    out, _ = adam_step({"p": np.array(0.0)}, {"p": np.array(1.0)}, AdamState(), 0.1)
    # m_hat = 1, v_hat = 1: step = lr / (1 + eps)
    assert float(out["p"]) == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-15)


def test_adam_matches_hand_rolled_recursion():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal((5, 3))
    p, m, v = np.zeros(3), np.zeros(3), np.zeros(3)
    params, state = {"p": np.zeros(3)}, AdamState()
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p = p - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        params, state = adam_step(params, {"p": g}, state, 0.01)
    np.testing.assert_allclose(params["p"], p, rtol=1e-14)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"a": np.zeros(2)}, {"a": np.zeros(3)}, AdamState(), 0.1)


def test_config_validation():
    for bad in (dict(delta=0.0), dict(delta=1.0), dict(mode="three_stage"), dict(L=0),
                dict(lr_stage1=-1.0), dict(theta_trainables={"b"}), dict(epochs_stage2=-1),
                dict(stage2_layers=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    cfg = TrainConfig()
    assert (cfg.L, cfg.delta, cfg.lr_stage1, cfg.lr_stage2, cfg.epochs_stage1,
            cfg.epochs_stage2, cfg.batch_size) == (30, 0.01, 1e-3, 1e-4, 400, 400, 512)
    assert cfg.to_dict()["theta_trainables"] == ["H"]


def test_stage1_loss_zero_on_self_consistent_labels():
    theta, ds = make_data(B=8)
    phi = UnfoldedWeights.basic(4, 3, 0.01)
    out, _ = forward(np.zeros(3), theta, ds.r_obs, phi)
    assert network_loss(theta, phi, (out, ds.r_obs)) == 0.0
    assert stage1_loss(theta, (out, ds.r_obs), 4, 0.01) == 0.0


def test_stage1_loss_single_sample_value():
    theta = SystemParams([[1.0]], [1.0])
    g = 0.5 / np.sqrt(2 / np.pi)           # one layer lands exactly on 0.5
    phi = UnfoldedWeights([[np.sqrt(g)]])
    assert network_loss(theta, phi, ([[1.0]], [[1.0]])) == pytest.approx(0.25, rel=1e-14)


# For the seed-0 channel the fixed step 0.01 exceeds the descent stability
# limit (about 2 sigma^2 / ||H||^2 at 20 dB), so the true-channel iterates blow up.
UNSTABLE_AT_20DB = {0}


@pytest.mark.parametrize("seed", [
    pytest.param(s, marks=pytest.mark.xfail(strict=True, reason="step 0.01 unstable for this channel"))
    if s in UNSTABLE_AT_20DB else s for s in range(20)])
def test_stage1_loss_true_channel_beats_random(seed):
    theta, ds = make_data(m=16, n=4, snr=20.0, B=64, seed=seed, channel_seed=seed)
    rand = SystemParams(sample_rayleigh_channel(16, 4, 10_000 + seed), theta.sigma)
    assert stage1_loss(theta, ds, 50, 0.01) < stage1_loss(rand, ds, 50, 0.01)


def test_stage1_loss_gradient_finite_differences():
    theta, ds = make_data(m=6, n=3, B=8, seed=1)
    rng = np.random.default_rng(1)
    theta = SystemParams(rng.standard_normal((6, 3)), theta.sigma)
    phi = UnfoldedWeights.basic(4, 3, 0.01)
    X, R = ds.x_true, ds.r_obs
    out, trace = forward(np.zeros(3), theta, R, phi)
    g = backward(trace, theta, R, phi, 2.0 * (out - X) / X.shape[0]).H
    fd = np.empty_like(g)
    h = 1e-6
    for i in range(6):
        for j in range(3):
            Hp, Hm = theta.H.copy(), theta.H.copy()
            Hp[i, j] += h
            Hm[i, j] -= h
            fd[i, j] = (stage1_loss(SystemParams(Hp, theta.sigma), ds, 4, 0.01)
                        - stage1_loss(SystemParams(Hm, theta.sigma), ds, 4, 0.01)) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-4 * np.abs(fd).max())


def test_init_theta():
    theta, ds = make_data()
    th = init_theta(ds, TrainConfig(seed=3))
    np.testing.assert_array_equal(th.sigma, ds.sigma)
    assert np.std(th.H) == pytest.approx(0.1, rel=0.3)
    th_c = init_theta(ds, TrainConfig(theta_trainables={"H", "C"}))
    np.testing.assert_array_equal(th_c.sigma, np.ones(12))
    np.testing.assert_array_equal(init_theta(ds, TrainConfig(seed=3)).H, th.H)


def test_stage1_from_true_channel_does_not_increase_loss():
    theta, ds = make_data(snr=20.0, B=64)
    res = train_stage1(ds, small_config(L=10, lr_stage1=1e-3), theta0=theta)
    assert res.final_loss <= res.initial_loss


def test_stage1_moving_average_non_increasing():
    _, ds = make_data(m=16, n=4, B=128)
    res = train_stage1(ds, TrainConfig(L=10, epochs_stage1=300, lr_stage1=3e-3))
    losses = [r["loss_train"] for r in res.history]
    ma = moving_average(losses, 50)
    assert np.all(np.diff(ma) <= 1e-12)
    assert all(r["stage"] == "stage1" for r in res.history)


def test_stage1_beats_random_channel_at_8db():
    wins = 0
    for seed in range(10):
        theta, ds = make_data(m=32, n=8, B=512, seed=10 * seed + 1, channel_seed=seed)
        test = generate_dataset(theta, B=512, seed=10 * seed + 2)
        cfg = TrainConfig(seed=seed, epochs_stage1=60, lr_stage1=1e-2)
        learned = train_stage1(ds, cfg).theta
        basic = UnfoldedWeights.basic(cfg.L, 8, cfg.delta)
        rand = SystemParams(sample_rayleigh_channel(32, 8, 777 + seed), theta.sigma)
        ber_learned = np.mean(detect(test.r_obs, learned, basic) != test.x_true)
        ber_rand = np.mean(detect(test.r_obs, rand, basic) != test.x_true)
        wins += ber_learned < ber_rand
    assert wins == 10


def test_stage1_diverging_raises_training_error():
    _, ds = make_data(m=6, n=2, B=16)
    with np.errstate(all="ignore"), pytest.raises(TrainingError) as info:
        train_stage1(ds, TrainConfig(L=3, lr_stage1=1e200, epochs_stage1=5))
    assert info.value.epoch == 2 and info.value.stage == "stage1"
    assert "epoch 2" in str(info.value)


def test_stage2_lr_zero_and_handoff_continuity():
    _, ds = make_data()
    cfg = small_config()
    s1 = train_stage1(ds, cfg)
    s2 = train_stage2(ds, s1.theta, small_config(lr_stage2=0.0))
    np.testing.assert_array_equal(s2.phi.w, UnfoldedWeights.basic(5, 3, 0.01).w)
    assert abs(s2.initial_loss - s1.final_loss) <= 1e-10
    np.testing.assert_array_equal(s2.theta.H, s1.theta.H)


def test_stage2_smaller_layer_count():
    _, ds = make_data()
    s1 = train_stage1(ds, small_config())
    s2 = train_stage2(ds, s1.theta, small_config(stage2_layers=2))
    assert s2.phi.L == 2


def test_stage2_full_preconditioner_stays_psd():
    _, ds = make_data()
    cfg = small_config(full_preconditioner=True, lr_stage2=0.05)
    res = train_two_stage(ds, cfg)
    assert res.phi.w.shape == (5, 3, 3)
    for G in res.phi.preconditioners():
        assert np.linalg.eigvalsh(G).min() >= -1e-12


def test_two_stage_history_and_determinism():
    _, ds = make_data()
    _, held = make_data(seed=99)
    cfg = small_config(eval_every=5)
    a = train_two_stage(ds, cfg, held)
    b = train_two_stage(ds, cfg, held)
    np.testing.assert_array_equal(a.theta.H, b.theta.H)
    np.testing.assert_array_equal(a.phi.w, b.phi.w)
    stages = [r["stage"] for r in a.history]
    assert stages == ["stage1"] * 20 + ["stage2"] * 10
    assert [r["epoch"] for r in a.history] == list(range(1, 31))
    assert a.history[4]["ber_heldout"] is not None and a.history[3]["ber_heldout"] is None
    for rec in a.history:
        assert set(rec) == {"epoch", "stage", "loss_train", "loss_heldout", "ber_heldout",
                            "wall_ms"}


def test_trainable_noise_level():
    _, ds = make_data()
    res = train(ds, small_config(theta_trainables={"H", "C"}))
    assert np.all(res.theta.sigma > 0)
    assert not np.array_equal(res.theta.sigma, np.ones(12))


def test_one_stage_zero_epochs_and_joint_label():
    _, ds = make_data()
    cfg = small_config(mode="one_stage", epochs_stage1=0, epochs_stage2=0)
    res = train(ds, cfg)
    np.testing.assert_array_equal(res.theta.H, init_theta(ds, cfg).H)
    np.testing.assert_array_equal(res.phi.w, UnfoldedWeights.basic(5, 3, 0.01).w)
    res = train_one_stage(ds, small_config(mode="one_stage"))
    assert {r["stage"] for r in res.history} == {"joint"} and len(res.history) == 30


def test_one_stage_moving_average_non_increasing():
    _, ds = make_data(B=128)
    res = train_one_stage(ds, TrainConfig(L=8, epochs_stage1=150, epochs_stage2=100,
                                          lr_stage1=3e-3, lr_stage2=1e-3, batch_size=32))
    ma = moving_average([r["loss_train"] for r in res.history], 50)
    assert np.all(np.diff(ma) <= 1e-12)


def test_alternating_parity_and_lr_zero():
    assert [alternating_groups(e) for e in range(1, 5)] == [("theta",), ("phi",)] * 2
    _, ds = make_data()
    cfg = small_config(mode="alternating", lr_stage1=0.0, lr_stage2=0.0)
    res = train_alternating(ds, cfg, alternations=1)
    np.testing.assert_array_equal(res.theta.H, init_theta(ds, cfg).H)
    np.testing.assert_array_equal(res.phi.w, UnfoldedWeights.basic(5, 3, 0.01).w)
    res = train(ds, small_config(mode="alternating", epochs_stage1=3))
    stages = [(r["epoch"], r["stage"]) for r in res.history]
    assert stages == [(1, "alt_theta"), (2, "alt_phi"), (3, "alt_theta"), (4, "alt_phi"),
                      (5, "alt_theta"), (6, "alt_phi")]


def test_alternating_updates_only_active_group():
    _, ds = make_data()
    cfg = small_config(mode="alternating")
    one = train_alternating(ds, cfg, alternations=1)
    # the first epoch is a full-batch theta epoch, identical to one stage-1 epoch;
    # the second touches only the preconditioners
    th_only = train_stage1(ds, small_config(epochs_stage1=1))
    np.testing.assert_array_equal(one.theta.H, th_only.theta.H)
    assert not np.array_equal(one.phi.w, th_only.phi.w)


def test_variant_training_reduces_loss():
    _, ds = make_data(B=64)
    vw, hist = train_variant(ds, "lowrank", L=3, rank=1, lr=1e-2, epochs=40, batch_size=32)
    assert hist[-1]["loss_train"] < hist[0]["loss_train"]
    assert vw.num_parameters == 2 * 3 * 1 * (12 + 3)
