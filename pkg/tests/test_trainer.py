import dataclasses

import numpy as np
import pytest

from mdat import attacks, distloss, dn4
from mdat import diffcore as dc
from mdat import embednet as en
from mdat import trainer as T
from mdat.episodes import generate_synthetic, quantize
from mdat.selfcheck import toy_config, toy_episode


@pytest.fixture(scope="module")
def tiny_data():
    return quantize(generate_synthetic(n_classes=10, images_per_class=8, resolution=8, seed=4, n_way=2))


def tiny_config(**kw):
    base = dict(n_way=2, k_shot=1, q_per_class=2, widths=(4, 4, 4, 4), epochs=2, episodes_per_epoch=3,
                val_episodes=2, lr_halve_every=1)
    return T.TrainConfig(**{**base, **kw})


def fresh(cfg, seed=0):
    return en.init_params(cfg.embed_config(), seed)


def test_clean_only_loss_is_twice_the_clean_loss():
    cfg = toy_config()
    res = T.episode_loss(fresh(cfg), toy_episode(), cfg, 0.0)
    assert res.loss == 2 * res.ce_clean and res.ce_adv == res.ce_clean and res.reg == 0.0


def test_zero_weight_regularizer_matches_plain_adversarial_training():
    ep = toy_episode(1)
    a = T.episode_loss(fresh(toy_config()), ep, dataclasses.replace(toy_config("both"), lam=0.0), 0.01)
    b = T.episode_loss(fresh(toy_config()), ep, toy_config("none"), 0.01)
    assert a.loss == b.loss
    assert all(np.array_equal(a.grads[k], b.grads[k]) for k in a.grads)


def test_mode_grid_adds_the_right_terms():
    ep = toy_episode(2)
    x_adv = np.clip(ep.query + 0.01, 0, 1)
    losses = {m: T.episode_loss(fresh(toy_config()), ep, toy_config(m), 0.01, x_adv=x_adv) for m in T.MODES}
    base = losses["none"].loss
    reg = {m: losses[m].reg for m in T.MODES}
    assert reg["none"] == 0.0 and reg["class"] > 0 and reg["fea"] > 0
    assert abs(reg["both"] - reg["class"] - reg["fea"]) < 1e-12
    for m in ("class", "fea", "both"):
        assert abs(losses[m].loss - (base + 0.5 * reg[m])) < 1e-12


def test_regularizer_matches_direct_computation():
    cfg, ep = toy_config("both"), toy_episode(3)
    params = fresh(cfg)
    x_adv = np.clip(ep.query - 0.01, 0, 1)
    ecfg = cfg.embed_config()
    sup = en.embed(params, ep.support, ecfg, training=True).descriptors
    pools = dn4.SupportPool.from_support(sup, 2)
    c = en.embed(params, ep.query, ecfg, training=True).descriptors
    a = en.embed(params, x_adv, ecfg, training=True).descriptors
    pc = dn4.predict(dn4.class_scores(c, pools, cfg.k_nn))
    pa = dn4.predict(dn4.class_scores(a, pools, cfg.k_nn))
    want = np.mean(distloss.reg_loss(distloss.build_stats(c, a, sup), pc, pa).data)
    assert abs(T.episode_loss(params, ep, cfg, 0.01, x_adv=x_adv).reg - want) < 1e-12


def test_in_graph_fgsm_matches_a_separate_gradient_oracle():
    cfg, ep = toy_config("both"), toy_episode(4)
    params = fresh(cfg)
    res = T.episode_loss(params, ep, cfg, 0.007)
    ecfg = cfg.embed_config()
    sup = en.embed(en.frozen(params), ep.support, ecfg, training=True).descriptors
    grad_fn = T.query_loss_gradient(params, sup, ep.query_labels, ep.n_way, cfg)
    np.testing.assert_array_equal(res.x_adv, attacks.fgsm(grad_fn, ep.query, 0.007))
    assert res.ce_adv > res.ce_clean


def test_pgd_training_uses_the_attack_seed():
    cfg, ep = dataclasses.replace(toy_config("none"), attack="pgd"), toy_episode(5)
    a = T.episode_loss(fresh(cfg), ep, cfg, 0.01, attack_seed=1)
    b = T.episode_loss(fresh(cfg), ep, cfg, 0.01, attack_seed=1)
    c = T.episode_loss(fresh(cfg), ep, cfg, 0.01, attack_seed=2)
    assert np.array_equal(a.x_adv, b.x_adv) and not np.array_equal(a.x_adv, c.x_adv)
    assert np.abs(a.x_adv - ep.query).max() <= 0.01 + 1e-12


def test_every_trainable_tensor_gets_a_gradient():
    cfg = toy_config("both")
    res = T.episode_loss(fresh(cfg), toy_episode(6), cfg, 0.01)
    assert set(res.grads) == set(T.trainable(fresh(cfg)))
    for name, g in res.grads.items():
        assert np.all(np.isfinite(g)) and np.abs(g).sum() > 0, name


def test_first_adam_step_moves_by_the_learning_rate():
    p = {"w": dc.parameter(np.array([1.0, -2.0, 3.0]))}
    state = T.AdamState()
    T.adam_step(p, {"w": np.array([0.5, -4.0, 0.0])}, state, 0.01)
    np.testing.assert_allclose(p["w"].data, [0.99, -1.99, 3.0], atol=1e-8)
    assert state.step == 1


def test_adam_with_zero_gradients_keeps_parameters():
    p = {"w": dc.parameter(np.array([1.0, 2.0]))}
    state = T.AdamState()
    for _ in range(3):
        T.adam_step(p, {"w": np.zeros(2)}, state, 0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, 2.0])


def test_adam_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        T.adam_step({"w": dc.parameter(np.zeros(2))}, {"w": np.zeros(3)}, T.AdamState(), 0.1)


def test_learning_rate_schedule():
    assert [T.lr_schedule(e, 0.005, 10) for e in (0, 9, 10, 19, 20, 39)] == [0.005, 0.005, 0.0025, 0.0025,
                                                                              0.00125, 0.000625]
    with pytest.raises(ValueError):
        T.lr_schedule(-1, 0.005, 10)


def test_config_validation():
    for bad in (dict(eps_max=1.0), dict(eps_max=-0.1), dict(lam=-1.0), dict(mode="fea+class"),
                dict(attack="cw"), dict(n_way=0), dict(widths=(4, 4))):
        with pytest.raises(ValueError):
            T.TrainConfig(**bad)


def test_config_text_round_trip():
    cfg = tiny_config(mode="class", lam=0.25, widths=(8, 8, 16, 16), base_lr=1 / 3)
    pairs = T.parse_pairs(T.config_text(cfg))
    assert T.config_from_pairs(T.TrainConfig, pairs) == cfg


def test_config_parsing_errors():
    with pytest.raises(ValueError, match=":2:"):
        T.parse_pairs("seed=1\nnot a pair\n", "run.cfg")
    with pytest.raises(ValueError, match="duplicate"):
        T.parse_pairs("seed=1\nseed=2\n")
    with pytest.raises(KeyError):
        T.config_from_pairs(T.TrainConfig, {"lambda_fea": "1"})
    assert T.parse_pairs("# note\n\nseed = 3  # trailing\n") == {"seed": "3"}


def test_training_error_names_the_replay_point():
    err = T.TrainingError("boom", 3, 17, 42)
    assert "seed=42" in str(err) and "epoch=3" in str(err) and "episode=17" in str(err)


def test_held_out_way_is_capped_by_the_split(tiny_data):
    assert T.held_out_way(tiny_data, "test", 5) == 2
    assert T.held_out_way(tiny_data, "train", 5) == 5


def test_checkpoint_round_trip_is_byte_exact(tiny_data, tmp_path):
    res = T.train(tiny_config(epochs=1), tiny_data, tmp_path)
    raw = (tmp_path / "last.ckpt").read_bytes()
    back = T.load_checkpoint(tmp_path / "last.ckpt")
    assert T.checkpoint_bytes(back) == raw == T.checkpoint_bytes(res.final)
    assert back.config == res.final.config and back.optimizer.step == 3
    assert all(np.array_equal(back.params[k], res.final.params[k]) for k in back.params)


def test_checkpoint_rejections(tiny_data, tmp_path):
    T.train(tiny_config(epochs=1), tiny_data, tmp_path)
    path = tmp_path / "last.ckpt"
    raw = path.read_bytes()
    with pytest.raises(T.CheckpointError, match="block0.conv"):
        T.load_checkpoint(path, en.EmbedConfig(widths=(8, 4, 4, 4)))
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(T.CheckpointError):
        T.load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "long.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(T.CheckpointError):
        T.load_checkpoint(tmp_path / "long.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-8])
    with pytest.raises(T.CheckpointError):
        T.load_checkpoint(tmp_path / "short.ckpt")


def test_resume_reproduces_an_uninterrupted_run(tiny_data, tmp_path):
    cfg = tiny_config()
    T.train(cfg, tiny_data, tmp_path / "straight")
    T.train(cfg, tiny_data, tmp_path / "split", stop_after=1)
    part = T.load_checkpoint(tmp_path / "split" / "last.ckpt")
    best = T.load_checkpoint(tmp_path / "split" / "best.ckpt")
    assert part.epoch == 1
    T.train(cfg, tiny_data, tmp_path / "split", resume=part, best=best)
    for name in ("last.ckpt", "best.ckpt", "metrics.csv", "episodes.log"):
        assert (tmp_path / "straight" / name).read_bytes() == (tmp_path / "split" / name).read_bytes(), name


def test_resume_refuses_a_different_config(tiny_data, tmp_path):
    res = T.train(tiny_config(epochs=1), tiny_data, tmp_path)
    with pytest.raises(T.CheckpointError):
        T.train(tiny_config(lam=0.1), tiny_data, resume=res.final)


def test_training_outputs_and_logs(tiny_data, tmp_path):
    res = T.train(tiny_config(), tiny_data, tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == T.METRICS_HEADER and len(lines) == 3
    assert [m.lr for m in res.metrics] == [0.005, 0.0025]
    log = T.read_episode_log(tmp_path / "episodes.log")
    assert len(log) == 6 and all(r.split == "train" for r in log)
    assert all(0 <= r.eps <= 0.01 for r in log)
    assert log[2].line() == res.episodes[2].line()
    assert res.best.best_epoch == res.final.best_epoch
    assert res.best.epoch == res.best.best_epoch + 1


def test_training_is_deterministic(tiny_data):
    a = T.train(tiny_config(epochs=1), tiny_data)
    b = T.train(tiny_config(epochs=1), tiny_data)
    assert T.checkpoint_bytes(a.final) == T.checkpoint_bytes(b.final)


def test_training_episodes_follow_their_stream(tiny_data):
    cfg = tiny_config()
    ep, eps, seed = T.draw_training_episode(tiny_data, cfg, 1, 2)
    ep2, eps2, seed2 = T.draw_training_episode(tiny_data, cfg, 1, 2)
    assert ep.class_ids == ep2.class_ids and eps == eps2 and seed == seed2
    nt = T.draw_training_episode(tiny_data, dataclasses.replace(cfg, eps_max=0.0), 1, 2)
    assert nt[1] == 0.0 and nt[0].class_ids == ep.class_ids


def test_mismatched_dataset_is_rejected(tiny_data):
    with pytest.raises(ValueError, match="channels"):
        T.train(tiny_config(in_channels=1), tiny_data)
    with pytest.raises(ValueError, match="images"):
        T.train(tiny_config(q_per_class=10), tiny_data)
