import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfcswarm import envs, nn, ppo
from mfcswarm.features import make_feature_spec
from mfcswarm.policies import make_xi_spec


def small_setup(**env_kw):
    kw = dict(n_agents=10, horizon=20)
    kw.update(env_kw)
    cfg = envs.vicsek_config(**kw)
    return ppo.Setup(cfg, make_feature_spec(cfg, points_per_axis=3),
                     make_xi_spec(cfg, points_per_axis=2))


SMALL = dict(batch_size=80, minibatch_size=40, num_envs=2, n_epochs=2)


def brute_gae(r, v, nv, done, trunc, gamma, lam):
    """Double sum over the rest of each episode segment."""
    n = len(r)
    delta = [r[t] + gamma * nv[t] * (0.0 if done[t] else 1.0) - v[t] for t in range(n)]
    out = []
    for t in range(n):
        acc = 0.0
        for s in range(t, n):
            acc += (gamma * lam) ** (s - t) * delta[s]
            if done[s] or trunc[s]:
                break
        out.append(acc)
    return np.array(out)


def test_table_defaults():
    c = ppo.PpoConfig()
    assert (c.gamma, c.gae_lambda, c.kl_coeff, c.clip, c.lr) == (0.99, 1.0, 0.03, 0.2, 5e-5)
    assert (c.batch_size, c.minibatch_size, c.n_epochs, c.optimizer) == (4000, 1000, 5, "adam")


@pytest.mark.parametrize("kw", [dict(minibatch_size=300), dict(gamma=1.0), dict(gae_lambda=1.5),
                                dict(clip=0.0), dict(num_envs=3), dict(optimizer="rmsprop")])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        ppo.PpoConfig(**kw)


# --- GAE ------------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0), st.floats(0.5, 0.999))
def test_gae_matches_double_sum(seed, lam, gamma):
    rng = np.random.default_rng(seed)
    r, v, nv = rng.normal(size=(3, 10))
    done = rng.uniform(size=10) < 0.2
    trunc = np.zeros(10, dtype=bool)
    trunc[-1] = not done[-1]
    adv, targ = ppo.compute_gae(r, v, nv, done, trunc, gamma, lam)
    np.testing.assert_allclose(adv, brute_gae(r, v, nv, done, trunc, gamma, lam), atol=1e-10)
    np.testing.assert_allclose(targ, adv + v, atol=1e-15)


def test_gae_lambda_one_is_return_to_go():
    r = np.array([1.0, -2.0, 0.5, 3.0, 1.0, 1.0])
    done = np.array([0, 0, 0, 1, 0, 1], dtype=bool)
    z = np.zeros(6)
    adv, _ = ppo.compute_gae(r, z, z, done, np.zeros(6, bool), 0.9, 1.0)
    want = [1 - 2 * 0.9 + 0.5 * 0.81 + 3 * 0.729, -2 + 0.5 * 0.9 + 3 * 0.81, 0.5 + 3 * 0.9, 3.0, 1.9, 1.0]
    np.testing.assert_allclose(adv, want, atol=1e-12)


def test_gae_lambda_one_with_baseline():
    rng = np.random.default_rng(1)
    r, v = rng.normal(size=(2, 8))
    nv = np.append(v[1:], 0.0)
    done = np.zeros(8, bool)
    done[-1] = True
    adv, _ = ppo.compute_gae(r, v, nv, done, np.zeros(8, bool), 0.95, 1.0)
    rtg = [sum(0.95 ** (s - t) * r[s] for s in range(t, 8)) for t in range(8)]
    np.testing.assert_allclose(adv, np.array(rtg) - v, atol=1e-10)


def test_gae_lambda_zero_is_td_error():
    rng = np.random.default_rng(2)
    r, v, nv = rng.normal(size=(3, 6))
    done = np.array([0, 1, 0, 0, 0, 0], bool)
    adv, _ = ppo.compute_gae(r, v, nv, done, np.zeros(6, bool), 0.9, 0.0)
    np.testing.assert_allclose(adv, r + 0.9 * nv * ~done - v, atol=1e-15)


# --- losses ------------------------------------------------------------------


def tiny_policy(seed=0, k=2, f=3):
    return nn.init_mlp([f, 6, 2 * k], np.random.default_rng(seed), out_gain=1.0)


def sample_batch(policy, rng, n=64):
    feats = rng.normal(size=(n, policy.sizes[0]))
    head, _ = nn.split_head(nn.forward(policy, feats)[0])
    xi = nn.gaussian_sample(head, rng)
    return feats, xi, nn.gaussian_logprob(head, xi), head


def test_identity_update_point():
    rng = np.random.default_rng(3)
    pi = tiny_policy()
    feats, xi, logp, head = sample_batch(pi, rng)
    adv = rng.normal(size=64)
    adv = (adv - adv.mean()) / adv.std()
    loss, _, kl, cf = ppo.policy_loss_grads(pi, feats, xi, logp, head.mean, head.log_std, adv, 0.2, 0.03)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert kl == pytest.approx(0.0, abs=1e-15)
    assert cf == 0.0


def test_unclipped_gradient_is_reinforce_direction():
    rng = np.random.default_rng(4)
    pi = tiny_policy(seed=5)
    feats, xi, logp, head = sample_batch(pi, rng)
    adv = rng.normal(size=64)
    _, grads, _, _ = ppo.policy_loss_grads(pi, feats, xi, logp, head.mean, head.log_std, adv, 1e9, 0.0)
    g = np.concatenate([x.ravel() for x in grads])

    # finite-difference gradient of -mean(A * log pi(xi | f))
    def objective():
        h, _ = nn.split_head(nn.forward(pi, feats)[0])
        return -np.mean(adv * nn.gaussian_logprob(h, xi))

    ref = []
    for p in pi.params():
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + 1e-6
            fp = objective()
            p[idx] = old - 1e-6
            fm = objective()
            p[idx] = old
            ref.append((fp - fm) / 2e-6)
    ref = np.array(ref)
    cos = g @ ref / (np.linalg.norm(g) * np.linalg.norm(ref))
    assert cos >= 1 - 1e-6


def test_loss_gradient_matches_finite_differences_off_identity():
    rng = np.random.default_rng(6)
    pi = tiny_policy(seed=7)
    feats, xi, _, head = sample_batch(pi, rng, n=16)
    logp_old = nn.gaussian_logprob(head, xi) + rng.normal(scale=0.1, size=16)
    old_mean = head.mean + 0.05
    adv = rng.normal(size=16)
    args = (feats, xi, logp_old, old_mean, head.log_std, adv, 0.2, 0.03)
    _, grads, _, _ = ppo.policy_loss_grads(pi, *args)
    for p, g in zip(pi.params(), grads):
        for idx in list(np.ndindex(p.shape))[:10]:
            old = p[idx]
            p[idx] = old + 1e-6
            fp = ppo.policy_loss_grads(pi, *args)[0]
            p[idx] = old - 1e-6
            fm = ppo.policy_loss_grads(pi, *args)[0]
            p[idx] = old
            assert g[idx] == pytest.approx((fp - fm) / 2e-6, rel=1e-4, abs=1e-7)


def test_value_loss_gradient():
    rng = np.random.default_rng(8)
    v = nn.init_mlp([3, 5, 1], rng, out_gain=1.0)
    f, t = rng.normal(size=(20, 3)), rng.normal(size=20)
    loss, grads = ppo.value_loss_grads(v, f, t)
    assert loss == pytest.approx(np.mean((nn.forward(v, f)[0][:, 0] - t) ** 2))
    p = v.weights[0]
    old = p[1, 2]
    p[1, 2] = old + 1e-6
    fp = ppo.value_loss_grads(v, f, t)[0]
    p[1, 2] = old - 1e-6
    fm = ppo.value_loss_grads(v, f, t)[0]
    p[1, 2] = old
    assert grads[0][1, 2] == pytest.approx((fp - fm) / 2e-6, rel=1e-5)


# --- update ------------------------------------------------------------------


def bandit_batch(policy, rng, n, target):
    feats = np.ones((n, 1))
    head, _ = nn.split_head(nn.forward(policy, feats)[0])
    xi = nn.gaussian_sample(head, rng)
    r = -(np.clip(xi[:, 0], -1, 1) - target) ** 2
    z = np.zeros(n)
    batch = ppo.RolloutBatch(feats, xi, nn.gaussian_logprob(head, xi), head.mean, head.log_std,
                             r, np.ones(n, bool), np.zeros(n, bool), z, z)
    return batch


def test_bandit_mean_moves_to_best_action():
    target = 0.4
    # exhaustive search of the expected reward over deterministic actions
    grid = np.linspace(-1, 1, 2001)
    best = grid[np.argmax(-(grid - target) ** 2)]
    rng = np.random.default_rng(9)
    pi = nn.init_mlp([1, 8, 2], rng, out_gain=0.01)
    pi.biases[-1][1] = math.log(0.3)
    critic = nn.init_mlp([1, 8, 1], rng)
    cfg = ppo.PpoConfig(batch_size=64, minibatch_size=64, num_envs=1, n_epochs=1, lr=0.01)
    opt_pi, opt_v = ppo.make_optimizer(pi, cfg), ppo.make_optimizer(critic, cfg)
    start = nn.forward(pi, np.ones(1))[0][0]
    for _ in range(200):
        b = bandit_batch(pi, rng, 64, target)
        adv, targ = ppo.compute_gae(b.reward, b.value, b.next_value, b.done, b.truncated, 0.99, 1.0)
        stats = ppo.ppo_update(pi, critic, b, adv, targ, cfg, opt_pi, opt_v, rng)
        assert 0.0 <= stats.clip_frac <= 1.0 and stats.approx_kl >= 0.0
    end = nn.forward(pi, np.ones(1))[0][0]
    assert abs(end - best) < 0.1 < abs(start - best)


def test_non_finite_loss_aborts_and_restores():
    rng = np.random.default_rng(10)
    pi = tiny_policy(seed=11, k=1, f=1)
    critic = nn.init_mlp([1, 4, 1], rng)
    b = bandit_batch(pi, rng, 8, 0.0)
    b.reward[0] = np.nan
    cfg = ppo.PpoConfig(batch_size=8, minibatch_size=8, num_envs=1, normalize_advantages=False)
    before = [p.copy() for p in pi.params() + critic.params()]
    opt_pi, opt_v = ppo.make_optimizer(pi, cfg), ppo.make_optimizer(critic, cfg)
    adv, targ = ppo.compute_gae(b.reward, b.value, b.next_value, b.done, b.truncated, 0.99, 1.0)
    stats = ppo.ppo_update(pi, critic, b, adv, targ, cfg, opt_pi, opt_v, rng)
    assert stats.aborted
    for a, p in zip(before, pi.params() + critic.params()):
        np.testing.assert_array_equal(a, p)


# --- rollouts and training ------------------------------------------------------------------


def test_paper_batch_has_twenty_episodes():
    cfg = envs.vicsek_config(n_agents=10)
    setup = ppo.Setup(cfg, make_feature_spec(cfg, points_per_axis=2), make_xi_spec(cfg, points_per_axis=1))
    pc = ppo.PpoConfig()
    pi, v = ppo.build_networks(setup, [8], 0)
    b = ppo.collect_rollouts(setup, pi, v, pc, np.random.SeedSequence(0))
    assert len(b) == 4000
    assert len(b.episode_returns) == 20 and b.done.sum() == 20


def test_rollouts_are_deterministic_and_worker_independent():
    setup = small_setup()
    pi, v = ppo.build_networks(setup, [8], 0)
    a = ppo.collect_rollouts(setup, pi, v, ppo.PpoConfig(**SMALL), np.random.SeedSequence(1))
    b = ppo.collect_rollouts(setup, pi, v, ppo.PpoConfig(**SMALL, num_workers=2), np.random.SeedSequence(1))
    for k in ("features", "xi_raw", "reward", "value"):
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))
    assert np.all(np.isfinite(a.value)) and a.done.sum() == 4


def test_lone_oscillator_reward_is_action_cost_only():
    cfg = envs.kuramoto_config(n_agents=1, horizon=20)
    setup = ppo.Setup(cfg, make_feature_spec(cfg, points_per_axis=2), make_xi_spec(cfg, points_per_axis=2))
    pi, v = ppo.build_networks(setup, [8], 0)
    b = ppo.run_segment(setup, pi, v, 40, np.random.SeedSequence(2))
    assert set(np.round(b.reward, 12)) <= {0.0, -cfg.c_action}


def test_trainer_deterministic_and_resumable(tmp_path):
    setup = small_setup()
    cfg = ppo.PpoConfig(**SMALL, lr=1e-3)

    def drop_time(m):
        return {k: v for k, v in m.items() if k != "wall_time_s"}

    a = ppo.Trainer(setup, cfg, seed=3, hidden=(8,))
    b = ppo.Trainer(setup, cfg, seed=3, hidden=(8,))
    ma = [drop_time(a.step()[0]) for _ in range(2)]
    mb = [drop_time(b.step()[0]) for _ in range(2)]
    assert ma == mb
    a.save(tmp_path / "ck")
    c = ppo.Trainer(setup, cfg, seed=0, hidden=(8,))
    c.load(tmp_path / "ck")
    assert c.iteration == 2 and c.seed == 3
    assert drop_time(a.step()[0]) == drop_time(c.step()[0])
    for x, y in zip(a.policy.params() + a.critic.params(), c.policy.params() + c.critic.params()):
        np.testing.assert_array_equal(x, y)


def test_load_rejects_mismatched_shapes(tmp_path):
    setup = small_setup()
    cfg = ppo.PpoConfig(**SMALL)
    ppo.Trainer(setup, cfg, seed=0, hidden=(8,)).save(tmp_path)
    with pytest.raises(ValueError):
        ppo.Trainer(setup, cfg, seed=0, hidden=(9,)).load(tmp_path)


# --- evaluation ------------------------------------------------------------------


def test_open_loop_modes():
    setup = small_setup()
    pi, _ = ppo.build_networks(setup, [8], 0)
    ref = ppo.run_episode(setup, pi, np.random.default_rng(np.random.SeedSequence([5, 4])))
    rep = ppo.evaluate(setup, pi, 3, seed=5, mode="replay_sequence")
    frz = ppo.evaluate(setup, pi, 2, seed=5, mode="freeze_t0")
    for r in rep:
        np.testing.assert_array_equal(r.xis, ref.xis)
    for r in frz:
        assert np.all(r.xis == ref.xis[0])
    with pytest.raises(ValueError):
        ppo.evaluate(setup, pi, 1, seed=5, mode="open")


def test_schedule_length_must_match_horizon():
    setup = small_setup()
    pi, _ = ppo.build_networks(setup, [8], 0)
    with pytest.raises(ValueError):
        ppo.run_episode(setup, pi, np.random.default_rng(0), xi_schedule=np.zeros((5, setup.xi.dim)))


def test_episode_return_is_undiscounted_sum():
    setup = small_setup()
    pi, _ = ppo.build_networks(setup, [8], 0)
    sched = np.full((20, setup.xi.dim), -1.0)
    sched[:, 1::3] = 1.0  # always "no turn": zero action cost
    res = ppo.run_episode(setup, pi, np.random.default_rng(6), xi_schedule=sched)
    # replay the same randomness by hand
    rng = np.random.default_rng(6)
    from mfcswarm.policies import act, lower_from_xi
    state, obs = envs.reset(setup.env, rng)
    total = 0.0
    for t in range(20):
        u, _ = act(lower_from_xi(sched[t], setup.xi), obs, rng)
        out = envs.step(state, u, setup.env, rng)
        total += out.reward
        state, obs = out.state, out.observations
    assert res.ret == total
    assert res.final_R == envs.polar_order(state)


def test_mean_ci95():
    m, h = ppo.mean_ci95([1.0, 2.0, 3.0])
    assert m == 2.0
    assert h == pytest.approx(4.302652729911275 * 1.0 / math.sqrt(3))
