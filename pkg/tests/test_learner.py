import math

import numpy as np
import pytest

from silosched import policy as pol
from silosched.infra import build_fleet
from silosched.learner import (
    AgnosticActor,
    FingerprintBuffer,
    FixedHeadActor,
    LearnerParams,
    SiloLearner,
    TrajectoryBatch,
    actor_update,
    collect,
    critic_update,
    discounted_returns,
    gae,
)
from silosched.numerics import masked_softmax
from silosched.simenv import SiloEnv, SimParams


def gae_oracle(rewards, values, next_values, dones, gamma, lam):
    """Direct truncated summation A_t = sum_l (gamma lam)^l delta_{t+l}."""
    t_n = len(rewards)
    not_done = 1.0 - dones.astype(float)
    deltas = rewards + gamma * next_values * not_done - values
    adv = np.zeros(t_n)
    for t in range(t_n):
        acc = 0.0
        for l in range(t, t_n):
            acc += (gamma * lam) ** (l - t) * deltas[l]
            if dones[l]:
                break
        adv[t] = acc
    return adv


def random_batch_arrays(rng, t_n):
    rewards = rng.normal(size=t_n)
    values = rng.normal(size=t_n)
    next_values = rng.normal(size=t_n)
    dones = np.zeros(t_n, dtype=bool)
    dones[-1] = True
    return rewards, values, next_values, dones


def test_gae_matches_oracle_on_random_batches():
    rng = np.random.default_rng(0)
    for _ in range(200):
        t_n = int(rng.integers(1, 51))
        gamma = float(rng.uniform(0.8, 1.0))
        lam = float(rng.uniform(0.0, 1.0))
        r, v, nv, d = random_batch_arrays(rng, t_n)
        adv, targets = gae(r, v, nv, d, gamma, lam)
        expected = gae_oracle(r, v, nv, d, gamma, lam)
        assert np.max(np.abs(adv - expected)) < 1e-10
        assert np.allclose(targets, r + gamma * nv * (1 - d))


def test_gae_lambda_zero_is_one_step_td():
    rng = np.random.default_rng(1)
    r, v, nv, d = random_batch_arrays(rng, 20)
    adv, _ = gae(r, v, nv, d, 0.99, 0.0)
    deltas = r + 0.99 * nv * (1 - d) - v
    assert np.array_equal(adv, deltas)


def test_gae_worked_example():
    # 3 steps, gamma=0.9, lambda=0.8, V=0, r=[0,0,1]
    r = np.array([0.0, 0.0, 1.0])
    v = np.zeros(3)
    nv = np.zeros(3)
    d = np.array([False, False, True])
    adv, _ = gae(r, v, nv, d, 0.9, 0.8)
    assert adv[2] == pytest.approx(1.0)
    assert adv[1] == pytest.approx(0.72)
    assert adv[0] == pytest.approx(0.5184)


def test_gae_empty_batch():
    with pytest.raises(ValueError):
        gae(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0, dtype=bool), 0.9, 0.9)


def test_discounted_returns():
    r = np.array([1.0, 2.0, 4.0])
    d = np.array([False, False, True])
    out = discounted_returns(r, d, 0.5)
    assert np.allclose(out, [1 + 0.5 * (2 + 0.5 * 4), 2 + 0.5 * 4, 4.0])


# ---------------------------------------------------------------- synthetic batches


def bandit_features(rng, n_cand=2):
    return rng.random(pol.D_TASK), rng.random((n_cand, pol.D_RES)), rng.random(pol.D_GLOBAL)


def bandit_batch(actor, rng, n_samples=64, n_cand=2, kappa=None, features=None):
    """Fixed-feature bandit: one decision per 'episode'."""
    if features is None:
        features = bandit_features(rng, n_cand)
    task, res, glob = features
    psi_task = np.tile(task, (n_samples, 1))
    psi_res = np.tile(res, (n_samples, 1, 1))
    psi_glob = np.tile(glob, (n_samples, 1))
    masks = np.ones((n_samples, n_cand), dtype=bool)
    scores, _ = pol.actor_scores(actor.params, psi_task, psi_res, psi_glob)
    probs = masked_softmax(scores, masks)
    actions = np.array([int(np.searchsorted(np.cumsum(p), rng.random())) for p in probs])
    actions = np.minimum(actions, n_cand - 1)
    logp = np.log(probs[np.arange(n_samples), actions])
    if kappa is not None:
        logp = logp - math.log(kappa)
    rewards = (actions == 0).astype(float)
    psi_state = np.concatenate([psi_task, psi_glob], axis=1)
    return TrajectoryBatch(
        psi_task=psi_task, psi_res=psi_res, psi_glob=psi_glob,
        psi_state=psi_state, next_psi_state=np.zeros_like(psi_state),
        masks=masks, actions=actions, log_prob_old=logp,
        rewards=rewards, dones=np.ones(n_samples, dtype=bool),
        fingerprints=np.zeros((n_samples, pol.D_RES)), episode=None,
    )


def test_clip_hand_case_positive_advantage():
    # kappa = 1.5, eps = 0.2, A = +1: objective 1.2, zero gradient through kappa
    rng = np.random.default_rng(2)
    actor = AgnosticActor(pol.ActorParams.random(rng, 8))
    batch = bandit_batch(actor, rng, n_samples=16, kappa=1.5)
    adv = np.ones(16)
    lp = LearnerParams(actor_lr=0.1, clip_epsilon=0.2, normalize_advantages=False)
    new_actor, stats = actor_update(batch, adv, actor, lp)
    assert stats.objective == pytest.approx(1.2, abs=1e-9)
    assert stats.clip_fraction == 1.0
    assert np.array_equal(new_actor.flatten(), actor.flatten())  # clip kills the gradient


def test_clip_hand_case_negative_advantage():
    # kappa = 0.5, eps = 0.2, A = -1: objective min(-0.5, -0.8) = -0.8, clipped branch
    rng = np.random.default_rng(3)
    actor = AgnosticActor(pol.ActorParams.random(rng, 8))
    batch = bandit_batch(actor, rng, n_samples=16, kappa=0.5)
    adv = -np.ones(16)
    lp = LearnerParams(actor_lr=0.1, clip_epsilon=0.2, normalize_advantages=False)
    new_actor, stats = actor_update(batch, adv, actor, lp)
    assert stats.objective == pytest.approx(-0.8, abs=1e-9)
    assert np.array_equal(new_actor.flatten(), actor.flatten())


def test_clip_upper_bound_property():
    rng = np.random.default_rng(4)
    for _ in range(100):
        kappa = float(rng.uniform(0.2, 2.5))
        adv = float(rng.normal())
        eps = 0.2
        clipped = min(max(kappa, 1 - eps), 1 + eps)
        objective = min(kappa * adv, clipped * adv)
        assert objective <= kappa * adv + 1e-12


def test_ratio_one_matches_vanilla_policy_gradient():
    rng = np.random.default_rng(5)
    actor = AgnosticActor(pol.ActorParams.random(rng, 8))
    batch = bandit_batch(actor, rng, n_samples=32)
    adv = rng.normal(size=32)
    lp = LearnerParams(actor_lr=0.05, normalize_advantages=False, grad_norm_clip=1e9)
    new_actor, _ = actor_update(batch, adv, actor, lp)

    # manual vanilla PG: upstream = A * (onehot - probs) / T
    scores, tape = actor.scores_batch(batch)
    probs = masked_softmax(scores, batch.masks)
    coeff = adv / len(batch)
    upstream = -coeff[:, None] * probs
    upstream[np.arange(len(batch)), batch.actions] += coeff
    manual = actor.backward_flat(tape, upstream)
    delta = new_actor.flatten() - actor.flatten()
    assert np.allclose(delta, 0.05 * manual, atol=1e-12)


def test_unclipped_limit_equals_is_weighted_gradient():
    rng = np.random.default_rng(6)
    actor = AgnosticActor(pol.ActorParams.random(rng, 8))
    batch = bandit_batch(actor, rng, n_samples=32, kappa=1.4)
    adv = rng.normal(size=32)
    lp_inf = LearnerParams(actor_lr=0.05, clip_epsilon=1e9,
                           normalize_advantages=False, grad_norm_clip=1e9)
    new_clip, _ = actor_update(batch, adv, actor, lp_inf)

    scores, tape = actor.scores_batch(batch)
    probs = masked_softmax(scores, batch.masks)
    logp_new = np.log(probs[np.arange(len(batch)), batch.actions])
    kappa = np.exp(logp_new - batch.log_prob_old)
    coeff = kappa * adv / len(batch)
    upstream = -coeff[:, None] * probs
    upstream[np.arange(len(batch)), batch.actions] += coeff
    manual = actor.backward_flat(tape, upstream)
    assert np.allclose(new_clip.flatten() - actor.flatten(), 0.05 * manual, atol=1e-12)


def test_bandit_improvement_over_100_updates():
    rng = np.random.default_rng(7)
    actor = AgnosticActor(pol.ActorParams.random(rng, 8))
    features = bandit_features(np.random.default_rng(8))

    def p_good(a):
        scores, _ = pol.actor_scores(a.params, features[0][None],
                                     features[1][None], features[2][None])
        return masked_softmax(scores, np.ones((1, 2), dtype=bool))[0, 0]

    p0 = p_good(actor)
    lp = LearnerParams(actor_lr=0.3)
    for k in range(100):
        batch = bandit_batch(actor, np.random.default_rng(100 + k), n_samples=64,
                             features=features)
        adv = batch.rewards - batch.rewards.mean()
        actor, _ = actor_update(batch, adv, actor, lp)
    assert p_good(actor) > p0
    assert p_good(actor) > 0.8


def test_actor_update_aborts_on_nonfinite():
    rng = np.random.default_rng(10)
    actor = AgnosticActor(pol.ActorParams.random(rng, 8))
    batch = bandit_batch(actor, rng, n_samples=8)
    adv = np.full(8, np.nan)
    lp = LearnerParams(normalize_advantages=False)
    new_actor, stats = actor_update(batch, adv, actor, lp)
    assert stats.aborted
    assert new_actor is actor


# ---------------------------------------------------------------- critic updates


def test_critic_perfect_fit_no_step():
    rng = np.random.default_rng(11)
    critic = pol.CriticParams.random(rng, 8)
    batch = bandit_batch(AgnosticActor(pol.ActorParams.random(rng, 8)), rng, n_samples=16)
    values, _ = pol.value_batch(critic, batch.psi_state)
    new_critic, d_i, loss = critic_update(batch, values.copy(), critic,
                                          LearnerParams(critic_lr=0.1))
    assert loss == 0.0
    assert np.all(d_i == 0.0)
    assert np.array_equal(new_critic.flatten(), critic.flatten())


def test_critic_gradient_matches_fd():
    rng = np.random.default_rng(12)
    critic = pol.CriticParams.random(rng, 6)
    actor = AgnosticActor(pol.ActorParams.random(rng, 6))
    batch = bandit_batch(actor, rng, n_samples=10)
    targets = rng.normal(size=10)
    _, d_i, _ = critic_update(batch, targets, critic, LearnerParams(critic_lr=0.0))

    def loss_at(theta):
        v, _ = pol.value_batch(critic.load_flat(theta), batch.psi_state)
        return float(0.5 * np.mean((v - targets) ** 2))

    step = 1e-5
    theta0 = critic.flatten()
    numeric = np.zeros_like(theta0)
    for i in range(theta0.size):
        tp, tm = theta0.copy(), theta0.copy()
        tp[i] += step
        tm[i] -= step
        numeric[i] = (loss_at(tp) - loss_at(tm)) / (2 * step)
    denom = np.maximum(np.abs(numeric), 1.0)
    assert np.max(np.abs(d_i - numeric) / denom) < 1e-5


def test_critic_step_reduces_loss():
    rng = np.random.default_rng(13)
    critic = pol.CriticParams.random(rng, 8)
    actor = AgnosticActor(pol.ActorParams.random(rng, 8))
    batch = bandit_batch(actor, rng, n_samples=32)
    targets = rng.normal(size=32) * 5.0
    values, _ = pol.value_batch(critic, batch.psi_state)
    loss_before = float(0.5 * np.mean((values - targets) ** 2))
    new_critic, _, _ = critic_update(batch, targets, critic, LearnerParams(critic_lr=1e-3))
    values_after, _ = pol.value_batch(new_critic, batch.psi_state)
    loss_after = float(0.5 * np.mean((values_after - targets) ** 2))
    assert loss_after < loss_before


# ---------------------------------------------------------------- fingerprints


def test_fingerprint_buffer_window():
    buf = FingerprintBuffer(k=3, dim=2)
    assert np.array_equal(buf.mean(), np.zeros(2))
    buf.extend(np.array([[1.0, 0.0]]))
    assert np.array_equal(buf.mean(), [1.0, 0.0])  # partial window
    buf.extend(np.array([[3.0, 0.0], [5.0, 0.0], [7.0, 0.0]]))
    assert len(buf) == 3
    assert np.allclose(buf.mean(), [5.0, 0.0])


def test_fingerprint_window_of_one():
    buf = FingerprintBuffer(k=1, dim=2)
    buf.extend(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(buf.mean(), [3.0, 4.0])


# ---------------------------------------------------------------- full collection


@pytest.fixture(scope="module")
def learner_setup():
    fleet = build_fleet(4, seed=55, resources_range=(4, 6))
    silo = fleet.silos[2]
    sim = SimParams(apps_per_episode=6)
    lp = LearnerParams(actor_lr=0.5, critic_lr=0.05, hidden=16, critic_hidden=8,
                       warmup_decisions=40)
    actor = AgnosticActor.create(np.random.default_rng(0), 16, silo.n_resources)
    critic = pol.CriticParams.random(np.random.default_rng(1), 8)
    return silo, sim, lp, actor, critic


def test_collect_one_decision_per_task(learner_setup):
    silo, sim, lp, actor, critic = learner_setup
    env = SiloEnv(silo, sim)
    ex = pol.FeatureExtractor(silo)
    batch = collect(env, ex, actor, np.random.default_rng(3), np.random.default_rng(4))
    assert len(batch) == sum(app.n_tasks for app in env.apps)
    assert np.all(batch.log_prob_old <= 0.0)
    assert np.all(np.isfinite(batch.log_prob_old))
    assert batch.fingerprints.shape == (len(batch), pol.D_RES)
    assert batch.dones[-1] and not batch.dones[:-1].any()


def test_collect_deterministic(learner_setup):
    silo, sim, lp, actor, critic = learner_setup
    env = SiloEnv(silo, sim)
    ex = pol.FeatureExtractor(silo)
    b1 = collect(env, ex, actor, np.random.default_rng(3), np.random.default_rng(4))
    b2 = collect(env, ex, actor, np.random.default_rng(3), np.random.default_rng(4))
    assert np.array_equal(b1.actions, b2.actions)
    assert np.array_equal(b1.rewards, b2.rewards)
    assert np.array_equal(b1.fingerprints, b2.fingerprints)


def test_local_round_contracts(learner_setup):
    silo, sim, lp, actor, critic = learner_setup
    lrn = SiloLearner(silo, sim, lp, actor, critic, root_seed=99)
    lrn.warmup()
    assert lrn.normalizer.frozen
    res = lrn.local_round(omega=2)
    assert res.fingerprint.shape == (pol.D_RES,)
    assert res.critic_grad.shape == (critic.n_params,)
    assert len(res.stats) == 2
    for st in res.stats:
        assert 0.0 <= st.violation_rate <= 1.0
        assert np.isfinite(st.weighted_cost)


def test_fixed_head_learner_runs(learner_setup):
    silo, sim, lp, _, critic = learner_setup
    actor = FixedHeadActor.create(np.random.default_rng(5), 16, 8, silo.n_resources)
    lrn = SiloLearner(silo, sim, lp, actor, critic, root_seed=7)
    lrn.warmup()
    res = lrn.local_round(omega=1)
    assert res.fingerprint.shape == (pol.D_STATE,)
