import numpy as np
import pytest

from silosched import policy as pol
from silosched.infra import build_fleet
from silosched.numerics import EmptyFeasibleSet, StaleTapeError
from silosched.simenv import SiloEnv, SimParams


def random_actor(seed, hidden=8):
    return pol.ActorParams.random(np.random.default_rng(seed), hidden)


def random_feats(rng, n_cand):
    return pol.FeatureVectors(
        psi_task=rng.random(pol.D_TASK),
        psi_res=rng.random((n_cand, pol.D_RES)),
        psi_global=rng.random(pol.D_GLOBAL),
    )


def central_diff(f, x0, step=1e-5):
    g = np.zeros_like(x0)
    for i in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (f(xp) - f(xm)) / (2 * step)
    return g


# ---------------------------------------------------------------- scoring


def test_zero_fusion_weights_zero_scores():
    actor = random_actor(0)
    actor.fusion_w[:] = 0.0
    feats = random_feats(np.random.default_rng(1), 5)
    assert all(pol.score(actor, feats, c) == 0.0 for c in range(5))
    fp = pol.fingerprint_contribution(actor, feats, 2)
    assert np.all(fp == 0.0)


def test_identical_candidates_identical_scores():
    actor = random_actor(2)
    rng = np.random.default_rng(3)
    feats = random_feats(rng, 4)
    feats.psi_res[2] = feats.psi_res[0]
    assert pol.score(actor, feats, 2) == pytest.approx(pol.score(actor, feats, 0))


def test_scores_shape_independent():
    actor = random_actor(4)
    rng = np.random.default_rng(5)
    for n_cand in (3, 14):
        feats = random_feats(rng, n_cand)
        scores, _ = pol.actor_scores(actor, feats.psi_task, feats.psi_res, feats.psi_global)
        assert scores.shape == (n_cand,)


def test_fast_scores_match_taped_forward():
    actor = random_actor(6, hidden=16)
    rng = np.random.default_rng(7)
    for _ in range(20):
        feats = random_feats(rng, int(rng.integers(2, 10)))
        a = pol.actor_scores_fast(actor, feats.psi_task, feats.psi_res, feats.psi_global)
        b, _ = pol.actor_scores(actor, feats.psi_task, feats.psi_res, feats.psi_global)
        assert np.allclose(a, b, atol=1e-12)


def test_flatten_round_trip():
    actor = random_actor(8, hidden=12)
    feats = random_feats(np.random.default_rng(9), 6)
    flat = actor.flatten()
    clone = actor.load_flat(flat)
    s1, _ = pol.actor_scores(actor, feats.psi_task, feats.psi_res, feats.psi_global)
    s2, _ = pol.actor_scores(clone, feats.psi_task, feats.psi_res, feats.psi_global)
    assert np.array_equal(s1, s2)
    assert np.array_equal(clone.flatten(), flat)


@pytest.mark.parametrize("seed", range(6))
def test_score_parameter_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed)
    actor = random_actor(seed + 100, hidden=6)
    n_cand = int(rng.integers(2, 6))
    feats = random_feats(rng, n_cand)
    cand = int(rng.integers(n_cand))

    scores, tape = pol.actor_scores(actor, feats.psi_task, feats.psi_res, feats.psi_global)
    up = np.zeros(n_cand)
    up[cand] = 1.0
    grads, _ = pol.actor_backward(actor, tape, up)
    analytic = grads.flatten()

    def objective(theta):
        a = actor.load_flat(theta)
        s, _ = pol.actor_scores(a, feats.psi_task, feats.psi_res, feats.psi_global)
        return float(s[cand])

    numeric = central_diff(objective, actor.flatten())
    denom = np.maximum(np.abs(numeric), 1.0)
    assert np.max(np.abs(analytic - numeric) / denom) < 1e-5


@pytest.mark.parametrize("seed", range(6))
def test_fingerprint_matches_fd_and_locality(seed):
    rng = np.random.default_rng(seed)
    actor = random_actor(seed + 200, hidden=6)
    n_cand = 5
    feats = random_feats(rng, n_cand)
    cand = int(rng.integers(n_cand))
    fp = pol.fingerprint_contribution(actor, feats, cand)
    assert fp.shape == (pol.D_RES,)

    def objective(psi_r):
        f2 = pol.FeatureVectors(feats.psi_task, feats.psi_res.copy(), feats.psi_global)
        f2.psi_res[cand] = psi_r
        return pol.score(actor, f2, cand)

    numeric = central_diff(objective, feats.psi_res[cand].copy())
    denom = np.maximum(np.abs(numeric), 1.0)
    assert np.max(np.abs(fp - numeric) / denom) < 1e-5

    # independent of the other candidates' features
    feats.psi_res[(cand + 1) % n_cand] = rng.random(pol.D_RES)
    fp2 = pol.fingerprint_contribution(actor, feats, cand)
    assert np.array_equal(fp, fp2)


def test_stale_actor_tape_rejected():
    actor = random_actor(10)
    feats = random_feats(np.random.default_rng(11), 3)
    _, tape = pol.actor_scores(actor, feats.psi_task, feats.psi_res, feats.psi_global)
    other = actor.load_flat(actor.flatten())
    with pytest.raises(StaleTapeError):
        pol.actor_backward(other, tape, np.ones(3))


# ---------------------------------------------------------------- acting


def test_act_single_feasible_forced():
    actor = random_actor(12)
    feats = random_feats(np.random.default_rng(13), 4)
    mask = np.array([False, False, True, False])
    a, logp, probs = pol.act(actor, feats, mask, np.random.default_rng(0))
    assert a == 2 and logp == 0.0
    assert probs[2] == 1.0 and probs.sum() == 1.0


def test_act_uniform_scores():
    actor = random_actor(14)
    actor.fusion_w[:] = 0.0
    feats = random_feats(np.random.default_rng(15), 5)
    mask = np.array([True, True, False, True, False])
    _, _, probs = pol.act(actor, feats, mask, np.random.default_rng(1))
    assert np.allclose(probs[mask], 1.0 / 3.0)


def test_act_log_prob_consistency():
    actor = random_actor(16)
    rng = np.random.default_rng(17)
    for _ in range(50):
        feats = random_feats(rng, 6)
        mask = rng.random(6) < 0.7
        if not mask.any():
            mask[0] = True
        a, logp, probs = pol.act(actor, feats, mask, rng)
        assert np.exp(logp) == pytest.approx(probs[a], abs=1e-12)
        assert probs[~mask].sum() == 0.0
        assert abs(probs.sum() - 1.0) <= 1e-9


def test_greedy_shift_invariance():
    actor = random_actor(18)
    feats = random_feats(np.random.default_rng(19), 5)
    mask = np.ones(5, dtype=bool)
    scores = pol.actor_scores_fast(actor, feats.psi_task, feats.psi_res, feats.psi_global)
    a1 = int(np.argmax(scores))
    a2 = int(np.argmax(scores + 1234.5))
    assert a1 == a2


def test_permutation_equivariance():
    actor = random_actor(20)
    rng = np.random.default_rng(21)
    feats = random_feats(rng, 6)
    mask = np.array([True, True, True, False, True, True])
    perm = rng.permutation(6)
    _, _, probs = pol.act(actor, feats, mask, None)
    feats_p = pol.FeatureVectors(feats.psi_task, feats.psi_res[perm], feats.psi_global)
    _, _, probs_p = pol.act(actor, feats_p, mask[perm], None)
    assert np.allclose(probs_p, probs[perm], atol=1e-12)


def test_act_empty_mask_propagates():
    actor = random_actor(22)
    feats = random_feats(np.random.default_rng(23), 3)
    with pytest.raises(EmptyFeasibleSet):
        pol.act(actor, feats, np.zeros(3, dtype=bool), None)


# ---------------------------------------------------------------- critic


def test_value_constant_head():
    critic = pol.CriticParams.random(np.random.default_rng(24), 8)
    critic.net.layers[-1].weights[:] = 0.0
    critic.net.layers[-1].bias[:] = 3.25
    rng = np.random.default_rng(25)
    for _ in range(5):
        assert pol.value(critic, rng.random(pol.D_STATE)) == pytest.approx(3.25)


def test_value_deterministic():
    critic = pol.CriticParams.random(np.random.default_rng(26), 8)
    x = np.random.default_rng(27).random(pol.D_STATE)
    assert pol.value(critic, x) == pol.value(critic, x)


@pytest.mark.parametrize("seed", range(4))
def test_value_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed)
    critic = pol.CriticParams.random(rng, 6)
    x = rng.random(pol.D_STATE)
    v, tape = critic.net.forward(x)
    grads, _ = critic.net.backward(tape, np.ones(1))
    from silosched.numerics import flatten_grads
    analytic = flatten_grads(grads)

    def objective(theta):
        return pol.value(critic.load_flat(theta), x)

    numeric = central_diff(objective, critic.flatten())
    denom = np.maximum(np.abs(numeric), 1.0)
    assert np.max(np.abs(analytic - numeric) / denom) < 1e-5


# ---------------------------------------------------------------- features


@pytest.fixture(scope="module")
def small_fleet():
    return build_fleet(4, seed=77, resources_range=(4, 7))


def test_feature_ranges_over_random_decisions(small_fleet):
    rng = np.random.default_rng(0)
    total = 0
    for silo in small_fleet.silos:
        env = SiloEnv(silo, SimParams(apps_per_episode=8))
        ex = pol.FeatureExtractor(silo)
        for ep in range(6):
            dec = env.reset(np.random.default_rng(1000 + ep))
            while dec is not None:
                feats = ex.extract(env, env.observe(), dec)
                assert feats.psi_task.shape == (pol.D_TASK,)
                assert feats.psi_res.shape == (silo.n_resources, pol.D_RES)
                assert feats.psi_global.shape == (pol.D_GLOBAL,)
                assert feats.psi_state.shape == (pol.D_STATE,)
                assert np.all(feats.psi_task >= -1.0) and np.all(feats.psi_task <= 1.0)
                assert np.all(feats.psi_res >= 0.0) and np.all(feats.psi_res <= 1.0)
                assert np.all(feats.psi_global >= 0.0) and np.all(feats.psi_global <= 1.0)
                feas = np.flatnonzero(dec.feasible_mask)
                env.step(int(feas[rng.integers(len(feas))]))
                dec = env.decision
                total += 1
    assert total > 500


def test_colocated_predecessor_features(small_fleet):
    silo = small_fleet.silos[0]
    from silosched.workload import DagApp, TaskNode
    app = DagApp(0, [TaskNode(0, 100.0, 10.0, 5.0), TaskNode(1, 100.0, 10.0, 5.0)],
                 [(0, 1, 1.0)], deadline_ms=1e7)
    env = SiloEnv(silo, SimParams(apps_per_episode=1))
    env.reset(apps=[app])
    env.step(0)
    dec = env.decision
    feats = pol.FeatureExtractor(silo).extract(env, env.observe(), dec)
    assert feats.psi_res[0, 6] == 1.0  # best-case bandwidth at the pred's host
    assert feats.psi_res[0, 7] == 0.0  # zero rtt at the pred's host


def test_idle_silo_global_features(small_fleet):
    silo = small_fleet.silos[1]
    env = SiloEnv(silo, SimParams(apps_per_episode=1))
    dec = env.reset(np.random.default_rng(2))
    feats = pol.FeatureExtractor(silo).extract(env, env.observe(), dec)
    assert feats.psi_global[2] == 0.0 and feats.psi_global[3] == 0.0  # empty queues


# ---------------------------------------------------------------- fixed head


def test_fixed_head_shapes_and_backward():
    rng = np.random.default_rng(30)
    params = pol.FixedHeadActorParams.random(rng, hidden=6, max_actions=10)
    x = rng.random(pol.D_STATE)
    scores, tape = pol.fixed_head_scores(params, x, n_candidates=4)
    assert scores.shape == (4,)
    up = np.zeros(4)
    up[1] = 1.0
    flat, dx = pol.fixed_head_backward(params, tape, up, 4, want_state_grads=True)

    def objective(theta):
        s, _ = pol.fixed_head_scores(params.load_flat(theta), x, 4)
        return float(s[1])

    numeric = central_diff(objective, params.flatten())
    denom = np.maximum(np.abs(numeric), 1.0)
    assert np.max(np.abs(flat - numeric) / denom) < 1e-5
    assert dx.shape == (1, pol.D_STATE)
