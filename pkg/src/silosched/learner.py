"""Per-silo on-policy training loop.

One learner owns one environment: it collects an episode with masked
sampling, computes GAE advantages by backward recursion, applies a single
clipped-objective gradient-ascent step to the actor and a single TD step to
the critic, and maintains the sliding window of resource-feature gradients
that federation turns into the silo's fingerprint.

Importance ratios are recomputed against the stored collection-time log
probabilities, so on the plain collect-then-update cycle they equal one and
clipping binds only when parameters moved in between (as the update
algorithm prescribes).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import policy as pol
from .numerics import masked_softmax
from .simenv import (
    CostNormalizer,
    EpisodeResult,
    SiloEnv,
    SimParams,
    check_episode_invariants,
    raw_costs,
)
from .infra import Silo

log = logging.getLogger(__name__)


@dataclass
class LearnerParams:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    normalize_advantages: bool = True
    use_gae: bool = True
    use_clip: bool = True
    grad_norm_clip: float = 10.0
    fingerprint_window: int = 100
    hidden: int = 128
    critic_hidden: int = 64
    warmup_decisions: int = 200


@dataclass
class TrajectoryBatch:
    psi_task: np.ndarray       # [T, D_TASK]
    psi_res: np.ndarray        # [T, C, D_RES]
    psi_glob: np.ndarray       # [T, D_GLOBAL]
    psi_state: np.ndarray      # [T, D_STATE]
    next_psi_state: np.ndarray
    masks: np.ndarray          # [T, C] bool
    actions: np.ndarray        # [T] int
    log_prob_old: np.ndarray   # [T]
    rewards: np.ndarray        # [T]
    dones: np.ndarray          # [T] bool
    fingerprints: np.ndarray   # [T, fp_dim]
    episode: EpisodeResult

    def __len__(self) -> int:
        return len(self.actions)


def _sample(probs: np.ndarray, rng: np.random.Generator) -> int:
    idx = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
    idx = min(idx, len(probs) - 1)
    if probs[idx] <= 0.0:  # float-shortfall guard at the top of the cdf
        idx = int(np.argmax(probs))
    return idx


# ---------------------------------------------------------------- actor adapters


class AgnosticActor:
    """Candidate-scoring actor (the shared-parameter default)."""

    kind = "agnostic"

    def __init__(self, params: pol.ActorParams):
        self.params = params

    @classmethod
    def create(cls, rng: np.random.Generator, hidden: int, max_actions: int) -> "AgnosticActor":
        return cls(pol.ActorParams.random(rng, hidden))

    @property
    def fingerprint_dim(self) -> int:
        return pol.D_RES

    def flatten(self) -> np.ndarray:
        return self.params.flatten()

    def with_flat(self, flat: np.ndarray) -> "AgnosticActor":
        return AgnosticActor(self.params.load_flat(flat))

    def scores_batch(self, batch: "TrajectoryBatch"):
        return pol.actor_scores(self.params, batch.psi_task, batch.psi_res, batch.psi_glob)

    def backward_flat(self, tape, upstream: np.ndarray) -> np.ndarray:
        grads, _ = pol.actor_backward(self.params, tape, upstream)
        return grads.flatten()

    def fingerprints(self, batch: "TrajectoryBatch") -> np.ndarray:
        scores, tape = self.scores_batch(batch)
        up = np.zeros_like(scores)
        up[np.arange(len(batch)), batch.actions] = 1.0
        _, d_res = pol.actor_backward(self.params, tape, up, want_res_grads=True)
        return d_res[np.arange(len(batch)), batch.actions]

    def act(self, feats: pol.FeatureVectors, mask: np.ndarray,
            rng: Optional[np.random.Generator]) -> Tuple[int, float, np.ndarray]:
        scores = pol.actor_scores_fast(
            self.params, feats.psi_task, feats.psi_res, feats.psi_global)
        probs = masked_softmax(scores, mask)
        a = int(np.argmax(probs)) if rng is None else _sample(probs, rng)
        return a, float(np.log(probs[a])), probs


class FixedHeadActor:
    """Ablation actor with a max-size output head plus masking."""

    kind = "fixed_head"

    def __init__(self, params: pol.FixedHeadActorParams, n_candidates: int):
        self.params = params
        self.n_candidates = n_candidates

    @classmethod
    def create(cls, rng: np.random.Generator, hidden: int, max_actions: int,
               n_candidates: int = 0) -> "FixedHeadActor":
        return cls(pol.FixedHeadActorParams.random(rng, hidden, max_actions),
                   n_candidates or max_actions)

    @property
    def fingerprint_dim(self) -> int:
        return pol.D_STATE

    def flatten(self) -> np.ndarray:
        return self.params.flatten()

    def with_flat(self, flat: np.ndarray) -> "FixedHeadActor":
        return FixedHeadActor(self.params.load_flat(flat), self.n_candidates)

    def scores_batch(self, batch: "TrajectoryBatch"):
        return pol.fixed_head_scores(self.params, batch.psi_state, self.n_candidates)

    def backward_flat(self, tape, upstream: np.ndarray) -> np.ndarray:
        flat, _ = pol.fixed_head_backward(self.params, tape, upstream, self.n_candidates)
        return flat

    def fingerprints(self, batch: "TrajectoryBatch") -> np.ndarray:
        scores, tape = self.scores_batch(batch)
        up = np.zeros_like(scores)
        up[np.arange(len(batch)), batch.actions] = 1.0
        _, d_state = pol.fixed_head_backward(
            self.params, tape, up, self.n_candidates, want_state_grads=True)
        return d_state

    def act(self, feats: pol.FeatureVectors, mask: np.ndarray,
            rng: Optional[np.random.Generator]) -> Tuple[int, float, np.ndarray]:
        scores, _ = pol.fixed_head_scores(self.params, feats.psi_state, self.n_candidates)
        probs = masked_softmax(scores, mask)
        a = int(np.argmax(probs)) if rng is None else _sample(probs, rng)
        return a, float(np.log(probs[a])), probs


# ---------------------------------------------------------------- core steps


def collect(
    env: SiloEnv,
    extractor: pol.FeatureExtractor,
    actor,
    env_rng: np.random.Generator,
    action_rng: Optional[np.random.Generator],
) -> TrajectoryBatch:
    """One full episode; rewards are assembled post-hoc by the environment."""
    dec = env.reset(env_rng)
    psi_task, psi_res, psi_glob, psi_state = [], [], [], []
    masks, actions, logps = [], [], []
    while dec is not None:
        state = env.observe()
        feats = extractor.extract(env, state, dec)
        a, logp, _ = actor.act(feats, dec.feasible_mask, action_rng)
        psi_task.append(feats.psi_task)
        psi_res.append(feats.psi_res)
        psi_glob.append(feats.psi_global)
        psi_state.append(feats.psi_state)
        masks.append(dec.feasible_mask)
        actions.append(a)
        logps.append(logp)
        env.step(a)
        dec = env.decision
    episode = env.finalize()

    t_n = len(actions)
    psi_state_arr = np.asarray(psi_state)
    next_state = np.zeros_like(psi_state_arr)
    if t_n > 1:
        next_state[:-1] = psi_state_arr[1:]
    dones = np.zeros(t_n, dtype=bool)
    dones[-1] = True

    batch = TrajectoryBatch(
        psi_task=np.asarray(psi_task),
        psi_res=np.asarray(psi_res),
        psi_glob=np.asarray(psi_glob),
        psi_state=psi_state_arr,
        next_psi_state=next_state,
        masks=np.asarray(masks),
        actions=np.asarray(actions, dtype=np.int64),
        log_prob_old=np.asarray(logps),
        rewards=episode.rewards,
        dones=dones,
        fingerprints=np.zeros((t_n, actor.fingerprint_dim)),
        episode=episode,
    )
    batch.fingerprints = actor.fingerprints(batch)
    return batch


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    next_values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    lam: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Backward-recursion advantages and one-step TD value targets.

    delta_t = r_t + gamma * V(s_{t+1}) * (1 - done_t) - V(s_t);
    A_t = delta_t + gamma * lam * A_{t+1}, with A past the terminal equal to 0.
    """
    t_n = len(rewards)
    if t_n == 0:
        raise ValueError("gae over an empty batch")
    not_done = 1.0 - dones.astype(np.float64)
    deltas = rewards + gamma * next_values * not_done - values
    adv = np.zeros(t_n)
    acc = 0.0
    for t in range(t_n - 1, -1, -1):
        acc = deltas[t] + gamma * lam * not_done[t] * acc
        adv[t] = acc
    targets = rewards + gamma * next_values * not_done
    return adv, targets


def discounted_returns(rewards: np.ndarray, dones: np.ndarray, gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * (0.0 if dones[t] else acc)
        out[t] = acc
    return out


@dataclass
class ActorUpdateStats:
    objective: float
    clip_fraction: float
    grad_norm: float
    aborted: bool = False


def actor_update(
    batch: TrajectoryBatch,
    advantages: np.ndarray,
    actor,
    params: LearnerParams,
):
    """One full-batch gradient-ascent step on the clipped surrogate.

    Returns (new_actor, stats). Samples whose ratio is clipped contribute no
    gradient; a non-finite gradient aborts the update and keeps the old
    parameters.
    """
    t_n = len(batch)
    adv = advantages.astype(np.float64)
    if not np.isfinite(adv).all():
        log.warning("actor update aborted: non-finite advantages")
        return actor, ActorUpdateStats(float("nan"), 0.0, float("nan"), aborted=True)
    if params.normalize_advantages:
        std = adv.std()
        adv = (adv - adv.mean()) / (std + 1e-8)

    scores, tape = actor.scores_batch(batch)
    probs = masked_softmax(scores, batch.masks)
    idx = np.arange(t_n)
    logp_new = np.log(probs[idx, batch.actions])
    kappa = np.exp(logp_new - batch.log_prob_old)

    eps = params.clip_epsilon
    if params.use_clip:
        clipped = np.clip(kappa, 1.0 - eps, 1.0 + eps)
        objective = np.minimum(kappa * adv, clipped * adv)
        # gradient flows only where the unclipped branch is selected
        active = kappa * adv <= clipped * adv
        clip_fraction = float(np.mean((kappa > 1.0 + eps) | (kappa < 1.0 - eps)))
    else:
        objective = kappa * adv
        active = np.ones(t_n, dtype=bool)
        clip_fraction = 0.0

    coeff = np.where(active, kappa * adv, 0.0) / t_n
    # d logpi(a)/d u_c = onehot(a) - probs over feasible candidates
    upstream = -coeff[:, None] * probs
    upstream[idx, batch.actions] += coeff
    upstream[~batch.masks] = 0.0
    grad = actor.backward_flat(tape, upstream)

    gnorm = float(np.linalg.norm(grad))
    if not np.isfinite(gnorm):
        log.warning("actor update aborted: non-finite gradient")
        return actor, ActorUpdateStats(float(np.mean(objective)), clip_fraction,
                                       gnorm, aborted=True)
    if gnorm > params.grad_norm_clip:
        grad = grad * (params.grad_norm_clip / gnorm)
    new_actor = actor.with_flat(actor.flatten() + params.actor_lr * grad)
    return new_actor, ActorUpdateStats(float(np.mean(objective)), clip_fraction, gnorm)


def critic_update(
    batch: TrajectoryBatch,
    targets: np.ndarray,
    critic: pol.CriticParams,
    params: LearnerParams,
) -> Tuple[pol.CriticParams, np.ndarray, float]:
    """One TD gradient-descent step; returns (new_critic, pre-step gradient, loss)."""
    t_n = len(batch)
    values, tape = pol.value_batch(critic, batch.psi_state)
    err = values - targets
    loss = float(0.5 * np.mean(err ** 2))
    upstream = (err / t_n)[:, None]
    grads, _ = critic.net.backward(tape, upstream)
    flat = np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in grads])
    if not np.isfinite(flat).all():
        log.warning("critic update aborted: non-finite gradient")
        return critic, np.zeros_like(flat), loss
    gnorm = float(np.linalg.norm(flat))
    step = flat * (params.grad_norm_clip / gnorm) if gnorm > params.grad_norm_clip else flat
    new_critic = critic.load_flat(critic.flatten() - params.critic_lr * step)
    return new_critic, flat, loss


class FingerprintBuffer:
    """Ring buffer of the most recent K resource-feature gradients."""

    def __init__(self, k: int, dim: int):
        self.k = k
        self.dim = dim
        self._entries: List[np.ndarray] = []

    def extend(self, rows: np.ndarray) -> None:
        for row in rows:
            self._entries.append(np.asarray(row, dtype=np.float64))
        if len(self._entries) > self.k:
            self._entries = self._entries[-self.k:]

    def __len__(self) -> int:
        return len(self._entries)

    def mean(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(self.dim)
        return np.mean(self._entries, axis=0)


# ---------------------------------------------------------------- silo learner


@dataclass
class EpisodeStats:
    weighted_cost: float
    mean_response_ms: float
    cvar_ms: float
    energy_j: float
    violation_rate: float
    episode_return: float
    mean_advantage: float
    clip_fraction: float
    critic_loss: float


@dataclass
class LocalRoundResult:
    fingerprint: np.ndarray
    critic_grad: np.ndarray
    actor_delta: np.ndarray  # net parameter movement of the local phase
    stats: List[EpisodeStats]


class SiloLearner:
    """Owns one silo's environment, actor, critic and fingerprint window."""

    def __init__(
        self,
        silo: Silo,
        sim_params: SimParams,
        learn_params: LearnerParams,
        actor,
        critic: pol.CriticParams,
        root_seed: int,
    ):
        self.silo = silo
        self.sim_params = sim_params
        self.lp = learn_params
        self.actor = actor
        self.critic = critic
        self.normalizer = CostNormalizer()
        self.env = SiloEnv(silo, sim_params, self.normalizer)
        self.extractor = pol.FeatureExtractor(silo)
        self.buffer = FingerprintBuffer(learn_params.fingerprint_window, actor.fingerprint_dim)
        self.check_invariants = False
        self._root = root_seed
        self._episode = 0

    def _verify(self, result: EpisodeResult) -> None:
        if self.check_invariants and result.event_log is not None:
            problems = check_episode_invariants(self.silo, self.env.apps, result.event_log)
            if problems:
                raise AssertionError(
                    f"silo {self.silo.id}: " + "; ".join(problems[:5]))

    def _rng(self, stream: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence([self._root, self.silo.id, self._episode, stream]))

    def warmup(self) -> None:
        """Random-policy episodes fixing the cost-normalization extrema."""
        decisions = 0
        while decisions < self.lp.warmup_decisions:
            env_rng = self._rng(0)
            action_rng = self._rng(1)
            dec = self.env.reset(env_rng)
            while dec is not None:
                feasible = np.flatnonzero(dec.feasible_mask)
                self.env.step(int(feasible[action_rng.integers(len(feasible))]))
                dec = self.env.decision
                decisions += 1
            result = self.env.finalize()
            self._verify(result)
            l_rt, l_e, _, _, _ = raw_costs(result.ledger, self.sim_params)
            self.normalizer.warm(l_rt, l_e)
            self._episode += 1
        self.normalizer.freeze()

    def train_episode(self) -> EpisodeStats:
        batch = collect(self.env, self.extractor, self.actor, self._rng(0), self._rng(1))
        self._episode += 1
        self._verify(batch.episode)
        self.buffer.extend(batch.fingerprints)

        values, _ = pol.value_batch(self.critic, batch.psi_state)
        next_values, _ = pol.value_batch(self.critic, batch.next_psi_state)
        if self.lp.use_gae:
            adv, targets = gae(batch.rewards, values, next_values, batch.dones,
                               self.lp.gamma, self.lp.gae_lambda)
        else:
            adv = discounted_returns(batch.rewards, batch.dones, self.lp.gamma)
            targets = batch.rewards + self.lp.gamma * next_values * (1.0 - batch.dones)

        self.actor, a_stats = actor_update(batch, adv, self.actor, self.lp)
        self.critic, d_i, c_loss = critic_update(batch, targets, self.critic, self.lp)
        self._last_critic_grad = d_i

        ep = batch.episode
        return EpisodeStats(
            weighted_cost=ep.cost.weighted,
            mean_response_ms=ep.mean_response_ms,
            cvar_ms=ep.cost.cvar_ms,
            energy_j=ep.cost.l_energy,
            violation_rate=ep.violation_rate,
            episode_return=float(batch.rewards.sum()),
            mean_advantage=float(adv.mean()),
            clip_fraction=a_stats.clip_fraction,
            critic_loss=c_loss,
        )

    def local_round(self, omega: int) -> LocalRoundResult:
        """Omega collect/update cycles; fingerprint over the sliding window."""
        before = self.actor.flatten()
        stats = [self.train_episode() for _ in range(omega)]
        return LocalRoundResult(
            fingerprint=self.buffer.mean(),
            critic_grad=self._last_critic_grad,
            actor_delta=self.actor.flatten() - before,
            stats=stats,
        )
