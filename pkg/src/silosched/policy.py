"""Candidate-scoring actor, per-silo critic, and feature extraction.

The actor scores (task, resource, global-state) triples with three ReLU
encoders fused by a weight vector over [h_task; h_res; h_glob; h_task*h_res],
so its parameters are independent of how many resources a silo has. One
parameter vector therefore scores a 3-resource silo and a 14-resource silo
without any shape change, which is what makes cross-silo parameter exchange
possible.

Canonical flat layouts (used for serialization, gossip and mixing):

  actor:  W_task row-major, b_task, W_res row-major, b_res,
          W_glob row-major, b_glob, fusion_w
  critic: W_hidden row-major, b_hidden, w_out, b_out

Feature conventions (fleet-wide, fixed so fingerprints stay comparable):

  psi_task  [8] : f_req, m_req, d_req (clamped ratios), deadline slack in
                  [-1, 1], out-degree/5, remaining-tasks ratio, depth ratio, 1
  psi_res  [12] : f_ghz ratio, log-mem ratio, log-disk ratio, battery
                  fraction, busy flag, queue/10, bandwidth-to-predecessors,
                  rtt-to-predecessors, tier one-hot (iot, edge, cloud), 1
  psi_glob  [8] : mean busy, max busy, mean queue/10, max queue/10,
                  feasible ratio, pending apps/10, 1, 0
  psi_state[16] : psi_task ++ psi_glob
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from .infra import Silo, Tier
from .numerics import (
    LinearLayer,
    Mlp,
    StaleTapeError,
    flatten_grads,
    masked_softmax,
    relu,
)
from .simenv import ObservedState, PendingDecision, SiloEnv

D_TASK = 8
D_RES = 12
D_GLOBAL = 8
D_STATE = D_TASK + D_GLOBAL


@dataclass(frozen=True)
class FeatureScaling:
    """Fixed scaling constants shared by every silo."""

    cpu_mcycles: float = 4000.0
    task_mem_mb: float = 1536.0
    freq_ghz: float = 4.0
    mem_log_gb: float = 128.0
    disk_log_gb: float = 2048.0
    bw_mbps: float = 25.0
    rtt_ms: float = 25.0
    queue_clamp: float = 10.0
    out_degree: float = 5.0
    pending_apps: float = 10.0


DEFAULT_SCALING = FeatureScaling()

TIER_INDEX = {Tier.IOT: 0, Tier.EDGE: 1, Tier.CLOUD: 2}


@dataclass
class FeatureVectors:
    psi_task: np.ndarray    # [D_TASK]
    psi_res: np.ndarray     # [C, D_RES]
    psi_global: np.ndarray  # [D_GLOBAL]

    @property
    def psi_state(self) -> np.ndarray:
        return np.concatenate([self.psi_task, self.psi_global])


class FeatureExtractor:
    """Bound to one silo; precomputes the static resource feature columns."""

    def __init__(self, silo: Silo, scaling: FeatureScaling = DEFAULT_SCALING):
        self.silo = silo
        self.s = scaling
        n = silo.n_resources
        static = np.zeros((n, D_RES))
        for i, r in enumerate(silo.resources):
            static[i, 0] = min(1.0, r.f_ghz / scaling.freq_ghz)
            static[i, 1] = math.log1p(r.mem_gb) / math.log1p(scaling.mem_log_gb)
            static[i, 2] = math.log1p(r.disk_gb) / math.log1p(scaling.disk_log_gb)
            static[i, 8 + TIER_INDEX[r.tier]] = 1.0
            static[i, 11] = 1.0
        self._static = static
        self._bw_feat = np.clip(silo.bw / scaling.bw_mbps, 0.0, 1.0)
        self._rtt_feat = np.clip(silo.rtt / scaling.rtt_ms, 0.0, 1.0)

    def extract(self, env: SiloEnv, state: ObservedState, dec: PendingDecision) -> FeatureVectors:
        s = self.s
        app = env.apps[dec.app_id]
        task = app.tasks[dec.task_id]

        depths = getattr(app, "_depths", None)
        if depths is None:
            depths = {}
            for tid in app.topological_order():
                depths[tid] = 1 + max((depths[p] for p in app.preds[tid]), default=-1)
            app._depths = depths  # type: ignore[attr-defined]
        max_depth = max(depths.values())

        scheduled = len(env._assign[dec.app_id])
        slack = (app.arrival_ms + app.deadline_ms - state.now_ms) / app.deadline_ms
        # log scaling keeps light IoT demands and heavy cloud demands in
        # overlapping feature ranges (fingerprint comparability across silos)
        psi_task = np.array([
            min(1.0, math.log1p(task.f_req) / math.log1p(s.cpu_mcycles)),
            min(1.0, math.log1p(task.m_req) / math.log1p(s.task_mem_mb)),
            min(1.0, math.log1p(task.d_req) / math.log1p(s.task_mem_mb)),
            float(np.clip(slack, -1.0, 1.0)),
            min(1.0, len(app.succs[dec.task_id]) / s.out_degree),
            (app.n_tasks - scheduled) / app.n_tasks,
            depths[dec.task_id] / max_depth if max_depth > 0 else 0.0,
            1.0,
        ])

        psi_res = self._static.copy()
        psi_res[:, 3] = state.energy_frac
        psi_res[:, 4] = state.busy
        psi_res[:, 5] = np.minimum(state.queue_len / s.queue_clamp, 1.0)
        pred_hosts = [env._assign[dec.app_id][u] for u in app.preds[dec.task_id]]
        if pred_hosts:
            psi_res[:, 6] = self._bw_feat[pred_hosts].mean(axis=0)
            psi_res[:, 7] = self._rtt_feat[pred_hosts].mean(axis=0)
        else:
            psi_res[:, 6] = 1.0
            psi_res[:, 7] = 0.0

        q = np.minimum(state.queue_len / s.queue_clamp, 1.0)
        psi_global = np.array([
            float(state.busy.mean()),
            float(state.busy.max()),
            float(q.mean()),
            float(q.max()),
            float(dec.feasible_mask.sum()) / len(dec.feasible_mask),
            min(1.0, state.pending_apps / s.pending_apps),
            1.0,
            0.0,
        ])
        return FeatureVectors(psi_task, psi_res, psi_global)


# ---------------------------------------------------------------- actor


@dataclass
class ActorParams:
    task_enc: LinearLayer
    resource_enc: LinearLayer
    global_enc: LinearLayer
    fusion_w: np.ndarray  # [4H]

    @property
    def hidden(self) -> int:
        return self.task_enc.out_dim

    @property
    def n_params(self) -> int:
        return (self.task_enc.n_params + self.resource_enc.n_params
                + self.global_enc.n_params + self.fusion_w.size)

    @classmethod
    def random(cls, rng: np.random.Generator, hidden: int) -> "ActorParams":
        bound = 1.0 / math.sqrt(4 * hidden)
        return cls(
            task_enc=LinearLayer.random(rng, hidden, D_TASK),
            resource_enc=LinearLayer.random(rng, hidden, D_RES),
            global_enc=LinearLayer.random(rng, hidden, D_GLOBAL),
            fusion_w=rng.uniform(-bound, bound, size=4 * hidden),
        )

    def flatten(self) -> np.ndarray:
        return np.concatenate([
            self.task_enc.flatten(), self.resource_enc.flatten(),
            self.global_enc.flatten(), self.fusion_w,
        ])

    def load_flat(self, flat: np.ndarray) -> "ActorParams":
        h = self.hidden
        sizes = [self.task_enc.n_params, self.resource_enc.n_params,
                 self.global_enc.n_params, 4 * h]
        if flat.size != sum(sizes):
            raise ValueError(f"flat size {flat.size} != {sum(sizes)}")
        o0 = sizes[0]
        o1 = o0 + sizes[1]
        o2 = o1 + sizes[2]
        return ActorParams(
            LinearLayer.from_flat(flat[:o0], h, D_TASK),
            LinearLayer.from_flat(flat[o0:o1], h, D_RES),
            LinearLayer.from_flat(flat[o1:o2], h, D_GLOBAL),
            flat[o2:].copy(),
        )


@dataclass
class ActorTape:
    params: "ActorParams"
    psi_task: np.ndarray   # [T, D_TASK]
    psi_res: np.ndarray    # [T, C, D_RES]
    psi_glob: np.ndarray   # [T, D_GLOBAL]
    h_t: np.ndarray        # [T, H] encoder activations (ReLU outputs)
    h_r: np.ndarray        # [T, C, H]
    h_g: np.ndarray        # [T, H]


def actor_scores(
    params: ActorParams,
    psi_task: np.ndarray,
    psi_res: np.ndarray,
    psi_glob: np.ndarray,
) -> Tuple[np.ndarray, ActorTape]:
    """Scores u[t, c] for a batch of decisions; shapes [T, d], [T, C, d], [T, d].

    u = fusion_w . ReLU([h_t; h_r; h_g; h_t*h_r]). All four blocks are ReLU
    outputs or their products, hence nonnegative, so the outer ReLU passes
    values through and the fusion collapses to
    w1.h_t + w3.h_g + h_r.(w2 + w4*h_t) without materializing the
    concatenation. The ReLU subgradient at zero stays zero through either
    form.
    """
    single = psi_task.ndim == 1
    if single:
        psi_task = psi_task[None]
        psi_res = psi_res[None]
        psi_glob = psi_glob[None]
    h = params.hidden
    h_t = np.maximum(psi_task @ params.task_enc.weights.T + params.task_enc.bias, 0.0)
    h_r = np.maximum(psi_res @ params.resource_enc.weights.T + params.resource_enc.bias, 0.0)
    h_g = np.maximum(psi_glob @ params.global_enc.weights.T + params.global_enc.bias, 0.0)
    w = params.fusion_w
    w1, w2, w3, w4 = w[0:h], w[h:2 * h], w[2 * h:3 * h], w[3 * h:]
    scores = (h_t @ w1 + h_g @ w3)[:, None] \
        + (h_r @ (w2 + w4 * h_t)[..., None])[..., 0]
    tape = ActorTape(params, psi_task, psi_res, psi_glob, h_t, h_r, h_g)
    if single:
        return scores[0], tape
    return scores, tape


def actor_scores_fast(
    params: ActorParams,
    psi_task: np.ndarray,
    psi_res: np.ndarray,
    psi_glob: np.ndarray,
) -> np.ndarray:
    """Tape-free single-decision scores for the sampling hot path."""
    h = params.hidden
    h_t = np.maximum(params.task_enc.weights @ psi_task + params.task_enc.bias, 0.0)
    h_r = np.maximum(psi_res @ params.resource_enc.weights.T + params.resource_enc.bias, 0.0)
    h_g = np.maximum(params.global_enc.weights @ psi_glob + params.global_enc.bias, 0.0)
    w = params.fusion_w
    base = float(w[0:h] @ h_t + w[2 * h:3 * h] @ h_g)
    return base + h_r @ (w[h:2 * h] + w[3 * h:] * h_t)


@dataclass
class ActorGrads:
    dw_task: np.ndarray
    db_task: np.ndarray
    dw_res: np.ndarray
    db_res: np.ndarray
    dw_glob: np.ndarray
    db_glob: np.ndarray
    d_fusion: np.ndarray

    def flatten(self) -> np.ndarray:
        return np.concatenate([
            self.dw_task.ravel(), self.db_task,
            self.dw_res.ravel(), self.db_res,
            self.dw_glob.ravel(), self.db_glob,
            self.d_fusion,
        ])


def actor_backward(
    params: ActorParams,
    tape: ActorTape,
    upstream: np.ndarray,
    want_res_grads: bool = False,
) -> Tuple[ActorGrads, Optional[np.ndarray]]:
    """Gradients of sum(upstream * scores) w.r.t. the parameters.

    upstream has shape [T, C] (or [C] for a single decision). With
    want_res_grads the per-candidate input gradients d/d psi_res [T, C, D_RES]
    are also returned; the fingerprint of a decision is that gradient at the
    chosen candidate.

    Derivation (per sample, per candidate, u = w1.h_t + w3.h_g + h_r.(w2 +
    w4*h_t) on the active set): the encoder ReLU masks coincide with h_* > 0,
    and h_r * [h_r > 0] == h_r, which eliminates every [T, C, 4H] temporary.
    """
    if tape.params is not params:
        raise StaleTapeError("tape was produced by different actor parameters")
    up = np.asarray(upstream, dtype=np.float64)
    if up.ndim == 1:
        up = up[None]
    h = params.hidden
    w = params.fusion_w
    w1, w2, w3, w4 = w[0:h], w[h:2 * h], w[2 * h:3 * h], w[3 * h:]
    h_t, h_r, h_g = tape.h_t, tape.h_r, tape.h_g
    mask_t = h_t > 0
    mask_g = h_g > 0
    u_sum = up.sum(axis=1)                                   # [T]
    s_r = (up[:, None, :] @ h_r)[:, 0, :]                    # sum_c up * h_r

    d_fusion = np.concatenate([
        u_sum @ h_t,
        s_r.sum(axis=0),
        u_sum @ h_g,
        (h_t * s_r).sum(axis=0),
    ])

    dpre_t = (u_sum[:, None] * w1 + s_r * w4) * mask_t       # [T,H]
    dpre_g = (u_sum[:, None] * w3) * mask_g                  # [T,H]
    dpre_r = up[..., None] * ((w2 + w4 * h_t[:, None, :]) * (h_r > 0))  # [T,C,H]

    t_n, c_n, _ = dpre_r.shape
    grads = ActorGrads(
        dw_task=dpre_t.T @ tape.psi_task,
        db_task=dpre_t.sum(axis=0),
        dw_res=dpre_r.reshape(t_n * c_n, h).T @ tape.psi_res.reshape(t_n * c_n, -1),
        db_res=dpre_r.sum(axis=(0, 1)),
        dw_glob=dpre_g.T @ tape.psi_glob,
        db_glob=dpre_g.sum(axis=0),
        d_fusion=d_fusion,
    )
    d_psi_res = dpre_r @ params.resource_enc.weights if want_res_grads else None
    return grads, d_psi_res


def score(params: ActorParams, feats: FeatureVectors, candidate: int) -> float:
    """Suitability score of one candidate resource for the current task."""
    scores, _ = actor_scores(params, feats.psi_task, feats.psi_res, feats.psi_global)
    return float(scores[candidate])


def fingerprint_contribution(
    params: ActorParams, feats: FeatureVectors, chosen: int
) -> np.ndarray:
    """d score(chosen) / d psi_res(chosen): one summand of the gradient fingerprint."""
    scores, tape = actor_scores(params, feats.psi_task, feats.psi_res, feats.psi_global)
    up = np.zeros_like(scores)
    up[chosen] = 1.0
    _, d_res = actor_backward(params, tape, up, want_res_grads=True)
    return d_res[0, chosen]


def act(
    params: ActorParams,
    feats: FeatureVectors,
    mask: np.ndarray,
    rng: Optional[np.random.Generator],
) -> Tuple[int, float, np.ndarray]:
    """Masked-softmax sampling (or argmax when rng is None): (action, log_prob, probs)."""
    scores, _ = actor_scores(params, feats.psi_task, feats.psi_res, feats.psi_global)
    probs = masked_softmax(scores, mask)
    if rng is None:
        action = int(np.argmax(probs))
    else:
        action = int(rng.choice(len(probs), p=probs))
    return action, float(np.log(probs[action])), probs


# ---------------------------------------------------------------- critic


@dataclass
class CriticParams:
    net: Mlp  # [D_STATE -> hidden -> 1]

    @classmethod
    def random(cls, rng: np.random.Generator, hidden: int, in_dim: int = D_STATE) -> "CriticParams":
        return cls(Mlp.random(rng, (in_dim, hidden, 1)))

    @property
    def n_params(self) -> int:
        return self.net.n_params

    def flatten(self) -> np.ndarray:
        return self.net.flatten()

    def load_flat(self, flat: np.ndarray) -> "CriticParams":
        return CriticParams(self.net.load_flat(flat))


def value(params: CriticParams, psi_state: np.ndarray) -> float:
    v, _ = params.net.forward(psi_state)
    return float(v[0])


def value_batch(params: CriticParams, psi_states: np.ndarray):
    """Values [T] plus the tape for the batched backward pass."""
    v, tape = params.net.forward(psi_states)
    return v[:, 0], tape


# ---------------------------------------------------------------- fixed-head variant


@dataclass
class FixedHeadActorParams:
    """Ablation actor: an MLP from psi_state to a fixed-size score head.

    Scores for a silo with C resources are the first C outputs; masking does
    the rest. Fingerprints fall back to d score(chosen)/d psi_state since
    there is no shared resource-feature space.
    """

    net: Mlp  # [D_STATE -> hidden -> max_actions]

    @classmethod
    def random(cls, rng: np.random.Generator, hidden: int, max_actions: int) -> "FixedHeadActorParams":
        return cls(Mlp.random(rng, (D_STATE, hidden, max_actions)))

    @property
    def max_actions(self) -> int:
        return self.net.layers[-1].out_dim

    @property
    def n_params(self) -> int:
        return self.net.n_params

    def flatten(self) -> np.ndarray:
        return self.net.flatten()

    def load_flat(self, flat: np.ndarray) -> "FixedHeadActorParams":
        return FixedHeadActorParams(self.net.load_flat(flat))


def fixed_head_scores(params: FixedHeadActorParams, psi_states: np.ndarray, n_candidates: int):
    single = psi_states.ndim == 1
    x = psi_states[None] if single else psi_states
    out, tape = params.net.forward(x)
    scores = out[:, :n_candidates]
    return (scores[0] if single else scores), tape


def fixed_head_backward(
    params: FixedHeadActorParams, tape, upstream: np.ndarray, n_candidates: int,
    want_state_grads: bool = False,
):
    up = np.asarray(upstream, dtype=np.float64)
    if up.ndim == 1:
        up = up[None]
    full = np.zeros((up.shape[0], params.max_actions))
    full[:, :n_candidates] = up
    grads, dx = params.net.backward(tape, full)
    return flatten_grads(grads), (dx if want_state_grads else None)
