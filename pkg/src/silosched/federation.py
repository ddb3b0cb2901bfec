"""Decentralized aggregation: RTT topology, gossip, anomaly filtering, mixing.

Each round is bulk-synchronous. Every silo snapshots an outgoing message
(fingerprint, actor parameters, critic gradient, tracking variable, neighbor
recommendations); adversarial senders corrupt theirs, and links may drop.
Receivers score neighbors by fingerprint cosine similarity, flag anomalies
below median - xi * MAD, mix actor parameters over the survivors with
softmax(sim / nu) weights, average critic gradients over survivors plus self,
and run the gradient-tracking recursion. Dropped or filtered neighbors
contribute to nothing that round, including the tracking mix.

A silo finally probes at most one recommended peer per round and swaps out
its worst-RTT neighbor when the probe measures strictly lower.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .infra import Fleet, measure_rtt
from .numerics import cosine_similarity, median_mad

HONEST = "honest"
NOISE = "noise"
REVERSAL = "reversal"
DROP = "drop"
ADVERSARY_MODES = (HONEST, NOISE, REVERSAL, DROP)


@dataclass(frozen=True)
class AdversarySpec:
    mode: str = HONEST
    noise_scale: float = 1.0  # sigma multiplier relative to each tensor's std
    drop_prob: float = 0.5

    def __post_init__(self):
        if self.mode not in ADVERSARY_MODES:
            raise ValueError(f"unknown adversary mode {self.mode!r}")


@dataclass
class NeighborView:
    silo_id: int
    rtts: Dict[int, float]  # neighbor id -> measured rtt

    @property
    def neighbors(self) -> List[int]:
        return sorted(self.rtts)

    def worst(self) -> Tuple[int, float]:
        nid = max(self.rtts, key=lambda j: (self.rtts[j], j))
        return nid, self.rtts[nid]


@dataclass
class GossipMessage:
    sender: int
    fingerprint: np.ndarray
    actor_flat: np.ndarray
    critic_flat: np.ndarray
    critic_grad: np.ndarray
    y: np.ndarray
    recommendations: List[Tuple[int, float]]

    # The robust-gradient change report is a second sub-exchange within the
    # same barrier (it depends on this round's filtering) and is passed by
    # the round driver, not stored here.


@dataclass
class AggregationOptions:
    d_max: int = 5
    k_sample: int = 10
    nu: float = 0.1
    xi: float = 3.0
    alpha_agg: float = 0.3
    alpha_cag: float = 0.1
    similarity_weights: bool = True   # False: uniform weights over survivors
    filter_anomalies: bool = True     # False: no anomaly set (defense off)
    critic_mode: str = "tracking"     # "tracking" or "average"
    partial_fraction: float = 1.0     # fraction of neighbors gossiped per round
    neighbor_optimization: bool = True


def build_topology(
    fleet: Fleet, d_max: int, k_sample: int, rng: np.random.Generator
) -> List[NeighborView]:
    """Each silo probes k_sample random candidates and keeps the d_max fastest."""
    m = fleet.n_silos
    if k_sample < d_max:
        raise ValueError("k_sample must be at least d_max")
    if m <= d_max:
        raise ValueError("need more silos than d_max")
    views = []
    for i in range(m):
        candidates = [j for j in range(m) if j != i]
        if k_sample < len(candidates):
            picked = rng.choice(len(candidates), size=k_sample, replace=False)
            candidates = [candidates[k] for k in sorted(picked)]
        probes = {j: measure_rtt(fleet, i, j, rng) for j in candidates}
        best = sorted(probes, key=lambda j: (probes[j], j))[:d_max]
        views.append(NeighborView(i, {j: probes[j] for j in best}))
    return views


def detect_anomalies(sims: Dict[int, float], xi: float) -> Set[int]:
    """Neighbors whose similarity falls strictly below median - xi * MAD."""
    if not sims:
        return set()
    med, mad = median_mad(list(sims.values()))
    tau = med - xi * mad
    return {j for j, s in sims.items() if s < tau}


def aggregation_weights(
    sims: Dict[int, float], survivors: Sequence[int], nu: float, uniform: bool = False
) -> Dict[int, float]:
    """Softmax(sim / nu) over the survivors (or uniform when disabled)."""
    if not survivors:
        return {}
    if uniform:
        w = 1.0 / len(survivors)
        return {j: w for j in survivors}
    vals = np.array([sims[j] / nu for j in survivors])
    vals -= vals.max()
    exp = np.exp(vals)
    exp /= exp.sum()
    return {j: float(w) for j, w in zip(survivors, exp)}


def actor_aggregate(
    own: np.ndarray, neighbor_params: Dict[int, np.ndarray], weights: Dict[int, float],
    alpha_agg: float,
) -> np.ndarray:
    """phi <- (1 - a) phi + a * sum_j w_j phi_j; unchanged when no survivors."""
    if not weights:
        return own.copy()
    mix = np.zeros_like(own)
    for j, w in weights.items():
        mix += w * neighbor_params[j]
    return (1.0 - alpha_agg) * own + alpha_agg * mix


def robust_gradient(own: np.ndarray, survivor_grads: Sequence[np.ndarray]) -> np.ndarray:
    """Uniform mean over the silo's own gradient and the surviving neighbors'."""
    acc = own.astype(np.float64).copy()
    for g in survivor_grads:
        if g.shape != own.shape:
            raise ValueError("critic gradient dimension mismatch")
        acc += g
    return acc / (len(survivor_grads) + 1)


def tracking_update(
    contributions: Sequence[Tuple[np.ndarray, np.ndarray]],
) -> np.ndarray:
    """y_i <- sum_j c_ij (y_j + delta_j) with uniform row-stochastic weights.

    contributions holds (y_j, d_tilde_j_new - d_tilde_j_old) for self plus
    every surviving neighbor; c_ij = 1 / len(contributions).
    """
    if not contributions:
        raise ValueError("tracking update needs at least the silo itself")
    c = 1.0 / len(contributions)
    acc = np.zeros_like(contributions[0][0])
    for y_j, delta_j in contributions:
        if y_j.shape != acc.shape or delta_j.shape != acc.shape:
            raise ValueError("tracking variable dimension mismatch")
        acc += c * (y_j + delta_j)
    return acc


def apply_adversary(
    spec: AdversarySpec, msg: GossipMessage, actor_delta: np.ndarray,
    rng: np.random.Generator,
) -> GossipMessage:
    """Corrupt one outgoing message in place of the honest content.

    Noise injection adds zero-mean Gaussian noise scaled by each tensor's
    std; gradient reversal negates the fingerprint, critic gradient,
    tracking variable and delta, and ships actor parameters stepped opposite
    the local update direction. Link drops are handled by the round driver.
    """
    if spec.mode == HONEST or spec.mode == DROP:
        return msg
    if spec.mode == NOISE:
        def jitter(x: np.ndarray) -> np.ndarray:
            scale = spec.noise_scale * (float(np.std(x)) + 1e-8)
            return x + rng.normal(0.0, scale, size=x.shape)

        return GossipMessage(
            sender=msg.sender,
            fingerprint=jitter(msg.fingerprint),
            actor_flat=jitter(msg.actor_flat),
            critic_flat=jitter(msg.critic_flat),
            critic_grad=jitter(msg.critic_grad),
            y=jitter(msg.y),
            recommendations=msg.recommendations,
        )
    # gradient reversal
    return GossipMessage(
        sender=msg.sender,
        fingerprint=-msg.fingerprint,
        actor_flat=msg.actor_flat - 2.0 * actor_delta,
        critic_flat=msg.critic_flat,
        critic_grad=-msg.critic_grad,
        y=-msg.y,
        recommendations=msg.recommendations,
    )


@dataclass
class SiloRoundInput:
    actor_flat: np.ndarray
    critic_flat: np.ndarray
    fingerprint: np.ndarray
    critic_grad: np.ndarray
    actor_delta: np.ndarray


@dataclass
class SiloRoundOutput:
    actor_flat: np.ndarray
    critic_flat: np.ndarray


@dataclass
class SiloRoundLog:
    silo_id: int
    received: List[int]
    sims: Dict[int, float]
    anomalous: List[int]
    survivors: List[int]
    weights: Dict[int, float]
    swap: Optional[Tuple[int, int]] = None  # (removed, added)

    def to_record(self) -> dict:
        return {
            "silo": self.silo_id,
            "received": self.received,
            "sims": {str(k): v for k, v in self.sims.items()},
            "anomalous": self.anomalous,
            "survivors": self.survivors,
            "weights": {str(k): v for k, v in self.weights.items()},
            "swap": list(self.swap) if self.swap else None,
        }


class FederationState:
    """Mutable cross-round protocol state: topology, tracking variables."""

    def __init__(self, fleet: Fleet, options: AggregationOptions, critic_dim: int, seed: int):
        self.fleet = fleet
        self.options = options
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFED]))
        self.views = build_topology(fleet, options.d_max, options.k_sample, self.rng)
        m = fleet.n_silos
        self.y = [np.zeros(critic_dim) for _ in range(m)]
        self.d_tilde_prev = [np.zeros(critic_dim) for _ in range(m)]

    def gossip_round(
        self,
        inputs: List[SiloRoundInput],
        adversaries: Optional[Dict[int, AdversarySpec]] = None,
    ) -> Tuple[List[SiloRoundOutput], List[SiloRoundLog]]:
        opt = self.options
        m = self.fleet.n_silos
        adversaries = adversaries or {}

        # phase A: snapshot and corrupt outgoing messages, sample link drops
        honest_msgs: List[GossipMessage] = []
        for i, inp in enumerate(inputs):
            recs = [(j, self.views[i].rtts[j]) for j in self.views[i].neighbors]
            honest_msgs.append(GossipMessage(
                sender=i,
                fingerprint=inp.fingerprint,
                actor_flat=inp.actor_flat,
                critic_flat=inp.critic_flat,
                critic_grad=inp.critic_grad,
                y=self.y[i],
                recommendations=recs,
            ))

        sent: List[GossipMessage] = []
        for i in range(m):
            spec = adversaries.get(i, AdversarySpec())
            sent.append(apply_adversary(spec, honest_msgs[i], inputs[i].actor_delta, self.rng))

        received: List[Dict[int, GossipMessage]] = [dict() for _ in range(m)]
        for i in range(m):
            neighbors = self.views[i].neighbors
            if opt.partial_fraction < 1.0 and len(neighbors) > 1:
                k = max(1, math.ceil(opt.partial_fraction * len(neighbors)))
                picked = self.rng.choice(len(neighbors), size=k, replace=False)
                neighbors = [neighbors[p] for p in sorted(picked)]
            for j in neighbors:
                spec = adversaries.get(j, AdversarySpec())
                if spec.mode == DROP and self.rng.random() < spec.drop_prob:
                    continue
                received[i][j] = sent[j]

        # phase B: similarity, anomaly filter, actor mix, robust gradients
        outputs: List[SiloRoundOutput] = []
        logs: List[SiloRoundLog] = []
        survivors_of: List[List[int]] = []
        d_tilde_new: List[np.ndarray] = []
        for i in range(m):
            msgs = received[i]
            sims = {j: cosine_similarity(inputs[i].fingerprint, msg.fingerprint)
                    for j, msg in msgs.items()}
            anomalous = detect_anomalies(sims, opt.xi) if opt.filter_anomalies else set()
            survivors = sorted(j for j in msgs if j not in anomalous)
            survivors_of.append(survivors)

            weights = aggregation_weights(
                sims, survivors, opt.nu, uniform=not opt.similarity_weights)
            actor_flat = actor_aggregate(
                inputs[i].actor_flat, {j: msgs[j].actor_flat for j in survivors},
                weights, opt.alpha_agg)

            d_tilde_new.append(robust_gradient(
                inputs[i].critic_grad, [msgs[j].critic_grad for j in survivors]))

            outputs.append(SiloRoundOutput(actor_flat, inputs[i].critic_flat))
            logs.append(SiloRoundLog(
                silo_id=i, received=sorted(msgs), sims=sims,
                anomalous=sorted(anomalous), survivors=survivors, weights=weights))

        # phase B': every silo self-reports its robust-gradient change
        deltas = [d_tilde_new[i] - self.d_tilde_prev[i] for i in range(m)]
        reported = []
        for i in range(m):
            spec = adversaries.get(i, AdversarySpec())
            if spec.mode == REVERSAL:
                reported.append(-deltas[i])
            elif spec.mode == NOISE:
                scale = spec.noise_scale * (float(np.std(deltas[i])) + 1e-8)
                reported.append(deltas[i] + self.rng.normal(0.0, scale, size=deltas[i].shape))
            else:
                reported.append(deltas[i])

        # phase C: critic track (or plain averaging), then neighbor optimization
        new_y = [y.copy() for y in self.y]
        for i in range(m):
            msgs = received[i]
            survivors = survivors_of[i]
            if opt.critic_mode == "tracking":
                contributions = [(self.y[i], deltas[i])]
                contributions += [(msgs[j].y, reported[j]) for j in survivors]
                new_y[i] = tracking_update(contributions)
                outputs[i].critic_flat = inputs[i].critic_flat - opt.alpha_cag * new_y[i]
            elif opt.critic_mode == "average":
                if survivors:
                    mix = np.mean([msgs[j].critic_flat for j in survivors], axis=0)
                    outputs[i].critic_flat = (
                        (1.0 - opt.alpha_cag) * inputs[i].critic_flat + opt.alpha_cag * mix)
            else:
                raise ValueError(f"unknown critic mode {opt.critic_mode!r}")

            if opt.neighbor_optimization:
                logs[i].swap = self._optimize_neighbors(i, received[i])

        self.y = new_y
        self.d_tilde_prev = d_tilde_new
        return outputs, logs

    def _optimize_neighbors(
        self, i: int, msgs: Dict[int, GossipMessage]
    ) -> Optional[Tuple[int, int]]:
        """Probe at most one recommended peer; replace the worst neighbor on a win."""
        view = self.views[i]
        if not view.rtts or not msgs:
            return None
        worst_id, worst_rtt = view.worst()
        candidates: Dict[int, float] = {}
        for msg in msgs.values():
            for cand, rtt in msg.recommendations:
                if cand == i or cand in view.rtts:
                    continue
                if cand not in candidates or rtt < candidates[cand]:
                    candidates[cand] = rtt
        promising = [(rtt, cand) for cand, rtt in candidates.items()
                     if rtt <= 0.9 * worst_rtt]
        if not promising:
            return None
        _, cand = min(promising)
        actual = measure_rtt(self.fleet, i, cand, self.rng)
        if actual < worst_rtt:
            del view.rtts[worst_id]
            view.rtts[cand] = actual
            return (worst_id, cand)
        return None
