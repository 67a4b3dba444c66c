"""Tail-bootstrapped interpolated TD for the critic and the truncated DPG actor gradient.

Within a sampled window of ``l`` steps the target value is evaluated only
once, at the observation after the window.  Position ``i`` of the window is
therefore backed up over ``l - i`` real rewards before bootstrapping.  The
first ``u`` positions contribute squared TDs weighted by ``lam**i``
(normalized to sum to one).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import Adam, ParamSet, Tape, soft_update, value_of
from .errors import BufferNotReady, ConfigurationError, NonFiniteError
from .networks import ActorNet, CriticNet, RecurrentState, clone_target, scan
from .replay import EpisodeStore, SliceBatch


@dataclass
class TdConfig:
    gamma: float = 0.99
    lam: float = 0.9
    l: int = 8
    u: int = 8
    s: int = 24
    tau: float = 0.001
    N: int = 32
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3

    def validate(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 < self.lam <= 1.0:
            raise ConfigurationError(f"lambda must lie in (0, 1], got {self.lam}")
        if self.l < 1 or not 1 <= self.u <= self.l:
            raise ConfigurationError(f"need 1 <= u <= l, got l={self.l} u={self.u}")
        if self.s < 0:
            raise ConfigurationError(f"scan length must be >= 0, got {self.s}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigurationError(f"tau must lie in [0, 1], got {self.tau}")
        if self.N < 1:
            raise ConfigurationError("minibatch size must be >= 1")
        return self


@dataclass
class TdReport:
    td: np.ndarray          # [N, u] tail-bootstrapped TDs at the loss positions
    loss: float
    q_tail: np.ndarray      # [N] target values at the window tail (0 where masked)
    weights: np.ndarray     # [u]
    critic_grad_norm: float = float("nan")
    actor_grad_norm: float = float("nan")
    mean_q: float = float("nan")


# ---------------------------------------------------------------------------
# TD algebra


def interp_weights(lam, u):
    """Weights ``lam**i / sum_j lam**j`` for window positions ``i = 0..u-1``."""
    if not 0.0 < lam <= 1.0:
        raise ConfigurationError(f"lambda must lie in (0, 1], got {lam}")
    if u < 1:
        raise ConfigurationError(f"u must be >= 1, got {u}")
    raw = np.array([lam ** i for i in range(u)])
    return raw / math.fsum(raw)


def closed_form_weights(lam, u):
    """Weights with the closed-form normalizer ``(lam (1 - lam**u) / (1 - lam))**-1``.

    These sum to ``1/lam`` rather than one; kept for the ``td-demo`` table.
    """
    raw = np.array([lam ** i for i in range(u)])
    if lam == 1.0:
        return raw / u
    return raw / (lam * (1.0 - lam ** u) / (1.0 - lam))


def _discounted_tail(rewards, q_tar, gamma, i, l):
    ret = 0.0 * q_tar
    for k in range(i, l):
        ret = ret + gamma ** (k - i) * rewards[..., k]
    return ret + gamma ** (l - i) * q_tar


def multi_step_td(rewards, q_beh_i, q_tar_l, gamma, i, l):
    """TD at window position ``i`` with backup length ``l - i``.

    ``sum_{k=i}^{l-1} gamma**(k-i) r_k + gamma**(l-i) q_tar_l - q_beh_i``.
    Broadcasts over leading batch axes of ``rewards`` (last axis = window).
    """
    if not 0 <= i <= l - 1:
        raise ConfigurationError(f"position {i} outside window of length {l}")
    rewards = np.asarray(rewards, dtype=np.float64)
    return _discounted_tail(rewards, np.asarray(q_tar_l, dtype=np.float64), gamma, i, l) - q_beh_i


def bootstrap_targets(rewards, q_tar, gamma, u):
    """Targets ``y[n, i]`` (everything in the TD except ``-q_beh``) for ``i < u``."""
    l = rewards.shape[-1]
    return np.stack([_discounted_tail(rewards, q_tar, gamma, i, l) for i in range(u)], axis=-1)


# ---------------------------------------------------------------------------
# model bundle


@dataclass
class Learner:
    """Behavioral and target actor/critic parameters with their optimizers."""

    actor: ActorNet
    critic: CriticNet
    actor_params: ParamSet
    critic_params: ParamSet
    actor_target: ParamSet = None
    critic_target: ParamSet = None
    actor_opt: Adam = None
    critic_opt: Adam = None
    updates: int = 0
    _snap: dict = field(default=None, repr=False)

    @classmethod
    def create(cls, net_cfg, td_cfg: TdConfig, rng, seed=None):
        actor, critic = ActorNet(net_cfg), CriticNet(net_cfg)
        ap = actor.init(rng, seed)
        cp = critic.init(rng, seed)
        return cls.from_params(actor, critic, ap, cp, td_cfg)

    @classmethod
    def from_params(cls, actor, critic, actor_params, critic_params, td_cfg):
        obj = cls(actor, critic, actor_params, critic_params,
                  clone_target(actor_params), clone_target(critic_params),
                  Adam(alpha=td_cfg.actor_lr).init(actor_params),
                  Adam(alpha=td_cfg.critic_lr).init(critic_params))
        return obj

    def param_sets(self):
        return {"actor": self.actor_params, "critic": self.critic_params,
                "actor_target": self.actor_target, "critic_target": self.critic_target}

    def snapshot(self):
        return {
            "params": {k: v.copy() for k, v in self.param_sets().items()},
            "actor_opt": self.actor_opt.snapshot(),
            "critic_opt": self.critic_opt.snapshot(),
            "updates": self.updates,
        }

    def restore(self, snap):
        for k, v in self.param_sets().items():
            v.assign(snap["params"][k])
        self.actor_opt.restore(snap["actor_opt"])
        self.critic_opt.restore(snap["critic_opt"])
        self.updates = snap["updates"]


# ---------------------------------------------------------------------------
# pieces of one update


@dataclass
class ScanStates:
    actor: RecurrentState
    critic: RecurrentState
    actor_target: RecurrentState
    critic_target: RecurrentState


def scan_batch(batch: SliceBatch, lr: Learner) -> ScanStates:
    """Initial hidden states ``h_{-1}`` for every slice, gradient-free."""
    lens = batch.prefix_len
    po, pa = batch.prefix_obs, batch.prefix_actions
    return ScanStates(
        scan(lr.actor, lr.actor_params, po, lengths=lens),
        scan(lr.critic, lr.critic_params, po, pa, lengths=lens),
        scan(lr.actor, lr.actor_target, po, lengths=lens),
        scan(lr.critic, lr.critic_target, po, pa, lengths=lens),
    )


def tail_target_q(batch: SliceBatch, lr: Learner, actor_state, critic_state):
    """Target value at each window tail.

    Target nets step from their scanned states through the window (critic on
    the stored actions), then evaluate ``Q_tar(o_l, pi_tar(o_l))``.  Slices
    whose window ends in a terminal state get 0.  Returns ``(q, masked)``.
    """
    ha, hc = actor_state, critic_state
    for i in range(batch.length):
        ha = lr.actor.advance(batch.obs[:, i], ha, lr.actor_target)
        hc = lr.critic.advance(batch.obs[:, i], batch.actions[:, i], hc, lr.critic_target)
    a_tail, _ = lr.actor.step(batch.tail_obs, ha, lr.actor_target)
    q, _ = lr.critic.step(batch.tail_obs, a_tail, hc, lr.critic_target)
    masked = batch.tail_done.copy()
    return np.where(masked, 0.0, q[:, 0]), masked


def critic_loss_and_grads(batch: SliceBatch, lr: Learner, cfg: TdConfig, critic_state, q_tail):
    """Weighted squared tail-bootstrapped TD and its gradient.

    The critic runs on the tape from ``critic_state`` through the first ``u``
    window positions, so gradients flow back through time inside the window
    only.  Returns ``(grads, report)``.
    """
    N = batch.size
    w = interp_weights(cfg.lam, cfg.u)
    tape = Tape()
    state = critic_state
    qs = []
    for i in range(cfg.u):
        q, state = lr.critic.step(batch.obs[:, i], batch.actions[:, i], state,
                                  lr.critic_params, ops=tape)
        qs.append(q)
    q_beh = np.stack([value_of(q)[:, 0] for q in qs], axis=1)      # [N, u]
    y = bootstrap_targets(batch.rewards, q_tail, cfg.gamma, cfg.u)  # [N, u]
    td = y - q_beh
    if not np.all(np.isfinite(td)):
        raise NonFiniteError("non-finite TD in critic update",
                             {"nan": int(np.isnan(td).sum()), "inf": int(np.isinf(td).sum()),
                              "q_tail_absmax": float(np.nanmax(np.abs(q_tail)))})
    loss = float(np.mean(np.sum(w * td ** 2, axis=1)))
    seeds = [(q, (-2.0 * w[i] / N) * td[:, i:i + 1]) for i, q in enumerate(qs)]
    grads = tape.backprop(seeds, names=lr.critic_params)
    grads = {k: (g if g is not None else np.zeros_like(lr.critic_params[k]))
             for k, g in grads.items()}
    report = TdReport(td=td, loss=loss, q_tail=q_tail, weights=w)
    return grads, report


def window_states(batch: SliceBatch, lr: Learner, actor_state, critic_state):
    """Behavioral states ``h_{i-1}`` at every window position, stacked ``[l*N, width]``.

    Row ``i*N + n`` belongs to slice ``n`` at position ``i``.
    """
    ha, hc = actor_state, critic_state
    a_h, a_c, c_h, c_c = [], [], [], []
    for i in range(batch.length):
        a_h.append(ha.h), a_c.append(ha.c), c_h.append(hc.h), c_c.append(hc.c)
        if i + 1 < batch.length:
            ha = lr.actor.advance(batch.obs[:, i], ha, lr.actor_params)
            hc = lr.critic.advance(batch.obs[:, i], batch.actions[:, i], hc, lr.critic_params)
    cat = np.concatenate
    return (RecurrentState(cat(a_h), cat(a_c)), RecurrentState(cat(c_h), cat(c_c)))


def actor_objective(batch, lr: Learner, states, actor_params=None):
    """Mean of ``Q(o_i, pi(o_i | h^A_{i-1}) | h^C_{i-1})`` with the states held fixed."""
    ap = lr.actor_params if actor_params is None else actor_params
    obs = np.concatenate([batch.obs[:, i] for i in range(batch.length)])
    a, _ = lr.actor.step(obs, states[0], ap)
    q, _ = lr.critic.step(obs, a, states[1], lr.critic_params)
    return float(np.mean(q))


def actor_grads(batch: SliceBatch, lr: Learner, actor_state, critic_state):
    """Gradient of the mean window Q with respect to the actor (ascent direction).

    Recurrent states at every position are treated as constants, so no
    gradient flows across time steps.  Returns ``(grads, mean_q)``.
    """
    states = window_states(batch, lr, actor_state, critic_state)
    obs = np.concatenate([batch.obs[:, i] for i in range(batch.length)])
    M = obs.shape[0]
    tape = Tape()
    a, _ = lr.actor.step(obs, states[0], lr.actor_params, ops=tape)
    q, _ = lr.critic.step(obs, a, states[1], lr.critic_params, ops=tape, trainable=False)
    grads = tape.backprop([(q, np.full((M, 1), 1.0 / M))], names=lr.actor_params)
    grads = {k: (g if g is not None else np.zeros_like(lr.actor_params[k]))
             for k, g in grads.items()}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite actor gradient for {k}", {"param": k})
    return grads, float(np.mean(value_of(q)))


def critic_update(batch, lr: Learner, cfg: TdConfig, states: ScanStates | None = None):
    """Critic gradient for a batch (scanning first if ``states`` is not given)."""
    states = states or scan_batch(batch, lr)
    q_tail, _ = tail_target_q(batch, lr, states.actor_target, states.critic_target)
    return critic_loss_and_grads(batch, lr, cfg, states.critic, q_tail)


def actor_update(batch, lr: Learner, cfg: TdConfig, states: ScanStates | None = None):
    states = states or scan_batch(batch, lr)
    return actor_grads(batch, lr, states.actor, states.critic)[0]


def update(buffer: EpisodeStore, lr: Learner, cfg: TdConfig, rng, batch=None):
    """One full update: sample, scan, critic step, actor step, soft target updates.

    Returns the :class:`TdReport`, or ``None`` when the buffer cannot supply a
    window yet.  On any error every parameter and optimizer state is restored
    before the exception propagates.
    """
    if batch is None:
        try:
            batch = buffer.sample_batch(cfg.N, cfg.s, cfg.l, rng)
        except BufferNotReady:
            return None
    snap = lr.snapshot()
    try:
        states = scan_batch(batch, lr)
        q_tail, _ = tail_target_q(batch, lr, states.actor_target, states.critic_target)
        c_grads, report = critic_loss_and_grads(batch, lr, cfg, states.critic, q_tail)
        report.critic_grad_norm = lr.critic_opt.step(lr.critic_params, c_grads)
        a_grads, report.mean_q = actor_grads(batch, lr, states.actor, states.critic)
        report.actor_grad_norm = lr.actor_opt.step(
            lr.actor_params, {k: -g for k, g in a_grads.items()})
        soft_update(lr.actor_target, lr.actor_params, cfg.tau)
        soft_update(lr.critic_target, lr.critic_params, cfg.tau)
        for name, ps in lr.param_sets().items():
            for k, v in ps.items():
                if not np.all(np.isfinite(v)):
                    raise NonFiniteError(f"non-finite parameter {name}/{k} after update",
                                         {"net": name, "param": k})
    except Exception:
        lr.restore(snap)
        raise
    lr.updates += 1
    return report
