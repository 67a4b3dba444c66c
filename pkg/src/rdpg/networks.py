"""Recurrent actor and critic networks.

Both share a front end: the rangefinder part of the observation goes through
a 1-D conv block and a dense layer, the proprioceptive remainder through its
own dense layer, and the two are concatenated.  The critic additionally
lifts the action through a dense layer and appends it before its recurrent
core.  The core is an LSTM, or an equal-width dense layer in feed-forward
(DDPG) mode.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .diffcore import EAGER, ParamSet, value_of
from .errors import ConfigurationError


@dataclass(frozen=True)
class NetConfig:
    """Layer widths.  Defaults are the full-size topology scaled down 4x."""

    visual_dim: int = 10        # leading observation components fed to the conv block
    proprio_dim: int = 4
    action_dim: int = 2
    conv_channels: int = 16
    conv_width: int = 3
    visual_width: int = 16
    proprio_width: int = 48
    action_width: int = 16
    actor_core: int = 64
    critic_core: int = 80
    core: str = "lstm"          # "lstm" or "dense"

    @property
    def obs_dim(self):
        return self.visual_dim + self.proprio_dim

    @classmethod
    def full_size(cls, **overrides):
        base = dict(conv_channels=64, visual_width=64, proprio_width=192,
                    action_width=64, actor_core=256, critic_core=320,
                    action_dim=4)
        base.update(overrides)
        return cls(**base)

    def validate(self):
        if self.core not in ("lstm", "dense"):
            raise ConfigurationError(f"core must be 'lstm' or 'dense', got {self.core!r}")
        if self.visual_dim < self.conv_width:
            raise ConfigurationError("visual_dim smaller than conv_width")
        for k, v in asdict(self).items():
            if isinstance(v, int) and v <= 0:
                raise ConfigurationError(f"{k} must be positive")
        return self


class RecurrentState(NamedTuple):
    h: np.ndarray
    c: np.ndarray

    def copy(self):
        return RecurrentState(self.h.copy(), self.c.copy())


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _Net:
    core_width: int
    kind: str

    def __init__(self, cfg: NetConfig):
        self.cfg = cfg.validate()

    # parameters -----------------------------------------------------------
    def _front_params(self, rng):
        c = self.cfg
        p = {}
        p["conv.F"] = _uniform(rng, (c.conv_channels, c.conv_width), c.conv_width)
        p["conv.b"] = _uniform(rng, (c.conv_channels,), c.conv_width)
        p["vis.W"] = _uniform(rng, (c.visual_width, c.conv_channels), c.conv_channels)
        p["vis.b"] = _uniform(rng, (c.visual_width,), c.conv_channels)
        p["prop.W"] = _uniform(rng, (c.proprio_width, c.proprio_dim), c.proprio_dim)
        p["prop.b"] = _uniform(rng, (c.proprio_width,), c.proprio_dim)
        return p

    def _core_params(self, rng, n_in):
        w = self.core_width
        p = {}
        if self.cfg.core == "lstm":
            # input rows stacked over recurrent rows
            p["core.W"] = _uniform(rng, (n_in + w, 4 * w), n_in + w)
            b = np.zeros(4 * w)
            b[w:2 * w] = 1.0  # forget gate
            p["core.b"] = b
        else:
            p["core.W"] = _uniform(rng, (w, n_in), n_in)
            p["core.b"] = _uniform(rng, (w,), n_in)
        return p

    def zero_params(self):
        return self.init(np.random.default_rng(0)).zeros_like()

    def zero_state(self, batch=None):
        shape = (self.core_width,) if batch is None else (batch, self.core_width)
        return RecurrentState(np.zeros(shape), np.zeros(shape))

    # forward --------------------------------------------------------------
    def _check_obs(self, o):
        if o.shape[-1] != self.cfg.obs_dim:
            raise ConfigurationError(
                f"observation has {o.shape[-1]} components, expected {self.cfg.obs_dim}")

    def _front(self, ops, params, o, trainable):
        c = self.cfg
        P = lambda name: ops.param(name, params[name], trainable)  # noqa: E731
        vis = ops.conv_pool(o[..., :c.visual_dim], P("conv.F"), P("conv.b"))
        vis = ops.dense(vis, P("vis.W"), P("vis.b"), "relu")
        prop = ops.dense(o[..., c.visual_dim:], P("prop.W"), P("prop.b"), "relu")
        return [vis, prop]

    def _core(self, ops, params, x, state, trainable):
        P = lambda name: ops.param(name, params[name], trainable)  # noqa: E731
        if self.cfg.core == "lstm":
            h, cell = ops.lstm(x, state.h, state.c, P("core.W"), P("core.b"))
            return h, RecurrentState(h, cell)
        h = ops.dense(x, P("core.W"), P("core.b"), "relu")
        return h, state

    def _check_state(self, state):
        if state.h.shape[-1] != self.core_width:
            raise ConfigurationError(
                f"state width {state.h.shape[-1]} != core width {self.core_width}")


class ActorNet(_Net):
    """Deterministic recurrent policy ``a = pi(o, h)`` with outputs in (-1, 1)."""

    kind = "actor"

    @property
    def core_width(self):
        return self.cfg.actor_core

    def init(self, rng, seed=None):
        c = self.cfg
        p = self._front_params(rng)
        p.update(self._core_params(rng, c.visual_width + c.proprio_width))
        # small output layer keeps early actions away from saturation
        p["out.W"] = rng.uniform(-3e-3, 3e-3, size=(c.action_dim, self.core_width))
        p["out.b"] = rng.uniform(-3e-3, 3e-3, size=(c.action_dim,))
        return ParamSet(p, meta={"net": "actor", **asdict(c), "seed": seed})

    def step(self, o, state, params, ops=EAGER, trainable=True):
        """One time step.  Returns ``(action, new_state)``."""
        o = np.asarray(o, dtype=np.float64)
        self._check_obs(o)
        self._check_state(state)
        x = ops.concat(self._front(ops, params, o, trainable))
        h, new_state = self._core(ops, params, x, state, trainable)
        a = ops.dense(h, ops.param("out.W", params["out.W"], trainable),
                      ops.param("out.b", params["out.b"], trainable), "tanh")
        return a, new_state

    def advance(self, o, state, params):
        """State update only (what a scan needs)."""
        if self.cfg.core != "lstm":
            return state
        x = np.concatenate(self._front(EAGER, params, o, False), axis=-1)
        return self._core(EAGER, params, x, state, False)[1]


class CriticNet(_Net):
    """Recurrent state-action value ``Q(o, a | h)`` with a linear scalar head."""

    kind = "critic"

    @property
    def core_width(self):
        return self.cfg.critic_core

    def init(self, rng, seed=None):
        c = self.cfg
        p = self._front_params(rng)
        p["act.W"] = _uniform(rng, (c.action_width, c.action_dim), c.action_dim)
        p["act.b"] = _uniform(rng, (c.action_width,), c.action_dim)
        p.update(self._core_params(rng, c.visual_width + c.proprio_width + c.action_width))
        p["out.W"] = rng.uniform(-3e-3, 3e-3, size=(1, self.core_width))
        p["out.b"] = rng.uniform(-3e-3, 3e-3, size=(1,))
        return ParamSet(p, meta={"net": "critic", **asdict(c), "seed": seed})

    def step(self, o, a, state, params, ops=EAGER, trainable=True):
        """One time step.  Returns ``(q, new_state)``; ``q`` has a trailing axis of 1."""
        o = np.asarray(o, dtype=np.float64)
        self._check_obs(o)
        self._check_state(state)
        if value_of(a).shape[-1] != self.cfg.action_dim:
            raise ConfigurationError(
                f"action has {value_of(a).shape[-1]} components, expected {self.cfg.action_dim}")
        P = lambda name: ops.param(name, params[name], trainable)  # noqa: E731
        parts = self._front(ops, params, o, trainable)
        parts.append(ops.dense(a, P("act.W"), P("act.b"), "relu"))
        x = ops.concat(parts)
        h, new_state = self._core(ops, params, x, state, trainable)
        q = ops.dense(h, P("out.W"), P("out.b"), "identity")
        return q, new_state

    def advance(self, o, a, state, params):
        if self.cfg.core != "lstm":
            return state
        return self.step(o, a, state, params)[1]


def actor_step(net: ActorNet, o, state, params):
    return net.step(o, state, params)


def critic_step(net: CriticNet, o, a, state, params):
    q, state = net.step(o, a, state, params)
    return q[..., 0], state


def scan(net, params, obs, actions=None, lengths=None):
    """Recurrent state after reading a prefix, starting from the zero state.

    ``obs`` is ``[s, D]`` for one sequence or ``[N, s, D]`` for a batch; for
    the critic ``actions`` has the matching leading shape.  With ``lengths``
    (batch only) each row is left-padded: row ``n`` only reads its last
    ``lengths[n]`` steps and stays at the zero state before that.  No
    gradient is recorded.
    """
    obs = np.asarray(obs, dtype=np.float64)
    batched = obs.ndim == 3
    n_steps = obs.shape[-2]
    state = net.zero_state(obs.shape[0] if batched else None)
    if net.cfg.core != "lstm":
        return state
    for t in range(n_steps):
        o_t = obs[..., t, :]
        if net.kind == "critic":
            new = net.advance(o_t, actions[..., t, :], state, params)
        else:
            new = net.advance(o_t, state, params)
        if lengths is not None:
            active = (np.asarray(lengths) >= n_steps - t)[:, None]
            new = RecurrentState(np.where(active, new.h, state.h),
                                 np.where(active, new.c, state.c))
        state = new
    return state


def clone_target(params: ParamSet) -> ParamSet:
    """Independent deep copy used as a target network."""
    return params.copy()
