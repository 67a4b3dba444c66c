"""Finite-difference checks of every layer and of the assembled losses.

Each check compares the tape gradient with central differences and reports
the relative error ``max|analytic - numeric| / max(|analytic|, |numeric|)``
per parameter.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import EAGER, Tape, finite_diff_grad, relative_error, value_of
from .networks import NetConfig
from .replay import Episode, EpisodeStore
from .tdlearn import (Learner, TdConfig, actor_grads, actor_objective, critic_loss_and_grads,
                      scan_batch, tail_target_q, window_states)

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self):
        return self.rel_error < self.tolerance

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name:<28} rel_err={self.rel_error:.3e}"


def _check(name, analytic, f, x, eps=1e-6):
    return CheckResult(name, relative_error(analytic, finite_diff_grad(f, x, eps)))


def _layer_check(name, build, inputs, rng):
    """``build(ops, *vars) -> output``; loss is a fixed random projection of it."""
    tape = Tape()
    vars_ = [tape.param(f"x{k}", v) for k, v in enumerate(inputs)]
    out = build(tape, *vars_)
    outs = out if isinstance(out, tuple) else (out,)
    projs = [rng.standard_normal(value_of(o).shape) for o in outs]
    grads = tape.backprop([(o, p) for o, p in zip(outs, projs)])

    def loss_at(k):
        def f(x):
            args = [x if j == k else inputs[j] for j in range(len(inputs))]
            res = build(EAGER, *args)
            res = res if isinstance(res, tuple) else (res,)
            return float(sum(np.sum(value_of(r) * p) for r, p in zip(res, projs)))
        return f

    return [_check(f"{name}[{k}]", grads[f"x{k}"], loss_at(k), inputs[k]) for k in range(len(inputs))]


def layer_checks(seed=0):
    rng = np.random.default_rng(seed)
    out = []
    x = rng.standard_normal((3, 5))
    W = rng.standard_normal((4, 5)) * 0.5
    b = rng.standard_normal(4) * 0.1
    for act in ("identity", "relu", "tanh"):
        out += _layer_check(f"dense/{act}", lambda ops, x, W, b, a=act: ops.dense(x, W, b, a),
                            [x, W, b], rng)
    width, n_in = 4, 3
    out += _layer_check(
        "lstm", lambda ops, x, h, c, W, b: ops.lstm(x, h, c, W, b),
        [rng.standard_normal((2, n_in)), rng.standard_normal((2, width)) * 0.5,
         rng.standard_normal((2, width)) * 0.5,
         rng.standard_normal((n_in + width, 4 * width)) * 0.5,
         rng.standard_normal(4 * width) * 0.1], rng)
    out += _layer_check(
        "conv_pool", lambda ops, s, F, b: ops.conv_pool(s, F, b),
        [rng.standard_normal((3, 10)), rng.standard_normal((4, 3)),
         rng.standard_normal(4) * 0.1 + 0.5], rng)
    out += _layer_check(
        "concat", lambda ops, p, q: ops.dense(ops.concat([p, q]), W, b, "tanh"),
        [rng.standard_normal((2, 2)), rng.standard_normal((2, 3))], rng)
    return out


def tiny_config():
    return NetConfig(conv_channels=4, visual_width=4, proprio_width=4, action_width=4,
                     actor_core=4, critic_core=4)


def tiny_batch(rng, cfg: NetConfig, td: TdConfig, n_episodes=3, T=12):
    store = EpisodeStore()
    for _ in range(n_episodes):
        obs = rng.standard_normal((T + 1, cfg.obs_dim))
        obs[:, :cfg.visual_dim] = rng.uniform(0.5, 8.0, (T + 1, cfg.visual_dim))
        store.inject([Episode(obs, rng.uniform(-1, 1, (T, cfg.action_dim)),
                              rng.standard_normal(T), False)])
    return store.sample_batch(4, td.s, td.l, rng)


def loss_checks(seed=0, l=3, u=2, lam=0.9, s=2):
    """Critic loss through BPTT and the actor objective, on width-4 nets."""
    rng = np.random.default_rng(seed)
    cfg = tiny_config()
    td = TdConfig(l=l, u=u, lam=lam, s=s, N=4)
    lr = Learner.create(cfg, td, rng)
    # move targets away from the behavioural nets so the check is not degenerate
    for ps in (lr.actor_target, lr.critic_target):
        for v in ps.values():
            v += 0.05 * rng.standard_normal(v.shape)
    # and lift the small output layers so upstream gradients are not tiny
    for ps in (lr.critic_params, lr.actor_params):
        for v in ps.values():
            v += 0.1 * rng.standard_normal(v.shape)
    batch = tiny_batch(rng, cfg, td)
    states = scan_batch(batch, lr)
    q_tail, _ = tail_target_q(batch, lr, states.actor_target, states.critic_target)
    grads, _ = critic_loss_and_grads(batch, lr, td, states.critic, q_tail)
    out = []
    for name in lr.critic_params:
        orig = lr.critic_params[name]

        def f(x, name=name):
            saved = lr.critic_params[name]
            lr.critic_params[name] = x
            try:
                return critic_loss_and_grads(batch, lr, td, states.critic, q_tail)[1].loss
            finally:
                lr.critic_params[name] = saved

        out.append(_check(f"critic_loss/{name}", grads[name], f, orig.copy()))
    a_grads, _ = actor_grads(batch, lr, states.actor, states.critic)
    fixed = window_states(batch, lr, states.actor, states.critic)
    for name in lr.actor_params:
        def f(x, name=name):
            ap = lr.actor_params.copy()
            ap[name] = x
            return actor_objective(batch, lr, fixed, ap)

        out.append(_check(f"actor_objective/{name}", a_grads[name], f, lr.actor_params[name].copy()))
    return out


def run_all(seed=0):
    return layer_checks(seed) + loss_checks(seed)


def report(results):
    lines = [r.line() for r in results]
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed (tolerance {TOLERANCE:g})")
    return "\n".join(lines), n_fail == 0
