"""Training and evaluation loop, run configuration, metrics and teacher recording.

One training episode follows this order: reset the environment, the OU
process and the recurrent state; apply parameter noise on every
``param_noise_period``-th episode; roll out; store the episode; remove the
parameter noise; then run the episode's updates.  The ``events`` field of
each metrics record lists these phases as they happened.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .container import load_checkpoint, load_episodes, save_checkpoint, save_episodes
from .env import GOAL, CorridorEnv, EnvConfig, generate_terrain
from .errors import ConfigurationError, NonFiniteError
from .explore import OuProcess, ParamNoiseStash, apply_param_noise, noisy_action, ou_step, remove_param_noise
from .networks import NetConfig
from .replay import Episode, EpisodeStore, Transition
from .tdlearn import Learner, TdConfig, update

METRICS_SCHEMA = 1


@dataclass
class RunConfig:
    td: TdConfig = field(default_factory=TdConfig)
    net: NetConfig = field(default_factory=NetConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    difficulty: float = 0.0
    episodes: int = 1500
    eval_episodes: int = 200
    seed: int = 0
    # noise
    ou_theta: float = 0.15
    ou_sigma: float = 0.2
    param_noise_sigma: float = 0.05
    param_noise_period: int = 5
    # updates
    update_ratio: float = 0.25          # updates per environment step
    max_updates_per_episode: int = 8
    # replay
    buffer_episodes: int = 500
    injected_episodes: int = 200
    half_life: float = 500.0
    # bookkeeping
    checkpoint_every: int = 100
    # ablations
    scan_off: bool = False
    td0_baseline: bool = False
    feedforward: bool = False
    injection_on: bool = False
    teacher_files: tuple = ()

    def effective_td(self) -> TdConfig:
        """TdConfig with the ablation flags applied."""
        td = self.td
        if self.td0_baseline:
            td = replace(td, l=1, u=1, s=0)
        if self.scan_off or self.feedforward:
            td = replace(td, s=0)
        return td

    def effective_net(self) -> NetConfig:
        net = replace(self.net, visual_dim=self.env.n_rays, proprio_dim=4)
        if self.feedforward:
            net = replace(net, core="dense")
        return net

    def validate(self):
        self.effective_td().validate()
        self.effective_net().validate()
        if not 0.0 <= self.difficulty <= 1.0:
            raise ConfigurationError(f"difficulty must lie in [0, 1], got {self.difficulty}")
        if self.episodes < 0 or self.eval_episodes < 0:
            raise ConfigurationError("episode counts must be >= 0")
        if self.param_noise_period < 1 or self.param_noise_sigma < 0:
            raise ConfigurationError("parameter noise needs period >= 1 and sigma >= 0")
        if self.ou_sigma < 0 or self.ou_theta < 0:
            raise ConfigurationError("OU parameters must be >= 0")
        if self.update_ratio < 0 or self.max_updates_per_episode < 0:
            raise ConfigurationError("update counts must be >= 0")
        if self.injection_on and not self.teacher_files:
            raise ConfigurationError("injection_on needs at least one teacher file")
        if self.checkpoint_every < 1:
            raise ConfigurationError("checkpoint_every must be >= 1")
        return self

    def updates_for(self, steps):
        return min(self.max_updates_per_episode, math.ceil(steps * self.update_ratio))


# ---------------------------------------------------------------------------
# key=value configuration

_SECTIONS = {"td": TdConfig, "net": NetConfig, "env": EnvConfig}


def _parse_value(key, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError(raw)
            return v
        if isinstance(default, tuple):
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise ConfigurationError(f"invalid value for {key}: {raw!r}") from None


def config_keys():
    """All accepted keys with their defaults, e.g. ``{"td.gamma": 0.99, ...}``."""
    base = RunConfig()
    out = {}
    for f in fields(RunConfig):
        if f.name in _SECTIONS:
            for g in fields(_SECTIONS[f.name]):
                out[f"{f.name}.{g.name}"] = getattr(getattr(base, f.name), g.name)
        else:
            out[f.name] = getattr(base, f.name)
    return out


def apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    """Return a copy of ``cfg`` with ``(key, raw_value)`` pairs applied."""
    known = config_keys()
    top, sect = {}, {k: {} for k in _SECTIONS}
    for key, raw in pairs:
        if key not in known:
            raise ConfigurationError(f"unknown config key {key!r}")
        value = _parse_value(key, raw, known[key])
        if "." in key:
            s, name = key.split(".", 1)
            sect[s][name] = value
        else:
            top[key] = value
    for s, vals in sect.items():
        if vals:
            top[s] = replace(getattr(cfg, s), **vals)
    return replace(cfg, **top)


def parse_config_text(text):
    pairs = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v))
    return pairs


def load_config(path=None, overrides=()) -> RunConfig:
    pairs = []
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
        pairs += parse_config_text(text)
    return apply_overrides(RunConfig(), list(pairs) + list(overrides)).validate()


def config_text(cfg: RunConfig):
    """Every key of ``cfg`` as ``key=value`` lines (re-loadable)."""
    lines = []
    for key in config_keys():
        if "." in key:
            s, name = key.split(".", 1)
            v = getattr(getattr(cfg, s), name)
        else:
            v = getattr(cfg, key)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, tuple):
            v = ",".join(v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"


def config_dict(cfg: RunConfig):
    d = asdict(cfg)
    d["teacher_files"] = list(cfg.teacher_files)
    return d


# ---------------------------------------------------------------------------
# seeding


@dataclass
class Streams:
    init: np.random.Generator
    ou: np.random.Generator
    param_noise: np.random.Generator
    replay: np.random.Generator
    terrain_seed: int


def make_streams(seed) -> Streams:
    ss = np.random.SeedSequence(seed)
    kids = ss.spawn(5)
    return Streams(*(np.random.default_rng(k) for k in kids[:4]),
                   terrain_seed=int(kids[4].generate_state(1)[0]))


def episode_terrain(cfg: RunConfig, base_seed, index):
    return generate_terrain((base_seed + index) % 2 ** 32, cfg.difficulty,
                            length=cfg.env.x_goal)


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class Rollout:
    episode: Episode
    ret: float
    steps: int
    cause: str
    final_x: float


def rollout(env: CorridorEnv, terrain, learner: Learner, ou=None, rng=None, record=True):
    """One episode from the zero recurrent state; OU noise when ``ou`` is given."""
    o = env.reset(terrain)
    state = learner.actor.zero_state()
    if ou is not None:
        ou.reset()
    trans = []
    rewards = []
    while True:
        a, state = learner.actor.step(o, state, learner.actor_params)
        if ou is not None:
            a = noisy_action(a, ou_step(ou, rng))
        res = env.step(a)
        rewards.append(res.reward)
        if record:
            trans.append(Transition(o, a, res.reward, res.obs, res.done,
                                    timeout=res.done and res.cause == "timeout"))
        o = res.obs
        if res.done:
            break
    ep = Episode.from_transitions(trans) if record else None
    ret = math.fsum(rewards)
    return Rollout(ep, ret, env.steps, res.cause, env.body.x)


# ---------------------------------------------------------------------------
# training


def r100ma(returns):
    window = returns[-100:]
    return math.fsum(window) / len(window)


@dataclass
class TrainResult:
    metrics: list
    learner: Learner
    halted: bool = False
    diagnostics: dict | None = None
    best_r100ma: float = -math.inf
    checkpoints: list = field(default_factory=list)


class _Sink:
    """Metrics JSONL plus a separate wall-time sidecar (kept out of the metrics)."""

    def __init__(self, out_dir):
        self.out = Path(out_dir) if out_dir is not None else None
        self.fh = self.tfh = None
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
            self.fh = open(self.out / "metrics.jsonl", "w")
            self.tfh = open(self.out / "timing.jsonl", "w")

    def write(self, rec, wall):
        if self.fh:
            self.fh.write(json.dumps(rec) + "\n")
            self.fh.flush()
            self.tfh.write(json.dumps({"episode": rec["episode"], "wall_s": wall}) + "\n")
            self.tfh.flush()

    def close(self):
        if self.fh:
            self.fh.close()
            self.tfh.close()


def _mean(xs):
    return math.fsum(xs) / len(xs) if xs else None


def train(cfg: RunConfig, out_dir=None, log=None) -> TrainResult:
    """Run ``cfg.episodes`` training episodes.

    With ``out_dir`` set, writes ``config.txt``, ``metrics.jsonl``,
    ``timing.jsonl`` and checkpoints (``initial``, every
    ``checkpoint_every`` episodes, ``best`` and ``final``).  A non-finite
    update halts the run after writing ``halt.ckpt`` and ``halt.json``.
    """
    cfg.validate()
    td, net = cfg.effective_td(), cfg.effective_net()
    rs = make_streams(cfg.seed)
    learner = Learner.create(net, td, rs.init, seed=cfg.seed)
    env = CorridorEnv(cfg.env)
    buffer = EpisodeStore(cfg.buffer_episodes, cfg.injected_episodes, cfg.half_life)
    if cfg.injection_on:
        for path in cfg.teacher_files:
            eps, _ = load_episodes(path)
            buffer.inject(eps)
    ou = OuProcess(net.action_dim, cfg.ou_theta, cfg.ou_sigma, 0.0, cfg.env.dt)
    stash = ParamNoiseStash(cfg.param_noise_sigma)

    out = Path(out_dir) if out_dir is not None else None
    sink = _Sink(out)
    result = TrainResult([], learner)
    ck_meta = {"config": config_dict(cfg), "version": __version__}

    def checkpoint(name, episode):
        if out is not None:
            path = out / f"{name}.ckpt"
            save_checkpoint(path, learner, {**ck_meta, "episode": episode})
            result.checkpoints.append(str(path))

    if out is not None:
        (out / "config.txt").write_text(config_text(cfg))
    checkpoint("initial", 0)

    returns = []
    try:
        for ep in range(cfg.episodes):
            t0 = time.perf_counter()
            events = []
            anneal = buffer.set_anneal(ep) if cfg.injection_on else None
            noised = ep % cfg.param_noise_period == 0 and cfg.param_noise_sigma > 0
            if noised:
                apply_param_noise(learner.actor_params, cfg.param_noise_sigma, rs.param_noise, stash)
                events.append("noise")
            terrain = episode_terrain(cfg, rs.terrain_seed, ep)
            ro = rollout(env, terrain, learner, ou, rs.ou)
            events.append("rollout")
            for t in ro.episode.transitions():
                buffer.push(t)
            buffer.end_episode()
            if noised:
                remove_param_noise(learner.actor_params, stash)
                events.append("denoise")
            n_upd = cfg.updates_for(ro.steps)
            reports = []
            for _ in range(n_upd):
                try:
                    rep = update(buffer, learner, td, rs.replay)
                except NonFiniteError as exc:
                    result.halted = True
                    result.diagnostics = {"episode": ep, "message": str(exc), **exc.diagnostics}
                    raise
                if rep is None:
                    break
                reports.append(rep)
            if reports:
                events.append(f"update x{len(reports)}")
            returns.append(ro.ret)
            ma = r100ma(returns)
            rec = {
                "schema": METRICS_SCHEMA,
                "episode": ep,
                "return": ro.ret,
                "steps": ro.steps,
                "cause": ro.cause,
                "final_x": ro.final_x,
                "r100ma": ma,
                "updates": len(reports),
                "total_updates": learner.updates,
                "loss": _mean([r.loss for r in reports]),
                "critic_grad_norm": _mean([r.critic_grad_norm for r in reports]),
                "actor_grad_norm": _mean([r.actor_grad_norm for r in reports]),
                "mean_q": _mean([r.mean_q for r in reports]),
                "anneal": anneal,
                "param_noise": noised,
                "events": events,
            }
            result.metrics.append(rec)
            sink.write(rec, time.perf_counter() - t0)
            if log is not None:
                log(rec)
            if ma > result.best_r100ma:
                result.best_r100ma = ma
                checkpoint("best", ep + 1)
            if (ep + 1) % cfg.checkpoint_every == 0:
                checkpoint(f"ep{ep + 1:06d}", ep + 1)
        if cfg.episodes > 0:
            checkpoint("final", cfg.episodes)
    except NonFiniteError:
        if stash.active:
            remove_param_noise(learner.actor_params, stash)
        checkpoint("halt", len(returns))
        if out is not None:
            (out / "halt.json").write_text(json.dumps(result.diagnostics, indent=2, default=str))
    finally:
        sink.close()
    return result


# ---------------------------------------------------------------------------
# evaluation and teacher recording


def _load(checkpoint, cfg: RunConfig | None):
    net = cfg.effective_net() if cfg is not None else None
    td = cfg.effective_td() if cfg is not None else None
    learner, meta = load_checkpoint(checkpoint, net, td)
    return learner, meta


def evaluate(checkpoint, cfg: RunConfig | None = None, episodes=200, terrain_seeds=None,
             learner=None):
    """Noise-free rollouts; success means reaching the goal.

    ``terrain_seeds`` defaults to ``0 .. episodes-1``.  Results are in seed order.
    """
    cfg = cfg or RunConfig()
    if learner is None:
        learner, _ = _load(checkpoint, cfg)
    seeds = list(range(episodes)) if terrain_seeds is None else list(terrain_seeds)
    env = CorridorEnv(cfg.env)
    rets, causes = [], []
    for sd in seeds:
        terrain = generate_terrain(sd, cfg.difficulty, length=cfg.env.x_goal)
        ro = rollout(env, terrain, learner, record=False)
        rets.append(ro.ret)
        causes.append(ro.cause)
    n = len(seeds)
    r = np.array(rets)
    return {
        "episodes": n,
        "success_ratio": (sum(c == GOAL for c in causes) / n) if n else 0.0,
        "return_mean": float(r.mean()) if n else 0.0,
        "return_std": float(r.std()) if n else 0.0,
        "return_min": float(r.min()) if n else 0.0,
        "return_max": float(r.max()) if n else 0.0,
        "causes": {c: causes.count(c) for c in sorted(set(causes))},
        "returns": rets,
    }


def record_teacher(checkpoint, n_episodes, out_file, cfg: RunConfig | None = None,
                   terrain_seeds=None, learner=None):
    """Write ``n_episodes`` noise-free rollouts of a checkpoint to a teacher file."""
    cfg = cfg or RunConfig()
    if learner is None:
        learner, _ = _load(checkpoint, cfg)
    seeds = list(range(n_episodes)) if terrain_seeds is None else list(terrain_seeds)
    env = CorridorEnv(cfg.env)
    eps = []
    for sd in seeds:
        terrain = generate_terrain(sd, cfg.difficulty, length=cfg.env.x_goal)
        eps.append(rollout(env, terrain, learner).episode)
    save_episodes(out_file, eps, {"source": str(checkpoint), "difficulty": cfg.difficulty,
                                  "terrain_seeds": seeds})
    return eps


def replay_actions(episode: Episode, terrain, cfg: EnvConfig | None = None):
    """Re-simulate recorded actions; returns the rewards."""
    env = CorridorEnv(cfg)
    env.reset(terrain)
    return np.array([env.step(a).reward for a in episode.actions])


def zero_action_return(cfg: RunConfig, seed=0):
    env = CorridorEnv(cfg.env)
    env.reset(generate_terrain(seed, cfg.difficulty, length=cfg.env.x_goal))
    total = []
    zero = np.zeros(cfg.net.action_dim)
    while not env.done:
        total.append(env.step(zero).reward)
    return math.fsum(total)

