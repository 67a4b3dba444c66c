"""A 2-D corridor with slopes, stairs, gaps and hurdles, sensed by a short rangefinder fan.

The body is a point mass (its lowest point) that can thrust horizontally at
any time and jump when standing on the ground.  Obstacles further away than
the rangefinder reach are invisible, so the agent has to act on memory.

Reward per step is the forward displacement divided by ``dt``, plus a
penalty on collision.  An episode ends on collision, on reaching the goal,
or at the time limit.
"""
from __future__ import annotations

import bisect
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, UsageError

KINDS = ("flat", "slope", "stair", "gap", "hurdle")
OBSTACLES = ("slope", "stair", "gap", "hurdle")

RUNNING, GOAL, COLLISION, TIMEOUT = "running", "goal", "collision", "timeout"


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.02
    thrust: float = 8.0          # m/s^2 at |a_1| = 1
    jump: float = 6.0            # m/s vertical impulse at a_2 = 1
    gravity: float = 9.8
    drag: float = 1.0            # 1/s, horizontal velocity damping
    x_start: float = 1.0
    x_min: float = 0.5           # back wall
    x_goal: float = 60.0
    max_steps: int = 2000        # 40 s at 50 Hz
    r_max: float = 8.0
    n_rays: int = 10
    ray_min_deg: float = -45.0   # fan spans 0 (horizontal) down to this angle
    sensor_height: float = 1.0
    step_over: float = 0.25      # rise that can be walked or landed onto
    snap: float = 0.25           # drop that is followed while walking
    fall_limit: float = -2.0
    collision_penalty: float = -20.0
    max_altitude_obs: float = 3.0

    @property
    def ray_angles(self):
        return np.deg2rad(np.linspace(0.0, self.ray_min_deg, self.n_rays))

    @property
    def obs_dim(self):
        return self.n_rays + 4


# ---------------------------------------------------------------------------
# terrain


@dataclass
class Feature:
    kind: str
    x0: float
    x1: float
    params: dict = field(default_factory=dict)


@dataclass
class Terrain:
    """Height field built from an ordered, non-overlapping feature list.

    Ground is a set of non-vertical segments on half-open intervals
    ``[x0, x1)``; gaps have no ground.  Hurdles are blocks standing on flat
    ground and are kept in ``hurdles`` as ``(x0, x1, base, top)``.
    """

    features: list
    seed: int | None = None
    difficulty: float = 0.0
    length: float = 60.0

    def __post_init__(self):
        self._compile()

    # construction -----------------------------------------------------------
    def _compile(self):
        ground = []     # (x0, x1, y0, y1)
        hurdles = []
        faces = []      # vertical segments (x, y_lo, y_hi)
        h = 0.0
        prev_end = None  # (x, y) where the previous ground ended, None after a gap
        last_x = None
        for f in self.features:
            if f.kind not in KINDS:
                raise ConfigurationError(f"unknown feature kind {f.kind!r}")
            if last_x is not None and f.x0 < last_x - 1e-12:
                raise ConfigurationError("features overlap or are out of order")
            last_x = f.x1
            segs = []
            if f.kind in ("flat", "hurdle"):
                segs.append((f.x0, f.x1, h, h))
                if f.kind == "hurdle":
                    top = h + f.params["height"]
                    hurdles.append((f.x0, f.x1, h, top))
                    faces.append((f.x0, h, top))
                    faces.append((f.x1, h, top))
            elif f.kind == "slope":
                dh = f.params["rise"]
                segs.append((f.x0, f.x1, h, h + dh))
                h += dh
            elif f.kind == "stair":
                n, rise = f.params["steps"], f.params["rise"]
                run = (f.x1 - f.x0) / n
                for k in range(n):
                    hk = h + (k + 1) * rise
                    segs.append((f.x0 + k * run, f.x0 + (k + 1) * run, hk, hk))
                h += n * rise
            elif f.kind == "gap":
                faces.append((f.x0, h - 10.0, h))
                faces.append((f.x1, h - 10.0, h))
                prev_end = None
                continue
            for s in segs:
                if prev_end is not None and prev_end[1] != s[2]:
                    lo, hi = sorted((prev_end[1], s[2]))
                    faces.append((s[0], lo, hi))
                ground.append(s)
                prev_end = (s[1], s[3])
        self.ground = ground
        self.hurdles = hurdles
        self.faces = faces
        self._gx0 = [g[0] for g in ground]
        # every visible line for ray casting: [M, 4] as (xa, ya, xb, yb)
        lines = [(g[0], g[2], g[1], g[3]) for g in ground]
        lines += [(x, lo, x, hi) for x, lo, hi in faces]
        lines += [(x0, top, x1, top) for x0, x1, _, top in hurdles]
        self.lines = np.array(lines, dtype=np.float64).reshape(-1, 4)

    @classmethod
    def flat(cls, length=60.0, tail=20.0):
        return cls([Feature("flat", 0.0, length + tail)], None, 0.0, length)

    # queries ------------------------------------------------------------------
    def ground_height(self, x):
        """Ground (without hurdles) at ``x``; ``-inf`` over gaps and past the end."""
        i = bisect.bisect_right(self._gx0, x) - 1
        if i < 0:
            return -math.inf
        x0, x1, y0, y1 = self.ground[i]
        if x >= x1:
            return -math.inf
        if y0 == y1:
            return y0
        return y0 + (y1 - y0) * (x - x0) / (x1 - x0)

    def surface(self, x):
        """Standing height at ``x``: ground or hurdle top."""
        for x0, x1, _, top in self.hurdles:
            if x0 <= x < x1:
                return top
        return self.ground_height(x)

    def kinds(self):
        return [f.kind for f in self.features]

    def to_records(self):
        return [{"kind": f.kind, "x0": f.x0, "x1": f.x1, **f.params} for f in self.features]

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump({"seed": self.seed, "difficulty": self.difficulty,
                       "length": self.length, "features": self.to_records()}, fh, indent=1)


def generate_terrain(seed, difficulty, length=60.0, start_flat=6.0, end_flat=6.0, tail=20.0):
    """Procedural corridor.

    Difficulty 0 is a single flat run.  Otherwise flat runs alternate with
    obstacle slots; each slot holds an obstacle with probability
    ``difficulty``.  Obstacle kinds are drawn as successive random
    permutations of the four kinds, so every aligned block of four obstacles
    covers every kind.  Flat runs shrink and obstacles grow with difficulty.
    """
    if not 0.0 <= difficulty <= 1.0:
        raise ConfigurationError(f"difficulty must lie in [0, 1], got {difficulty}")
    rng = np.random.default_rng(seed)
    end = length + tail
    if difficulty == 0.0:
        return Terrain([Feature("flat", 0.0, end)], seed, difficulty, length)
    d = difficulty
    feats = [Feature("flat", 0.0, start_flat)]
    x, h = start_flat, 0.0
    order = []
    while True:
        run = rng.uniform(2.0, 4.0) + 8.0 * (1.0 - d)
        if rng.random() >= d:
            # empty slot: extend with flat ground
            if x + run >= length - end_flat:
                break
            feats.append(Feature("flat", x, x + run))
            x += run
            continue
        if not order:
            order = list(rng.permutation(OBSTACLES))
        kind = str(order.pop(0))
        if kind == "slope":
            width = rng.uniform(4.0, 5.0)
            grade = (0.1 + 0.3 * d) * rng.uniform(0.5, 1.0)
            sign = -1.0 if h > 1.5 else (1.0 if h < -1.5 else rng.choice([-1.0, 1.0]))
            params = {"rise": float(sign * grade * width)}
        elif kind == "stair":
            steps = int(rng.integers(3, 6))
            width = steps * rng.uniform(0.6, 1.0)
            sign = -1.0 if h > 1.5 else (1.0 if h < -1.5 else rng.choice([-1.0, 1.0]))
            params = {"steps": steps, "rise": float(sign * (0.1 + 0.1 * d))}
        elif kind == "gap":
            width = 0.6 + 1.4 * d * rng.uniform(0.5, 1.0)
            params = {}
        else:
            width = rng.uniform(0.3, 0.6)
            params = {"height": float(0.3 + 0.7 * d * rng.uniform(0.5, 1.0))}
        if x + run + width >= length - end_flat:
            break
        feats.append(Feature("flat", x, x + run))
        x += run
        feats.append(Feature(kind, x, x + width, params))
        if kind == "slope":
            h += params["rise"]
        elif kind == "stair":
            h += params["steps"] * params["rise"]
        x += width
    feats.append(Feature("flat", x, end))
    return Terrain(feats, seed, difficulty, length)


# ---------------------------------------------------------------------------
# sensing


def raycast(terrain: Terrain, px, py, cfg: EnvConfig):
    """Distance along each ray of the fan to the first terrain line, capped at ``r_max``."""
    ang = cfg.ray_angles
    dx, dy = np.cos(ang), np.sin(ang)
    L = terrain.lines
    if len(L):
        keep = (np.maximum(L[:, 0], L[:, 2]) >= px) & (np.minimum(L[:, 0], L[:, 2]) <= px + cfg.r_max)
        L = L[keep]
    out = np.full(len(ang), cfg.r_max)
    if not len(L):
        return out
    ax, ay = L[:, 0][None, :], L[:, 1][None, :]
    bx, by = L[:, 2][None, :], L[:, 3][None, :]
    ex, ey = bx - ax, by - ay
    rx, ry = dx[:, None], dy[:, None]
    denom = rx * ey - ry * ex
    with np.errstate(divide="ignore", invalid="ignore"):
        wx, wy = ax - px, ay - py
        t = (wx * ey - wy * ex) / denom
        s = (wx * ry - wy * rx) / denom
        # level and vertical lines: distance from the line's height or x alone, so
        # splitting a line into pieces never changes the result
        t_level = wy / ry
        x_hit = px + t_level * rx
        t_vert = wx / rx
        y_hit = py + t_vert * ry
        level, vert = ey == 0, ex == 0
        t = np.where(level, t_level, np.where(vert, t_vert, t))
        inside = np.where(level, (x_hit >= np.minimum(ax, bx)) & (x_hit <= np.maximum(ax, bx)),
                          np.where(vert, (y_hit >= np.minimum(ay, by)) & (y_hit <= np.maximum(ay, by)),
                                   (s >= 0) & (s <= 1)))
        hit = (denom != 0) & (t >= 0) & inside
    t = np.where(hit, t, np.inf)
    out = np.minimum(t.min(axis=1), cfg.r_max)
    return np.maximum(out, 1e-6)


# ---------------------------------------------------------------------------
# dynamics


@dataclass
class BodyState:
    x: float
    y: float
    vx: float = 0.0
    vy: float = 0.0
    grounded: bool = True


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    done: bool
    cause: str
    progress: float = 0.0   # displacement part of the reward, (x' - x) / dt

    @property
    def timeout(self):
        return self.cause == TIMEOUT


class CorridorEnv:
    """Point-mass walker in a :class:`Terrain`.

    Actions are ``(thrust, jump)`` in ``[-1, 1]^2``.  Integration is
    semi-implicit Euler: velocities first, then positions.
    """

    action_dim = 2

    def __init__(self, cfg: EnvConfig | None = None):
        self.cfg = cfg or EnvConfig()
        self.terrain = None
        self.body = None
        self.steps = 0
        self.done = True

    @property
    def obs_dim(self):
        return self.cfg.obs_dim

    def reset(self, terrain: Terrain):
        self.terrain = terrain
        x = self.cfg.x_start
        self.body = BodyState(x, terrain.surface(x), 0.0, 0.0, True)
        self.steps = 0
        self.done = False
        return self.observe()

    def observe(self):
        b, c = self.body, self.cfg
        ranges = raycast(self.terrain, b.x, b.y + c.sensor_height, c)
        s = self.terrain.surface(b.x)
        alt = c.max_altitude_obs if not math.isfinite(s) else min(b.y - s, c.max_altitude_obs)
        return np.concatenate([ranges, [alt, b.vx, b.vy, 1.0 if b.grounded else 0.0]])

    def step(self, action) -> StepResult:
        if self.done:
            raise UsageError("step() after the episode ended; call reset()")
        c, b, T = self.cfg, self.body, self.terrain
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(-1), -1.0, 1.0)
        thrust, jump = float(a[0]), float(a[1]) if a.size > 1 else 0.0

        vx = b.vx + (thrust * c.thrust - c.drag * b.vx) * c.dt
        vy, grounded = b.vy, b.grounded
        if grounded and jump > 0.0:
            vy = jump * c.jump
            grounded = False
        if not grounded:
            vy = vy - c.gravity * c.dt
        x_new = b.x + vx * c.dt
        y_new = b.y + vy * c.dt if not grounded else b.y
        if x_new < c.x_min:
            x_new, vx = c.x_min, 0.0

        collision = False
        s_new = T.surface(x_new)
        if grounded:
            if s_new - b.y > c.step_over:
                collision = True
            elif s_new >= b.y - c.snap:
                y_new, vy = s_new, 0.0
            else:
                grounded = False
        elif y_new <= s_new:
            if s_new - b.y > c.step_over:
                collision = True
            else:
                y_new, vy, grounded = s_new, 0.0, True
        if collision:
            # blocked by a face: no horizontal progress this step
            x_new, vx, y_new = b.x, 0.0, b.y
        if y_new < c.fall_limit:
            collision = True

        progress = (x_new - b.x) / c.dt
        reward = progress + (c.collision_penalty if collision else 0.0)
        self.body = BodyState(x_new, y_new, vx, vy, grounded)
        self.steps += 1
        if collision:
            cause = COLLISION
        elif x_new >= c.x_goal:
            cause = GOAL
        elif self.steps >= c.max_steps:
            cause = TIMEOUT
        else:
            cause = RUNNING
        self.done = cause != RUNNING
        return StepResult(self.observe(), reward, self.done, cause, progress)


class TrajectoryLog:
    """Line-delimited JSON per step: t, x, y, vx, vy, action, reward, ranges."""

    def __init__(self, path):
        self.fh = open(path, "w")

    def write(self, t, body: BodyState, action, reward, ranges):
        rec = {"t": t, "x": body.x, "y": body.y, "vx": body.vx, "vy": body.vy,
               "action": [float(v) for v in action], "reward": reward,
               "ranges": [float(v) for v in ranges]}
        self.fh.write(json.dumps(rec) + "\n")

    def close(self):
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def env_config_dict(cfg: EnvConfig):
    return asdict(cfg)
