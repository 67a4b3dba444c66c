"""
The obstacle corridor
=====================

A point body runs along a 1-D terrain profile.  It sees ten range readings in
a forward fan plus its own velocity and ground contact; nothing beyond R_max
is visible, which is what makes the task partially observable.
"""

import math

import numpy as np

from rdpg.env import CorridorEnv, EnvConfig, Feature, Terrain, generate_terrain, raycast

cfg = EnvConfig()
np.set_printoptions(precision=3, suppress=True)

# terrain difficulty scales feature density and size
for d in (0.0, 0.5, 1.0):
    t = generate_terrain(3, d)
    print(f"difficulty {d}: {t.kinds()}")

# %%
# Range readings on flat ground and in front of a hurdle.
flat = Terrain.flat()
print("flat    :", raycast(flat, 1.0, cfg.sensor_height, cfg))
wall = Terrain([Feature("flat", 0, 3), Feature("hurdle", 3, 3.4, {"height": 1.0}), Feature("flat", 3.4, 80)])
print("hurdle  :", raycast(wall, 1.0, cfg.sensor_height, cfg))

# the same hurdle just past R_max leaves the observation unchanged
far = Terrain([Feature("flat", 0, 1 + cfg.r_max + 0.5),
               Feature("hurdle", 1 + cfg.r_max + 0.5, 1 + cfg.r_max + 0.9, {"height": 1.0}),
               Feature("flat", 1 + cfg.r_max + 0.9, 80)])
o_far, o_flat = CorridorEnv().reset(far), CorridorEnv().reset(flat)
print("far hurdle observation equals flat:", o_far.tobytes() == o_flat.tobytes())

# %%
# Reward is forward progress per second, so an episode's rewards times dt add
# up to the distance travelled.
env = CorridorEnv()
env.reset(generate_terrain(1, 0.4))
x0 = env.body.x
rng = np.random.default_rng(0)
rewards = []
while not env.done:
    res = env.step(rng.uniform(-1, 1, 2))
    rewards.append(res.progress)
print(f"steps {env.steps}, cause {res.cause}")
print("sum r*dt:", math.fsum(rewards) * cfg.dt, " x_T - x_0:", env.body.x - x0)

# a body that never pushes stays put and earns nothing until the timeout
env.reset(flat)
total = math.fsum(env.step([0.0, 0.0]).reward for _ in range(cfg.max_steps))
print("zero-action return:", total)
