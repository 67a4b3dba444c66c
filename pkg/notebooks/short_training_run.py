"""
A short training run
====================

Trains small networks for a few dozen episodes, evaluates the result, records
teacher episodes from it and starts a second agent with those injected.  Real
runs use the default widths and 1500 episodes; see the README.
"""

import tempfile
from pathlib import Path

from rdpg.harness import RunConfig, apply_overrides, evaluate, record_teacher, train

small = [("net.conv_channels", "4"), ("net.visual_width", "8"), ("net.proprio_width", "8"),
         ("net.action_width", "4"), ("net.actor_core", "8"), ("net.critic_core", "8"),
         ("env.max_steps", "300"), ("td.N", "8"), ("td.s", "8")]
cfg = apply_overrides(RunConfig(episodes=20, checkpoint_every=10), small).validate()
out = Path(tempfile.mkdtemp(prefix="rdpg_nb_"))

res = train(cfg, out_dir=out / "student")
for rec in res.metrics[::5]:
    print(f"episode {rec['episode']:3d} return {rec['return']:8.1f} R100MA {rec['r100ma']:8.1f} "
          f"updates {rec['total_updates']:4d} loss {rec['loss']}")
print("checkpoints:", sorted(p.name for p in (out / "student").glob("*.ckpt")))

# %%
# Noise-free evaluation on fixed terrain seeds.
ev = evaluate(out / "student" / "final.ckpt", cfg, episodes=5)
print("success ratio", ev["success_ratio"], "mean return", round(ev["return_mean"], 1), ev["causes"])

# %%
# Teacher episodes go into a separate replay partition whose sampling weight
# halves every half_life episodes.
record_teacher(out / "student" / "final.ckpt", 3, out / "teacher.bin", cfg)
icfg = apply_overrides(cfg, [("injection_on", "true"), ("half_life", "5"),
                             ("teacher_files", str(out / "teacher.bin"))]).validate()
ires = train(icfg)
print("anneal factors:", [round(r["anneal"], 3) for r in ires.metrics[::4]])
print("outputs in", out)
