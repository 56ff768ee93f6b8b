# Plan a pouring trajectory against a learned surrogate: pick a target
# pile (itself produced by a scripted pour), then let the evolutionary
# search shape six via-points so the predicted end state matches it.
# Sizes here are toy so the whole script runs in a few minutes; the
# acceptance-scale campaign uses the 200-particle pouring scene with
# population 12 and 40 generations.

import numpy as np

from granuplan import datagen, gns
from granuplan.ot import TargetCost
from granuplan.planner import PlannerConfig, plan_trajectory
from granuplan.presets import training_scene_2d
from granuplan.scene import init_scene, settle

scene = training_scene_2d(horizon=60)
H = scene.horizon

# ---- surrogate trained on a handful of pours
records = datagen.generate_dataset(scene, 5, seed=0)
config = gns.GNSConfig(dim=2, K=2, C=2, latent=32, use_controls=True)
model, losses = gns.train(records, config, epochs=60, seed=0,
                          epoch_samples=32, batch_size=2)
print(f"surrogate ready (loss {losses[0]:.3f} -> {losses[-1]:.3f})")

# ---- the start state and a reachable target
start = settle(init_scene(scene, 11), scene).state
start.velocities[:] = 0.0
start.t = 0
gmask = ~start.rigid_mask()

fam = datagen.TrajectoryFamily(
    kind=datagen.FAMILY_COSINE_HOLD, angle_range=(2.0, 2.0),
    shift_range=(0.02, 0.02), angle_noise=0.0, shift_noise=0.0,
    direction=1, plateau=20, seed=5)
script = datagen.make_trajectory(fam, H, dt=scene.dt)
target = datagen.simulate_record(scene, script, start,
                                 name="target").positions[-1]
target = target.astype(np.float64)[gmask]
print(f"target pile: {target.shape[0]} particles, "
      f"centroid ({target[:, 0].mean():.3f}, {target[:, 1].mean():.3f})")

# ---- optimize via-points against the surrogate
history = np.repeat(start.positions[None, :, :], config.C + 1, axis=0)
pcfg = PlannerConfig(population=8, iterations=15, seeds=(0,), H=H,
                     via_count=6)
result = plan_trajectory(model, history, start.material, scene, target,
                         config=pcfg)
print(f"planner: S_eps {result.initial_sinkhorn:.5f} (hold) -> "
      f"{result.sinkhorn:.5f} (optimized, model-predicted)")
print("via-points (angle, shift):")
for row in result.via.via:
    print(f"  {row[0]:+.3f}  {row[1]:+.4f}")

# ---- execute the optimized actions in the ground-truth simulator
score = TargetCost(target)
hold_end = datagen.simulate_record(
    scene, np.zeros((H, 2)), start, name="hold").positions[-1]
exec_end = datagen.simulate_record(
    scene, result.actions, start, name="exec").positions[-1]
s_hold = score(hold_end.astype(np.float64)[gmask])
s_exec = score(exec_end.astype(np.float64)[gmask])
print(f"ground truth: S_eps {s_hold:.5f} (hold) -> {s_exec:.5f} (executed)")
print(f"improvement factor {s_hold / max(s_exec, 1e-12):.1f}x")
