# Ground-truth simulation walkthrough: drop a packing into the cup,
# settle it, pour with a scripted tilt-hold-return trajectory, and check
# that the stored record replays bit for bit.

import numpy as np

from granuplan import datagen
from granuplan.presets import training_scene_2d
from granuplan.scene import init_scene, settle

scene = training_scene_2d(horizon=120)
print(f"scene: {scene.dim}D, container {scene.container_extents}, "
      f"{scene.granular_count} granular particles, dt={scene.dt}")

# ---- settle the initial packing
state = init_scene(scene, seed=0)
print(f"initialized {state.positions.shape[0]} particles "
      f"({int(state.rigid_mask().sum())} rigid cup sites)")

res = settle(state, scene)
state = res.state
state.velocities[:] = 0.0
state.t = 0
print(f"settled in {res.steps} steps, converged={res.converged}")

heights = state.positions[state.granular_mask(), 1]
print(f"pile height: {heights.min():.4f} .. {heights.max():.4f} m")

# ---- script a pour: ramp the tilt up, hold, ramp back
family = datagen.TrajectoryFamily(
    kind=datagen.FAMILY_COSINE_HOLD,
    angle_range=(2.3, 2.3),          # peak tilt, radians (past pour onset)
    shift_range=(0.02, 0.02),        # translation random-walk step scale
    angle_noise=0.0, shift_noise=0.0,
    direction=1, seed=3)
actions = datagen.make_trajectory(family, scene.horizon, dt=scene.dt)
print(f"actions: {actions.shape}, peak tilt {actions[:, 0].max():.3f} rad, "
      f"final pose ({actions[-1, 0]:.3f}, {actions[-1, 1]:.3f})")

record = datagen.simulate_record(scene, actions, state, name="pour_demo")
print(f"simulated {record.horizon} steps, frames {record.positions.shape}")

# how much material left the cup footprint
cx = float(scene.cup.pivot[0])
gx = record.positions[-1, record.material == 0, 0]
poured = np.mean(np.abs(gx - cx) > 0.04)
print(f"poured fraction (outside the cup footprint): {poured:.0%}")

# ---- records are exactly replayable from their stored initial frame
print("replay is bit-exact:", datagen.verify_replay(record))
