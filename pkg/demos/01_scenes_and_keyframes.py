"""Synthetic scenes, camera paths and coverage-based keyframe selection.

Run: python3 demos/01_scenes_and_keyframes.py
"""

import numpy as np

from keyrender.density.labels import label_keyframes
from keyrender.keyframes import plan_keyframes
from keyrender.render import render, write_ppm
from keyrender.synth import generate_scene, generate_trajectory

# A procedural room: floor, walls and a handful of furniture boxes, all gaussians.
scene = generate_scene("room", seed=0)
lo, hi = scene.bounds
print(f"room: {len(scene)} gaussians inside {np.round(lo, 2)} .. {np.round(hi, 2)}")

# A 20 s orbit at 30 fps around the room center.
traj = generate_trajectory("orbit", 20.0, 30.0, 0, scene.bounds, resolution=(256, 256))
print(f"orbit: {len(traj)} poses, first center {np.round(traj[0].center, 3)}")

# Render the first frame and save it so there is something to look at.
frame = render(scene, traj[0], (256, 256))
write_ppm("demo_first_frame.ppm", frame.color)
print(f"first frame: mean alpha {frame.alpha.mean():.3f}, written to demo_first_frame.ppm")

# Coverage selection on a 5 fps, 128 px copy of the path: a frame becomes a
# keyframe when the points seen by the keyframes so far cover less than tau
# of it.
for tau in (0.5, 0.8, 0.9, 0.95):
    rep = label_keyframes(scene, traj, tau=tau)
    print(f"tau={tau:.2f}: {rep.count:2d} keyframes, lowest coverage among skipped frames "
          f"{min((r for r, s in zip(rep.ratios, rep.selected) if not s), default=1.0):.3f}")

# The count at tau = 0.9 then drives a uniform keyframe plan over the dense
# trajectory, generated in batches that condition on already-made neighbours.
k = label_keyframes(scene, traj).count
plan = plan_keyframes(len(traj), k, window=8)
print(f"K={k}: keyframe indices {plan.indices}")
for b in plan.batches:
    print(f"  batch targets {list(b.targets)} conditioned on {list(b.conditioning)}")
