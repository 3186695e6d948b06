"""Train a small keyframe-density predictor on coverage labels.

Run: python3 demos/03_density_model.py   (about a minute)
"""

import numpy as np

from keyrender.density import DensityConfig, DensityModelParams, build_label_dataset, default_label_jobs, predict_count, train
from keyrender.synth import generate_scene, generate_trajectory, scene_descriptor

# Forty labelled trajectories: orbits with random sweeps and dollies through
# random rooms.  Labels come from coverage selection on a coarse 64 px grid.
jobs = default_label_jobs(40, seed=3)
data = build_label_dataset(jobs, resolution=64)
print("label counts:", sorted(s.n_gt for s in data))

# A narrow model trains in seconds.  The target is 0.1 times the keyframe count.
cfg = DensityConfig(width=32, heads=4, layers=2)
params = DensityModelParams.initialize(cfg, seed=0)
result = train(params, data, lr=1e-3, batch_size=8, steps=400, seed=0)
print(f"loss {result.initial_loss:.3f} -> {result.final_loss:.4f} after {len(result.losses)} steps")

# Predict for fresh scenes and compare with their labels.
from keyrender.density.labels import label_keyframes

for seed in (101, 102, 103):
    scene = generate_scene("room", seed)
    traj = generate_trajectory("orbit", 20.0, 30.0, seed, scene.bounds)
    k_pred = predict_count(result.params, traj, scene_descriptor(scene, cfg.descriptor_dim))
    k_label = label_keyframes(scene, traj, resolution=64).count
    print(f"room {seed}: predicted {k_pred} keyframes, coverage label {k_label}, {len(traj)} dense frames")

result.params.save("demo_density.bin")
print("checkpoint written to demo_density.bin (+ .json manifest)")
