"""Train the three-player refinement game on a small desk dataset.

Simulated posed renders (source domain) are pushed toward the corrupted
video-frame domain while an identity/pose classifier and a feature
discriminator constrain what the refiner may change.  Prints the loss
trajectory and the before/after FID against the target frames.

Run:  python demos/03_train_refiner.py          (~6 min; edit STEPS to taste)
"""

from pathlib import Path

import numpy as np

from facesynth import evalsuite, shape3d, trainer
from facesynth.cli import build_simulated_set
from facesynth.datakit import DeskDatasetSpec, generate_desk_dataset, save_png
from facesynth.trainer import TrainConfig

STEPS = 800
OUT = Path(__file__).resolve().parent.parent / "out" / "demo03"
OUT.mkdir(parents=True, exist_ok=True)

spec = DeskDatasetSpec(identity_count=5, sequences=2, frames=24, pose_count=9,
                       resolution=32, seed=7)
ds = generate_desk_dataset(spec, OUT / "data")
grid = shape3d.yaw_sweep(9, 40.0)
sim, ids, poses, _ = build_simulated_set(ds, grid, 1e-6)
generic = np.concatenate([ds.frames(i) for i in ds.identity_ids()])
print(f"simulated {sim.shape[0]} faces, generic pool {generic.shape[0]} frames")

config = TrainConfig(steps=STEPS, batch_size=16, resolution=32, channel_base=4,
                     noise_dim=16, seed=7, lr_refiner=1e-3, lr_image_disc=5e-5)
result = trainer.train(config, sim, (ids, poses), generic,
                       checkpoint_dir=OUT / "ckpt", log_path=OUT / "train_log.jsonl")

for key in ("loss_image_disc", "loss_refiner", "loss_classifier", "loss_feature_disc"):
    series = result.log.series(key)
    print(f"{key:18s}: {series[:40].mean():7.3f} -> {series[-40:].mean():7.3f}")
print(f"equilibrium k_t: {result.k_t:.3f}")

refined = trainer.refine_images(result.bundle, sim, noise_seed=1007)
embedder = evalsuite.RandomConvEmbedder(seed=0, resolution=32)
fid_sim = evalsuite.fid_between_image_sets(sim, generic, embedder)
fid_ref = evalsuite.fid_between_image_sets(refined, generic, embedder)
print(f"FID(simulated, target) = {fid_sim:.3f}")
print(f"FID(refined,   target) = {fid_ref:.3f}   (ratio {fid_ref / fid_sim:.2f})")

# side-by-side strips: simulated / refined / a real frame, per identity
strip = np.zeros((3 * 32, 5 * 32))
for col, ident in enumerate(ds.identity_ids()):
    sim_idx = np.nonzero(ids == col)[0][0]
    strip[0:32, col * 32 : (col + 1) * 32] = sim[sim_idx]
    strip[32:64, col * 32 : (col + 1) * 32] = refined[sim_idx]
    strip[64:96, col * 32 : (col + 1) * 32] = ds.frames(ident, sequence=0)[0]
save_png(strip, OUT / "sim_refined_real.png")
print(f"wrote {OUT}/sim_refined_real.png (rows: simulated, refined, real)")
