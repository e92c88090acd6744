"""Train a small learned gate field and compare it with the analytic one.

Renders 200 noisy depth images with labelled points, trains a reduced
encoder / SDF decoder for a few epochs and reports per-class errors and
near-surface sign agreement on held-out records. The full-size model uses
``gatemppi train`` with the desk profile; this keeps to about a minute.
"""

from dataclasses import replace

import numpy as np

from gatemppi import neural_sdf, perception
from gatemppi.gate_sdf import GateGeometry

SEED = 3
g = GateGeometry()
cam = perception.CameraModel.from_fov(32, 24, 90.0)
ds = perception.generate_dataset(200, SEED, cam, perception.NOISE_PRESETS["sim"], g, n_points=1024)
train, val = ds.split(0.2, SEED)
print(f"{len(train)} training / {len(val)} held-out records, mean input noise "
      f"{np.abs(val.noisy - val.clean).mean():.3f} m")

arch = neural_sdf.Architecture(height=24, width=32, latent=32, channels=(8, 16, 32), hidden=64, depth=3, pe_bands=4,
                               pe_scale=12.0, depth_scale=12.0)
cfg = replace(neural_sdf.TrainConfig(seed=SEED), epochs=8, points_per_image=256, val_points=512)
model, hist = neural_sdf.train_stage1(train, val, cfg, arch,
                                      log=lambda row: print("  epoch {epoch}: val recon {val_recon:.3f} m, "
                                                            "val sdf {val_sdf:.3f} m".format(**row)))

for name, pred in (("learned", neural_sdf.predict_dataset(neural_sdf.model_predictor(model), val)),
                   ("analytic", neural_sdf.analytic_predictions(val, g))):
    m = neural_sdf.sdf_metrics(pred, val, cam, g)
    per_class = ", ".join(f"{k} {m[k]['mean_l1']:.3f}"
                          for k in ("near_surface", "interior", "collision_prone", "global_uniform"))
    print(f"{name:>8}: mean L1 {m['all']['mean_l1']:.3f} m ({per_class}); "
          f"sign agreement {m['sign_agreement']['rate']:.3f} on {m['sign_agreement']['points']} points")
