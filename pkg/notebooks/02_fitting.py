# %% [markdown]
# Fitting a scene to synthetic views, with per-view camera residuals, then comparing tri-plane and tri-grid.

# %%
import numpy as np

from trigrid import FitConfig, ProxyScene, fit_scene, make_dataset
from trigrid.camera import apply_camera_residual
from trigrid.fitting import ablate_representation, evaluate_views, format_table
from trigrid.synthdata import heldout_views

# %%
proxy = ProxyScene()
data = make_dataset(proxy, n_views=16, size=32, noise_yaw=0.1, crop_drift=2.0, seed=0)
views = data.train_views()
config = FitConfig(iterations=300, batch_pixels=512)
scene, residuals, report = fit_scene(views, config)
report.losses[0], report.losses[-1]

# %%
# yaw error of the labels versus the corrected cameras
wrap = lambda a: (a + np.pi) % (2 * np.pi) - np.pi
before = np.mean([abs(wrap(r.label.yaw - r.truth.yaw)) for r in data.records])
after = np.mean([abs(wrap(apply_camera_residual(r.label, d).yaw - r.truth.yaw))
                 for r, d in zip(data.records, residuals)])
before, after

# %%
held = heldout_views(proxy, np.deg2rad([-30.0, 30.0, 150.0, 210.0]), size=32)
evaluate_views(scene, held, config).psnr

# %%
# equal-budget comparison of one plane per stack against three
table = ablate_representation(views, held, FitConfig(iterations=100, batch_pixels=512, residuals=False),
                              depth=3, resolution=8, channels=8, hidden=(32,))
print(format_table(table))
