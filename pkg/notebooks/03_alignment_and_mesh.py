# %% [markdown]
# Cropping large-pose images from head boxes calibrated against landmark crops, and pulling a mesh out of a fit.

# %%
import numpy as np

from trigrid import ProxyScene
from trigrid.alignment import align_frontal, align_large_pose, calibrate_offsets
from trigrid.meshing import DensityGrid, marching_cubes, voxel_centers
from trigrid.synthdata import dual_detector_samples

# %%
proxy = ProxyScene()
samples = dual_detector_samples(proxy, 24, seed=0)
cal = calibrate_offsets([(lm, box) for lm, box, _ in samples], 64)
cal

# %%
# the calibrated box crop lands on the landmark crop
lm, box, _ = samples[0]
a, b = align_frontal(lm, 64), align_large_pose(box, cal, 64)
a.scale / b.scale, np.subtract(a.translation, b.translation)

# %%
# marching cubes on an analytic sphere
n = 32
r = np.linalg.norm(voxel_centers(n), axis=1)
sphere = DensityGrid((0.6 - r).reshape(n, n, n))
mesh = marching_cubes(sphere, 0.0)
radii = np.linalg.norm(mesh.vertices, axis=1)
len(mesh), radii.min(), radii.max()
