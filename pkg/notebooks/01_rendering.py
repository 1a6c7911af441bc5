# %% [markdown]
# Rendering a tri-grid scene: sampling, compositing, and the hand-written backward pass.

# %%
import numpy as np

from trigrid import OrbitCamera, init_scene, render_image
from trigrid.render import composite_weights
from trigrid.scene import sample_features, TriGrid

# %%
# a random scene renders to a foreground image, a mask and a composite over the learned background
scene = init_scene(depth=3, resolution=8, channels=8, hidden=(32,), image_size=(32, 32), seed=0, feature_std=0.5)
out = render_image(scene, OrbitCamera(yaw=0.3, height=32, width=32), n_samples=32)
out.raw.shape, out.mask.min(), out.mask.max()

# %%
# constant density sigma over a unit segment gives opacity 1 - exp(-sigma), whatever the sample count
for n in (2, 8, 64):
    w, _ = composite_weights(np.full((1, n), 2.0), np.full((1, n), 1.0 / n))
    print(n, w.sum(), 1 - np.exp(-2.0))

# %%
# with one plane per stack the sampler reduces to three bilinear lookups
grid = TriGrid(*np.random.default_rng(0).normal(size=(3, 1, 6, 6, 4)))
pts = np.random.default_rng(1).uniform(-1, 1, size=(5, 3))
sample_features(grid, pts)

# %%
# each pixel's 7 discriminator channels: upsampled composite, raw, and mask
from trigrid.render import render_discriminator_input
d = render_discriminator_input(scene, OrbitCamera(yaw=0.0, height=32, width=32), factor=2, n_samples=16)
d.raster.shape
