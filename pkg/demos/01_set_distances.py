"""Comparing point clouds: Chamfer distance versus Earth Mover's Distance.

Run with ``python demos/01_set_distances.py``.
"""
# %%
import numpy as np

from pcanomaly import chamfer, emd_approx, emd_exact, synth_generate

ds = synth_generate(["sphere", "cube"], per_class=2, n=128, noise_sigma=0.01, seed=0)
sphere_a, sphere_b, cube_a, _ = ds.clouds
print("clouds:", ds.clouds.shape, "labels:", ds.labels)

# %%
# Both distances are small between two samples of the same surface and grow
# between families. Chamfer matches each point to its nearest neighbor in the
# other cloud; EMD insists on a one-to-one matching.
for name, other in [("sphere vs sphere", sphere_b), ("sphere vs cube", cube_a)]:
    cd = chamfer(sphere_a, other).value
    emd = emd_exact(sphere_a, other).value / len(other)
    print(f"{name:17s} chamfer {cd:.4f}   emd per point {emd:.4f}")

# %%
# Piling every point onto eight of its own locations leaves one Chamfer
# direction at zero, since each clumped point sits exactly on the original.
# EMD has to move mass back out to every point it left uncovered.
clumped = sphere_a[np.random.default_rng(1).integers(0, 8, size=len(sphere_a))]
print(f"clumped sphere    chamfer {chamfer(sphere_a, clumped).value:.4f}"
      f"   emd per point {emd_exact(sphere_a, clumped).value / len(sphere_a):.4f}")

# %%
# The auction solver trades accuracy for speed; its error is at most n * epsilon.
for eps in (1e-1, 1e-2, 1e-4):
    approx = emd_approx(sphere_a, cube_a, eps).value
    exact = emd_exact(sphere_a, cube_a).value
    print(f"auction epsilon {eps:g}: excess {approx - exact:.2e} (bound {len(cube_a) * eps:.1e})")
