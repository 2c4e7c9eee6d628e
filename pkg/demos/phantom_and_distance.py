"""
Phantoms and signed distance maps
=================================

Generate a synthetic target and look at how its labels turn into a signed
distance map, the quantity that decides which voxels are uncertain.
"""
import numpy as np

from fslf.volume import generate_phantom, gradient_magnitude, majority_vote, signed_distance_map

img, lab = generate_phantom(7, n_structures=2, noise_sigma=0.05, deform=1.0)
print("volume", img.dims, "labels present", np.unique(lab.data))

# negative inside, positive outside, zero never occurs on a voxel grid
sdm = signed_distance_map(lab, 1).data
print("distance range %.2f .. %.2f" % (sdm.min(), sdm.max()))
print("voxels within 1 of the boundary:", int(np.sum(np.abs(sdm) <= 1)))

grad = gradient_magnitude(img).data
print("mean gradient inside the band %.3f, elsewhere %.3f"
      % (grad[np.abs(sdm) <= 1].mean(), grad[np.abs(sdm) > 1].mean()))

# three deformed atlases and their vote
atlases = [generate_phantom(i, 2, 0.05, 1.0)[1] for i in range(3)]
mv = majority_vote(atlases).data
for s in (1, 2):
    agree = np.mean((mv == s) == (lab.data == s))
    print("structure %d: vote agrees with truth on %.2f%% of voxels" % (s, 100 * agree))
