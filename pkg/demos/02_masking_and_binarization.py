"""Two ways of throwing away adversarial noise before it reaches the model.

Masking zeroes everything outside the object; binarization snaps pixels back
to {0, 1}, which erases any perturbation smaller than half the range.
"""

import numpy as np

from fgmask.datasetkit import SynthConfig, apply_mask, binarize, synth_sample

rng = np.random.default_rng(1)
img, mask, _ = synth_sample(rng, SynthConfig(amplitude=0.3))

masked = apply_mask(img, mask)
print("non-zero pixels before masking", int(img.any(axis=2).sum()))
print("non-zero pixels after masking ", int(masked.any(axis=2).sum()), "= mask size", int(mask.sum()))

# binarization on a binary picture: noise below 0.5 in magnitude disappears
x = (rng.random((8, 8)) < 0.5).astype(float)
for bound in (0.1, 0.3, 0.49, 0.6):
    noisy = x + rng.uniform(-bound, bound, x.shape)
    print(f"noise bound {bound:.2f}: recovered exactly = {np.array_equal(binarize(noisy), x)}")

# the threshold is inclusive
print("binarize([0.3, 0.5, 0.7]) =", binarize(np.array([0.3, 0.5, 0.7])))
