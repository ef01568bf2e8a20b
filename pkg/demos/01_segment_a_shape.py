"""Cut a shape out of a cluttered image with a graph cut.

Seeds come from the centre disk (foreground) and the border (background);
the minimum cut of the pixel graph separates the two.
"""

import numpy as np

from fgmask.datasetkit import SynthConfig, synth_sample
from fgmask.segmenter import SegmenterParams, sample_center_seeds, segment

rng = np.random.default_rng(0)
img, truth, label = synth_sample(rng, SynthConfig(n_classes=4, amplitude=0.3))
print("image", img.shape, "class", label, "true foreground pixels", truth.sum())

params = SegmenterParams()  # sigma 0.1, 4-connectivity, 25 centre seeds
seeds = sample_center_seeds(32, 32, params, rng_seed=0)
print("foreground seeds", len(seeds.foreground), "background seeds", len(seeds.background))

mask = segment(img, params, rng_seed=0)
iou = (mask & truth).sum() / (mask | truth).sum()
print("segmented pixels", mask.sum(), "IoU", round(float(iou), 4))

# a tiny text rendering: '#' foreground, '.' background
for row in mask[::2, ::1]:
    print("".join("#" if v else "." for v in row))

# with a loose colour scale every edge costs about the same, so the shortest cut just hugs the seeds
loose = segment(img, SegmenterParams(sigma=1.0), rng_seed=0)
print("sigma=1.0 segmented pixels", loose.sum())
