"""PGD with and without a foreground mask on a naturally trained SmallVGG."""

import tempfile

import numpy as np

from fgmask.adversary import AttackConfig, pgd_attack
from fgmask.datasetkit import SynthConfig, synth_generate
from fgmask.trainer import Dataset, TrainConfig, evaluate, train

with tempfile.TemporaryDirectory() as tmp:
    manifest = synth_generate(SynthConfig(n_samples=300, seed=3), tmp)
    data = Dataset.from_manifest(manifest, need_masks=True)

train_set = Dataset(data.x[:240], data.labels[:240], 2, data.masks[:240])
test_set = Dataset(data.x[240:], data.labels[240:], 2, data.masks[240:])

# a few epochs are enough to fit the shapes on clean inputs
model, log = train(train_set, TrainConfig(epochs=5, seed=3))
print("train accuracy per epoch", [round(e.accuracy, 3) for e in log])

attack = AttackConfig()  # eps 8/255, step 2/255, 10 steps
print("raw input    ", evaluate(model, test_set, attack, "raw"))

# the same attack confined to the object: the background can no longer carry the perturbation
res = pgd_attack(model, test_set.x[:5], test_set.labels[:5], attack, test_set.masks[:5])
delta = res.x_adv - test_set.x[:5]
off = ~np.broadcast_to(test_set.masks[:5, None], delta.shape)
print("max |delta|", float(np.abs(delta).max()), "max |delta| off the mask", float(np.abs(delta[off]).max()))
print("predictions flipped", res.flipped)
