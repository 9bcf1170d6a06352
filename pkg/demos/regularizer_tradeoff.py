"""How each regularizer trades similarity for regularity as lambda grows.

Trains a tiny Stage1 model per (regularizer, lambda) on 32x32 shapes and
prints held-out dissimilarity, fold fraction and displacement magnitude.
A scaled-down version of ``gradicon sweep``; takes a few minutes.

    python3 demos/regularizer_tradeoff.py
"""

import numpy as np

from gradicon.harness.experiments import EvalSet, train_cell
from gradicon.models import UNetSpec
from gradicon.synthdata import gen_shapes
from gradicon.training import ImageCorpus, TrainConfig

images = np.stack([img for img, _, _ in gen_shapes(48, 32, seed=1)])[:, None]
dataset, evalset = ImageCorpus(images[:40]), EvalSet.from_images(images[40:], 4, seed=2)
base = TrainConfig(lr=1e-3, batch=2, stages=1, unet=UNetSpec(levels=2, base_channels=4), fold_every=10**9)

print(f"{'reg':>9} {'lambda':>8} {'1-LNCC':>8} {'folds':>9} {'|u|^2':>9}")
for reg in ("icon", "gradicon", "bending", "diffusion"):
    for lam in (0.1, 1.0, 10.0):
        cell, _ = train_cell(dataset, evalset, base, reg, lam, seed=0, iters=100)
        print(f"{reg:>9} {lam:8.2f} {cell.dissimilarity:8.4f} {cell.fold_fraction:9.2e} {cell.magnitude:9.2e}")
