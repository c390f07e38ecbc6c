"""Telling viewing directions apart from the outline alone.

A handful of (azimuth, elevation) bins of the bundled target are rendered
with random roll, turned into rotation-normalized Zernike features and
modelled with one mixture per bin.  A held-out render is then ranked
against all of them.

    python demos/classify_silhouette.py
"""

import numpy as np

from relnav import mixture, scene
from relnav import pipeline as pl

mesh = scene.load_target()
cfg = pl.ClassifierConfig()
bins = [(a, e) for a in (0, 9, 18, 27) for e in (4, 9, 13)]
print(f"training {len(bins)} classes of {cfg.az_width:.0f} x {cfg.el_width:.0f} deg ...")
db = pl.train_classifier(mesh, cfg, pl.class_features(mesh, cfg, bins))

rng = np.random.default_rng(11)
K = cfg.camera
for a, e in bins[::3]:
    az, el = cfg.bin_center(a, e)
    pose = pl.rolled(scene.view_pose(az, el, cfg.distance), rng.uniform(0, 2 * np.pi))
    mask, _ = scene.rasterize(mesh, K, pose)
    ranked = mixture.classify(db, pl.query_feature(mask, K, db))
    top = ", ".join(f"{c}" for c, _ in ranked[:3])
    print(f"true {(a, e)}  top three {top}")
