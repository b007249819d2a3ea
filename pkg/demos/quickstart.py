"""A short tour of the library API on a handful of phantom knees.

Run with ``python demos/quickstart.py``; takes under a minute on one CPU.
"""

import numpy as np

from klp.classify import ClassifierTrainConfig, MultiInputCNN, PatchSet, classify_forward, knee_patch, train_classifier
from klp.detect import DetectorTrainConfig, GridDetector, evaluate_detection, prepare_input, train_detector
from klp.evalstats import confusion, kappa
from klp.phantom import PhantomConfig, generate_exam, sample_latent
from klp.preprocess import preprocess

# Render knees. Each exam holds a PA and a LAT raster plus the true joint centres.
cfg = PhantomConfig(seed=1)
rng = np.random.default_rng(0)
exams = [generate_exam(cfg, f"K{i:03d}", 0, "right", sample_latent(i % 5, rng)) for i in range(60)]
print("joint-space width by grade:",
      [round(float(np.mean([e.joint_space_width for e in exams if e.kl_grade == g])), 1) for g in range(5)])

# Preprocess: resample to 0.2 mm/px, convert to 8 bit, normalise.
pa = [preprocess(e.pa) for e in exams]
print("normalised PA range:", float(pa[0].samples.min()), float(pa[0].samples.max()))

# A small grid detector on 128 px inputs (8x8 cells of 16 px).
inputs = [prepare_input(img, 128, e.centers["PA"]) for img, e in zip(pa, exams)]
det = GridDetector(grid=8, input_size=128, stem_pool=2, widths=(4, 8, 8), extra=(8,), seed=0)
det, hist = train_detector(det, inputs[:40], inputs[40:50], DetectorTrainConfig(lr=3e-3, max_epochs=10))
print("detector on held-out knees:", evaluate_detection(det, inputs[50:]))

# Crop 700 px around the true centres, shrink to 32 px and fit a tiny PA+LAT classifier.
lat = [preprocess(e.lat) for e in exams]
patches = PatchSet(np.array([knee_patch(p, e.centers["PA"], 32, False) for p, e in zip(pa, exams)]),
                   np.array([knee_patch(q, e.centers["LAT"], 32, False) for q, e in zip(lat, exams)]),
                   np.array([e.kl_grade for e in exams]))
train, test = patches.subset(range(45)), patches.subset(range(45, 60))
model = MultiInputCNN(input_size=32, widths=(4, 8, 8), trunk_width=16, hidden=16, seed=0)
model, hist = train_classifier(model, train, train, ClassifierTrainConfig(lr=3e-3, max_epochs=15, warmup_epochs=15))
scores, grades = classify_forward(model, test.pa, test.lat)
print("test accuracy:", float(np.mean(grades == test.labels)), "QWK:", round(kappa(grades, test.labels), 3))
print(confusion(grades, test.labels))
