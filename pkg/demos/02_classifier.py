# %% [markdown]
# Train the whole-scan pallet classifier, cross-validate it and sweep the learning rate.
# Sizes are cut down so this finishes in a few minutes on one core.
import time

from palletscan.synth import generate_dataset
from palletscan.train_eval import HyperParams, cross_validate, evaluate, sweep, train_classifier
from palletscan.workflow import classifier_inputs

# %%
frames = generate_dataset(120, 80, seed=2)
images, labels = classifier_inputs(frames)
print(images.shape, "positives:", int(labels.sum()))

# %%
hp = HyperParams(learning_rate=0.1, max_epochs=10, filters=15)
t0 = time.perf_counter()
model, losses = train_classifier(images, labels, hp)
print("epoch losses", [round(l, 4) for l in losses], f"({time.perf_counter() - t0:.0f} s)")
print("training-set metrics", evaluate(model, images, labels).as_dict())

# %%
# fold-wise scores; the same seed gives the same folds however many workers run them
cv = cross_validate(images, labels, hp, jobs=1)
for k, m in enumerate(cv.folds):
    print(f"fold {k}: acc {m.accuracy:.3f}")
print("mean", cv.mean)

# %%
# a short learning-rate sweep, 3 folds and 5 epochs to keep it quick; at this size rows
# move by several points between seeds, the full-size sweep is far steadier
quick = HyperParams(max_epochs=5, folds=3)
report = sweep(images, labels, quick, "learning_rate", [0.001, 0.01, 0.1])
print(report.to_tsv())
print("best", report.best.value)
