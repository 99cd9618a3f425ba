"""Short episodic meta-training run on a small benchmark.

Every parameter is trainable here; ``FineTunePolicy`` restricts that to the
last blocks (and optionally the CLS token).
"""

import logging

from imaformer import FineTunePolicy, ModelConfig, TrainConfig, meta_train
from imaformer.episode import SyntheticSpec, generate_synthetic, split_classes
from imaformer.evaluation import evaluate

logging.basicConfig(level=logging.INFO, format="%(message)s")

ds = generate_synthetic(SyntheticSpec(classes=40, images_per_class=20, image_size=16, patch_size=4,
                                      signature_patches=2, distractors=2, seed=1))
parts = split_classes(ds, {"train": 25, "val": 5, "test": 10}, seed=0)
model = ModelConfig(image_size=16, patch_size=4, depth=3, dim=16, heads=2)
train = TrainConfig(epochs=6, episodes_per_epoch=50, way=5, shot=1, query=5, val_episodes=20,
                    policy=FineTunePolicy.full(model.depth))

result = meta_train(parts["train"], parts["val"], model, train)
print("best epoch", result.best_epoch, "val acc", round(result.best_val_acc, 3))
report = evaluate(result.params, model, parts["test"], 5, 1, 10, tasks=100, seed=0)
print("test accuracy", report.summary(), "over", report.tasks, "tasks")
