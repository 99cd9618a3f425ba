"""Controlled comparison: the mutual-attention variant against the vanilla CLS baseline.

Both cells start from the same initial weights and see identical episodes;
only the scoring mechanism differs.
"""

import tempfile
from pathlib import Path

from imaformer import FineTunePolicy, ModelConfig, TrainConfig
from imaformer.episode import SyntheticSpec, generate_synthetic, split_classes
from imaformer.evaluation import AblationCell, ablate, write_ablation_csv

ds = generate_synthetic(SyntheticSpec(classes=40, images_per_class=20, image_size=16, patch_size=4,
                                      signature_patches=2, distractors=2, seed=1))
parts = split_classes(ds, {"train": 25, "val": 5, "test": 10}, seed=0)
model = ModelConfig(image_size=16, patch_size=4, depth=3, dim=16, heads=2)
base = TrainConfig(epochs=3, episodes_per_epoch=40, way=5, query=5, val_episodes=20)

sweep = [
    AblationCell("imaformer", FineTunePolicy.full(3)),
    AblationCell("vanilla", FineTunePolicy.full(3)),
    AblationCell("imaformer", FineTunePolicy(2, True)),
    AblationCell("imaformer", FineTunePolicy(2, False)),
]
rows = ablate(parts["train"], parts["val"], parts["test"], model, base, sweep, tasks=100)
for r in rows:
    print(f"{r.variant:10s} {r.policy.describe():18s} {r.report.summary():>16s}  init {r.init_hash[:12]}")

with tempfile.TemporaryDirectory() as tmp:
    write_ablation_csv(rows, Path(tmp) / "table.csv")
    print((Path(tmp) / "table.csv").read_text())
