"""The patch-signature benchmark and episodic sampling.

Each class owns a few grid cells holding a fixed pattern. Distractor patches
sit in the same place in every image, so only the local signatures tell the
classes apart.
"""

import tempfile
from pathlib import Path

import numpy as np

from imaformer.episode import (
    SyntheticSpec, augment, class_layout, episode_rng, generate_synthetic, load_dataset, sample_episode,
    save_dataset, split_classes,
)

spec = SyntheticSpec(classes=30, images_per_class=20, seed=4)
ds = generate_synthetic(spec)
d_cells, _, s_cells, _ = class_layout(spec)
print("dataset", ds.images.shape, "distractor cells", d_cells.tolist())
print("signature cells of the first classes", s_cells[:4].tolist())

parts = split_classes(ds, {"train": 18, "val": 6, "test": 6}, seed=0)
print({name: sorted(p.class_ids) for name, p in parts.items()})

ep = sample_episode(parts["train"], 5, 1, 10, episode_rng(0, 0))
print("episode classes", ep.classes.tolist(), "support", ep.support_images.shape, "query", ep.query_images.shape)

flipped = augment(ep.support_images[0], np.random.default_rng(3), scale=(1.0, 1.0), flip_prob=1.0)
print("flip only mirrors:", np.array_equal(flipped, ep.support_images[0][:, :, ::-1]))

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "bench.fsds"
    save_dataset(ds, path)
    print("FSDS bytes", path.stat().st_size, "round trip equal:",
          load_dataset(path).images.tobytes() == ds.images.tobytes())
