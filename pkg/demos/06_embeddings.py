"""Query embeddings before and after mutual attention, projected to 2-D.

"before" is the plain final CLS of each query; "after" averages the query's
CLS over the N prototype-conditioned passes. The CSV is ready for any
plotting tool.
"""

import tempfile
from pathlib import Path

import numpy as np

from imaformer import ModelConfig, init_params
from imaformer.episode import SyntheticSpec, generate_synthetic, sample_episode
from imaformer.evaluation import export_embeddings, pca_project

points = np.random.default_rng(0).standard_normal((200, 5)) * [4, 2, 1, 0.5, 0.1]
res = pca_project(points)
print("explained variance of anisotropic Gaussian:", res.explained.round(3))

config = ModelConfig(image_size=16, patch_size=4, depth=3, dim=16, heads=2)
ds = generate_synthetic(SyntheticSpec(classes=10, images_per_class=20, image_size=16, patch_size=4, seed=2))
episode = sample_episode(ds, 5, 1, 15, 0)

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "emb.csv"
    dump = export_embeddings(init_params(config, 0), config, episode, path)
    lines = path.read_text().splitlines()
    print(len(lines) - 1, "rows;", lines[0])
    print(lines[1])
    print("explained (before, after):", dump.before_pca.explained.round(3), dump.after_pca.explained.round(3))
