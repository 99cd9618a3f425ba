"""Episodic evaluation, ablation sweeps and query-embedding export."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .episode import Dataset, Episode, episode_rng, sample_episode
from .mutual_attention import VARIANTS, episode_forward, predict
from .train import FineTunePolicy, TrainConfig, meta_train
from .vit import ModelConfig, ModelParams, init_params

ABLATION_HEADER = ("variant", "layers", "cls", "accuracy", "ci95", "tasks")


def ci95(accuracies) -> float:
    """1.96 times the Bessel-corrected std of per-task accuracies over sqrt(T)."""
    a = np.asarray(accuracies, dtype=np.float64)
    if a.size < 2:
        return 0.0
    return float(1.96 * a.std(ddof=1) / math.sqrt(a.size))


@dataclass
class EvalReport:
    tasks: int
    way: int
    shot: int
    query: int
    variant: str
    mean_accuracy: float
    ci95: float
    accuracies: list[float]
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path, extra: dict | None = None) -> None:
        payload = self.to_dict()
        if extra:
            payload.update(extra)
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def summary(self) -> str:
        return f"{100 * self.mean_accuracy:.2f} +- {100 * self.ci95:.2f}"


def evaluate(
    params: ModelParams,
    config: ModelConfig,
    ds: Dataset,
    way: int = 5,
    shot: int = 1,
    query: int = 10,
    tasks: int = 1000,
    seed: int = 0,
    variant: str = "imaformer",
    policy: FineTunePolicy | None = None,
) -> EvalReport:
    """Accuracy over ``tasks`` seeded episodes; every variant sees the same episode stream."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    accs = []
    for i in range(tasks):
        ep = sample_episode(ds, way, shot, query, episode_rng(seed, i))
        out = episode_forward(
            params, config, ep.support_images, ep.support_labels, ep.query_images, way, variant
        )
        accs.append(float(np.mean(predict(out.scores) == ep.query_labels)))
    echo = {"temperature": config.temperature, "model": config.to_dict(), "seed": seed}
    if policy is not None:
        echo["policy"] = asdict(policy)
    return EvalReport(tasks, way, shot, query, variant, float(np.mean(accs)), ci95(accs), accs, echo)


# -- PCA ------------------------------------------------------------------------
@dataclass
class PCAResult:
    coords: np.ndarray
    explained: np.ndarray
    components: np.ndarray
    mean: np.ndarray


def _orthonormalise(v: np.ndarray, basis: list[np.ndarray]) -> np.ndarray:
    for b in basis:
        v = v - (v @ b) * b
    return v


def pca_project(vectors, k: int = 2, tol: float = 1e-9, max_iter: int = 1000, seed: int = 0) -> PCAResult:
    """Top-``k`` principal axes by deflated power iteration.

    Directions without remaining variance are padded with unit vectors
    orthogonal to the earlier ones, zero coordinates and zero explained
    variance.
    """
    x = np.asarray(vectors, dtype=np.float64)
    n, d = x.shape
    if n < 2:
        raise ValueError("pca_project: need at least two vectors")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (n - 1)
    total = float(np.trace(cov))
    rng = np.random.default_rng(seed)
    work = cov.copy()
    comps, lams = [], []
    scale = max(total, np.finfo(float).tiny)
    for _ in range(k):
        v = _orthonormalise(rng.standard_normal(d), comps)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = _orthonormalise(work @ v, comps)
            norm = np.linalg.norm(w)
            if norm <= 1e-14 * scale:
                lam = 0.0
                break
            w /= norm
            if w @ v < 0:
                w = -w
            done = np.linalg.norm(w - v) < tol
            v = w
            lam = float(v @ work @ v)
            if done:
                break
        if lam <= 1e-14 * scale:
            lam = 0.0
        comps.append(v)
        lams.append(lam)
        work = work - lam * np.outer(v, v)
    components = np.array(comps)
    coords = xc @ components.T
    lams_arr = np.array(lams)
    coords[:, lams_arr == 0.0] = 0.0
    explained = lams_arr / total if total > 0 else np.zeros(k)
    return PCAResult(coords, explained, components, mu)


# -- embedding export ------------------------------------------------------------
@dataclass
class EmbeddingDump:
    labels: np.ndarray
    before: np.ndarray
    after: np.ndarray
    before_pca: PCAResult
    after_pca: PCAResult


def query_embeddings(params: ModelParams, config: ModelConfig, episode: Episode) -> EmbeddingDump:
    """Vanilla final CLS ("before") and the mean over classes of the enhanced query CLS ("after")."""
    args = (params, config, episode.support_images, episode.support_labels, episode.query_images, episode.way)
    before = episode_forward(*args, variant="vanilla").vanilla_query_cls.data
    after = episode_forward(*args, variant="imaformer").query_cls.data.mean(axis=1)
    return EmbeddingDump(
        np.asarray(episode.query_labels), before, after, pca_project(before), pca_project(after)
    )


def export_embeddings(
    params: ModelParams, config: ModelConfig, episode: Episode, path, provenance: dict | None = None
) -> EmbeddingDump:
    """Write ``variant,class,pca_x,pca_y`` rows and a ``.json`` sidecar next to ``path``."""
    dump = query_embeddings(params, config, episode)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "class", "pca_x", "pca_y"])
        for name, res in (("before", dump.before_pca), ("after", dump.after_pca)):
            for label, (x, y) in zip(dump.labels, res.coords[:, :2]):
                w.writerow([name, int(label), repr(float(x)), repr(float(y))])
    sidecar = {
        "explained_variance": {
            "before": dump.before_pca.explained.tolist(),
            "after": dump.after_pca.explained.tolist(),
        },
        "episode": {"way": episode.way, "shot": episode.shot, "queries": episode.queries,
                    "seed": episode.seed, "classes": np.asarray(episode.classes).tolist()},
        "labels": dump.labels.tolist(),
        "raw": {"before": dump.before.tolist(), "after": dump.after.tolist()},
    }
    if provenance is not None:
        sidecar["provenance"] = provenance
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n", encoding="utf-8")
    return dump


# -- ablation ------------------------------------------------------------------------
@dataclass(frozen=True)
class AblationCell:
    variant: str
    policy: FineTunePolicy


@dataclass
class AblationRow:
    variant: str
    policy: FineTunePolicy
    report: EvalReport
    init_hash: str
    train_config: TrainConfig
    params: ModelParams | None = None

    def csv_row(self) -> list:
        return [
            self.variant,
            self.policy.trainable_last_blocks,
            int(self.policy.train_cls_token),
            f"{self.report.mean_accuracy:.6f}",
            f"{self.report.ci95:.6f}",
            self.report.tasks,
        ]


def params_hash(params: ModelParams) -> str:
    h = hashlib.sha256()
    for name, t in params.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()


def ablate(
    train_ds: Dataset,
    val_ds: Dataset | None,
    test_ds: Dataset,
    model_config: ModelConfig,
    base_config: TrainConfig,
    sweep,
    tasks: int = 1000,
    query: int = 10,
    eval_seed: int = 2024,
    keep_params: bool = False,
) -> list[AblationRow]:
    """Train every ``(variant, policy)`` cell from the same init and evaluate on ``test_ds``.

    Cells differ from ``base_config`` only in ``variant`` and ``policy``.
    """
    rows = []
    for cell in sweep:
        cfg = replace(base_config, variant=cell.variant, policy=cell.policy)
        init = init_params(model_config, cfg.init_seed)
        digest = params_hash(init)
        result = meta_train(train_ds, val_ds, model_config, cfg, params=init)
        report = evaluate(
            result.params, model_config, test_ds, cfg.way, cfg.shot, query, tasks,
            eval_seed, cell.variant, cell.policy,
        )
        rows.append(AblationRow(cell.variant, cell.policy, report, digest, cfg,
                                result.params if keep_params else None))
    return rows


def write_ablation_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        for row in rows:
            w.writerow(row.csv_row())
