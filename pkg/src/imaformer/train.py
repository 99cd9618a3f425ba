"""Episodic meta-training: AdamW, cosine schedule, partial fine-tuning."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import tensor as T
from .episode import Dataset, augment_batch, episode_rng, sample_episode
from .mutual_attention import VARIANTS, classify, episode_forward, predict
from .tensor import Tensor
from .vit import ModelConfig, ModelParams, init_params

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class FineTunePolicy:
    """Which parameters receive gradients.

    ``trainable_last_blocks=k`` unfreezes blocks ``L-k .. L-1``; with
    ``k >= 1`` this always includes the final (mutual-attention) block.
    """

    trainable_last_blocks: int = 2
    train_cls_token: bool = True
    train_pos_embed: bool = False
    train_patch_proj: bool = False

    @classmethod
    def full(cls, depth: int) -> "FineTunePolicy":
        return cls(depth, True, True, True)

    @classmethod
    def frozen(cls) -> "FineTunePolicy":
        return cls(0, False, False, False)

    def describe(self) -> str:
        cls_part = "+CLS" if self.train_cls_token else ""
        return f"last {self.trainable_last_blocks} layers{cls_part}"


def trainable_mask(params: ModelParams, policy: FineTunePolicy) -> dict[str, Tensor]:
    """Names and tensors selected by ``policy``, in checkpoint order."""
    depth = len(params.blocks)
    k = policy.trainable_last_blocks
    if not 0 <= k <= depth:
        raise ValueError(f"trainable_last_blocks={k} outside [0, {depth}]")
    selected = {}
    for name, t in params.named_parameters():
        if name.startswith("blocks."):
            keep = int(name.split(".")[1]) >= depth - k
        elif name == "cls_token":
            keep = policy.train_cls_token
        elif name == "pos_embed":
            keep = policy.train_pos_embed
        else:
            keep = policy.train_patch_proj
        if keep:
            selected[name] = t
    return selected


@dataclass
class OptState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    opt: OptState,
    lr: float,
    weight_decay: float = 0.05,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One AdamW update in place (bias-corrected moments, decoupled decay).

    All gradients are validated before anything is written, so a NaN aborts
    the step with parameters and state untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for non-trainable parameter {name!r}")
        if g.shape != params[name].shape:
            raise T.ShapeError("adamw_step", g.shape, params[name].shape)
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name!r} at step {opt.step + 1}")
    opt.step += 1
    c1 = 1.0 - beta1**opt.step
    c2 = 1.0 - beta2**opt.step
    for name, g in grads.items():
        theta = params[name].data
        m = opt.m.get(name)
        v = opt.v.get(name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        opt.m[name], opt.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * theta
        params[name].data = theta - lr * update


def cosine_lr(step: int, total_steps: int, lr_init: float, lr_min: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr_init
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass(frozen=True)
class TrainConfig:
    """Meta-training schedule.  ``temperature=None`` defers to the model config."""

    epochs: int = 30
    episodes_per_epoch: int = 100
    way: int = 5
    shot: int = 1
    query: int = 10
    lr_init: float = 1e-4
    lr_min: float = 1e-6
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    temperature: float | None = None
    seed: int = 0
    init_seed: int = 0
    variant: str = "imaformer"
    policy: FineTunePolicy = FineTunePolicy(4, True, True, True)
    augment: bool = False
    augment_support: bool = True
    augment_query: bool = True
    val_episodes: int = 200
    val_query: int = 5
    val_seed: int = 12345

    def __post_init__(self):
        if not self.lr_init >= self.lr_min > 0:
            raise ValueError("need lr_init >= lr_min > 0")
        if self.epochs * self.episodes_per_epoch < 1:
            raise ValueError("need at least one training episode")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        if isinstance(kw.get("policy"), dict):
            kw["policy"] = FineTunePolicy(**kw["policy"])
        return cls(**kw)


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict]
    best_epoch: int
    best_val_acc: float


def episode_loss(
    params: ModelParams, model_config: ModelConfig, episode, variant: str, temperature: float,
    support_images=None, query_images=None,
) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy over all queries, plus the predicted labels."""
    s_img = episode.support_images if support_images is None else support_images
    q_img = episode.query_images if query_images is None else query_images
    out = episode_forward(params, model_config, s_img, episode.support_labels, q_img, episode.way, variant)
    probs = classify(out.scores, temperature)
    return T.cross_entropy(probs, episode.query_labels), predict(out.scores)


def episode_accuracy(params, model_config, episode, variant: str) -> float:
    out = episode_forward(
        params, model_config, episode.support_images, episode.support_labels,
        episode.query_images, episode.way, variant,
    )
    return float(np.mean(predict(out.scores) == episode.query_labels))


def validation_accuracy(params, model_config, ds: Dataset, config: TrainConfig) -> float:
    accs = []
    for i in range(config.val_episodes):
        ep = sample_episode(ds, config.way, config.shot, config.val_query, episode_rng(config.val_seed, i))
        accs.append(episode_accuracy(params, model_config, ep, config.variant))
    return float(np.mean(accs))


def meta_train(
    train_ds: Dataset,
    val_ds: Dataset | None,
    model_config: ModelConfig,
    config: TrainConfig,
    params: ModelParams | None = None,
    log_path=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train episodically and keep the parameters with the best validation accuracy.

    ``params`` defaults to a fresh init from ``config.init_seed``; the caller's
    object is never modified.  Without ``val_ds`` the last epoch is kept.
    """
    params = init_params(model_config, config.init_seed) if params is None else params.copy()
    params.set_requires_grad(False)
    trainable = trainable_mask(params, config.policy)
    for t in trainable.values():
        t.requires_grad = True
    tau = config.temperature if config.temperature is not None else model_config.temperature
    opt = OptState()
    total = config.epochs * config.episodes_per_epoch
    log: list[dict] = []
    best, best_epoch, best_acc = params.copy(), -1, -1.0
    step = 0
    log_fh = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        for epoch in range(config.epochs):
            losses, accs = [], []
            lr = config.lr_init
            for i in range(config.episodes_per_epoch):
                ep_index = epoch * config.episodes_per_epoch + i
                rng = episode_rng(config.seed, ep_index)
                ep = sample_episode(train_ds, config.way, config.shot, config.query, rng)
                s_img, q_img = ep.support_images, ep.query_images
                if config.augment:
                    if config.augment_support:
                        s_img = augment_batch(s_img, rng)
                    if config.augment_query:
                        q_img = augment_batch(q_img, rng)
                lr = cosine_lr(step, total, config.lr_init, config.lr_min)
                loss, pred = episode_loss(params, model_config, ep, config.variant, tau, s_img, q_img)
                if not np.isfinite(loss.item()):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} episode {i} (seed {config.seed}, index {ep_index})"
                    )
                if trainable:
                    for t in trainable.values():
                        t.grad = None
                    loss.backward()
                    grads = {
                        n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                        for n, t in trainable.items()
                    }
                    try:
                        adamw_step(trainable, grads, opt, lr, config.weight_decay,
                                   config.beta1, config.beta2, config.eps)
                    except TrainingDiverged as exc:
                        raise TrainingDiverged(f"{exc} (episode seed {config.seed}, index {ep_index})") from None
                losses.append(loss.item())
                accs.append(float(np.mean(pred == ep.query_labels)))
                step += 1
            val_acc = validation_accuracy(params, model_config, val_ds, config) if val_ds is not None else float("nan")
            record = {
                "epoch": epoch,
                "mean_loss": float(np.mean(losses)),
                "train_acc": float(np.mean(accs)),
                "val_acc": val_acc,
                "lr": lr,
            }
            log.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            logger.info("epoch %d loss %.4f train %.3f val %.3f", epoch, record["mean_loss"], record["train_acc"], val_acc)
            if on_epoch is not None:
                on_epoch(record)
            score = val_acc if val_ds is not None else float(epoch)
            if score > best_acc:
                best, best_epoch, best_acc = params.copy(), epoch, score
    finally:
        if log_fh is not None:
            log_fh.close()
    best.set_requires_grad(False)
    return TrainResult(best, log, best_epoch, best_acc if val_ds is not None else float("nan"))


def overfit_episode(
    params: ModelParams,
    model_config: ModelConfig,
    episode,
    steps: int,
    lr: float = 1e-4,
    variant: str = "imaformer",
    policy: FineTunePolicy | None = None,
    temperature: float | None = None,
) -> tuple[ModelParams, list[float], list[float]]:
    """Repeated AdamW steps on one episode at constant ``lr`` without weight decay.

    Returns the trained copy plus the loss and query accuracy measured before
    each step.
    """
    params = params.copy()
    params.set_requires_grad(False)
    trainable = trainable_mask(params, policy or FineTunePolicy.full(len(params.blocks)))
    for t in trainable.values():
        t.requires_grad = True
    tau = temperature if temperature is not None else model_config.temperature
    opt = OptState()
    losses, accs = [], []
    for _ in range(steps):
        for t in trainable.values():
            t.grad = None
        loss, pred = episode_loss(params, model_config, episode, variant, tau)
        losses.append(loss.item())
        accs.append(float(np.mean(pred == episode.query_labels)))
        loss.backward()
        grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in trainable.items()}
        adamw_step(trainable, grads, opt, lr, 0.0)
    params.set_requires_grad(False)
    return params, losses, accs
