"""Command-line entry point: ``imaformer <subcommand> [options]``.

Subcommands: ``gen-data``, ``meta-train``, ``evaluate``, ``ablate``,
``export-embeddings``.  Settings come from a flat JSON config file (see
:class:`RunConfig`), then ``--set key=value`` and dedicated flags override it.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from functools import lru_cache
from pathlib import Path

from .episode import (
    Dataset, DatasetFormatError, SyntheticSpec, generate_synthetic, load_dataset, sample_episode,
    save_dataset, split_classes,
)
from .evaluation import AblationCell, ablate, evaluate, export_embeddings, write_ablation_csv
from .train import FineTunePolicy, TrainConfig, TrainingDiverged, meta_train
from .vit import CheckpointError, ModelConfig, load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_CONFIG = 4
EXIT_FORMAT = 5
EXIT_DIVERGED = 6

SEED_ENV = "IMAFORMER_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Flat run configuration; defaults are the desk-scale setup.

    Model: image_size, channels, patch_size, depth, dim, heads, mlp_ratio,
    temperature, final_attention, final_residual, score_mode.
    Data: classes, images_per_class, signature_patches, sigma_sig, sigma_bg,
    distractors, background_level, signature_gain, data_seed, train_classes,
    val_classes, test_classes, split_seed.
    Training: epochs, episodes_per_epoch, way, shot, query, lr_init, lr_min,
    weight_decay, beta1, beta2, eps, seed, init_seed, variant,
    trainable_last_blocks, train_cls_token, train_pos_embed,
    train_patch_proj, augment, val_episodes, val_query, val_seed.
    Evaluation: tasks, eval_query, eval_seed.  Runtime: threads.
    """

    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    depth: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 2
    temperature: float = 10.0
    final_attention: str = "class"
    final_residual: bool = True
    score_mode: str = "sum"

    classes: int = 100
    images_per_class: int = 40
    signature_patches: int = 2
    sigma_sig: float = 0.1
    sigma_bg: float = 0.1
    distractors: int = 2
    background_level: float = 0.5
    signature_gain: float = 1.0
    data_seed: int = 0
    train_classes: int = 64
    val_classes: int = 16
    test_classes: int = 20
    split_seed: int = 0

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
    seed: int = 0
    init_seed: int = 0
    variant: str = "imaformer"
    trainable_last_blocks: int = 4
    train_cls_token: bool = True
    train_pos_embed: bool = True
    train_patch_proj: bool = True
    augment: bool = False
    val_episodes: int = 200
    val_query: int = 5
    val_seed: int = 12345

    tasks: int = 1000
    eval_query: int = 10
    eval_seed: int = 2024

    threads: int = 1

    @classmethod
    def keys(cls) -> dict[str, type]:
        return {f.name: f.type for f in fields(cls)}

    @classmethod
    def resolve(cls, path=None, overrides: dict | None = None, env=None) -> "RunConfig":
        """File values, then ``IMAFORMER_SEED`` for an unset seed, then overrides."""
        env = os.environ if env is None else env
        values: dict = {}
        if path is not None:
            try:
                values = json.loads(Path(path).read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
            if not isinstance(values, dict):
                raise ConfigError(f"{path}: config must be a JSON object")
        overrides = dict(overrides or {})
        if "seed" not in values and "seed" not in overrides and env.get(SEED_ENV):
            try:
                values["seed"] = int(env[SEED_ENV])
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer") from None
        values.update(overrides)
        known = cls.keys()
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in values.items():
            values[k] = _coerce(k, v, getattr(cls, k))
        try:
            cfg = cls(**values)
            cfg.model_config()
            cfg.train_config()
            cfg.synthetic_spec()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.to_dict())

    def policy(self) -> FineTunePolicy:
        return FineTunePolicy(
            self.trainable_last_blocks, self.train_cls_token, self.train_pos_embed, self.train_patch_proj
        )

    def train_config(self) -> TrainConfig:
        d = self.to_dict()
        d["policy"] = self.policy()
        d["temperature"] = self.temperature
        return TrainConfig.from_dict(d)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            classes=self.classes, images_per_class=self.images_per_class,
            image_size=self.image_size, channels=self.channels, patch_size=self.patch_size,
            signature_patches=self.signature_patches, sigma_sig=self.sigma_sig,
            sigma_bg=self.sigma_bg, distractors=self.distractors,
            background_level=self.background_level, signature_gain=self.signature_gain,
            seed=self.data_seed,
        )

    def splits(self, ds: Dataset) -> dict[str, Dataset]:
        if ds.split != "all":
            return {ds.split: ds}
        counts = {"train": self.train_classes, "val": self.val_classes, "test": self.test_classes}
        return split_classes(ds, counts, self.split_seed)


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}") from None
    return str(value)


@lru_cache(maxsize=1)
def build_id() -> str:
    from . import __version__

    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def provenance(cfg: RunConfig, command: str) -> dict:
    return {"command": command, "run_config": cfg.to_dict(), "build": build_id(),
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = json.loads(v)
        except json.JSONDecodeError:
            out[k.strip()] = v
    return out


def _parse_sweep(text: str, depth: int) -> list[AblationCell]:
    """``variant:layers:cls`` items separated by commas, e.g. ``imaformer:4:1,vanilla:4:1``."""
    cells = []
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) != 3:
            raise ConfigError(f"sweep cell {item!r} is not variant:layers:cls")
        variant, layers, cls = parts
        try:
            layers_n = int(layers)
        except ValueError:
            raise ConfigError(f"sweep cell {item!r}: layers must be an integer") from None
        full = layers_n == depth
        cells.append(AblationCell(variant, FineTunePolicy(layers_n, cls in ("1", "true", "yes"), full, full)))
    return cells


# -- subcommands ------------------------------------------------------------------------
def cmd_gen_data(args, cfg: RunConfig) -> int:
    ds = generate_synthetic(cfg.synthetic_spec())
    ds.metadata["provenance"] = {k: v for k, v in provenance(cfg, "gen-data").items() if k != "timestamp"}
    save_dataset(ds, args.out)
    print(f"wrote {ds.num_classes} classes x {ds.images_per_class} images to {args.out}")
    return EXIT_OK


def cmd_meta_train(args, cfg: RunConfig) -> int:
    splits = cfg.splits(load_dataset(args.data))
    train_ds = splits.get("train") or next(iter(splits.values()))
    val_ds = splits.get("val")
    if args.val_data:
        val_ds = load_dataset(args.val_data)
    model_cfg = cfg.model_config()
    prov = provenance(cfg, "meta-train")
    log_path = args.log or str(Path(args.out).with_suffix(".jsonl"))
    result = meta_train(train_ds, val_ds, model_cfg, cfg.train_config(), log_path=log_path)
    save_checkpoint(args.out, result.params, model_cfg, {k: v for k, v in prov.items() if k != "timestamp"})
    _write_json(log_path + ".meta.json", {**prov, "best_epoch": result.best_epoch,
                                          "best_val_acc": result.best_val_acc})
    print(f"best epoch {result.best_epoch} val acc {result.best_val_acc:.4f}; checkpoint {args.out}")
    return EXIT_OK


def _test_split(cfg: RunConfig, path) -> Dataset:
    splits = cfg.splits(load_dataset(path))
    return splits.get("test") or next(iter(splits.values()))


def cmd_evaluate(args, cfg: RunConfig) -> int:
    params, model_cfg, _ = load_checkpoint(args.checkpoint)
    ds = _test_split(cfg, args.data)
    report = evaluate(params, model_cfg, ds, cfg.way, cfg.shot, cfg.eval_query, cfg.tasks,
                      cfg.eval_seed, cfg.variant, cfg.policy())
    report.to_json(args.out, {"provenance": provenance(cfg, "evaluate")})
    print(f"{cfg.variant}: {report.summary()} over {report.tasks} tasks")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    splits = cfg.splits(load_dataset(args.data))
    sweep = _parse_sweep(args.sweep, cfg.depth)
    rows = ablate(splits["train"], splits.get("val"), splits["test"], cfg.model_config(),
                  cfg.train_config(), sweep, cfg.tasks, cfg.eval_query, cfg.eval_seed)
    write_ablation_csv(rows, args.out)
    _write_json(Path(args.out).with_suffix(".json"), {
        **provenance(cfg, "ablate"),
        "rows": [{"variant": r.variant, "policy": asdict(r.policy), "init_hash": r.init_hash,
                  "accuracy": r.report.mean_accuracy, "ci95": r.report.ci95} for r in rows],
    })
    for r in rows:
        print(f"{r.variant:10s} {r.policy.describe():22s} {r.report.summary()}")
    return EXIT_OK


def cmd_export(args, cfg: RunConfig) -> int:
    params, model_cfg, _ = load_checkpoint(args.checkpoint)
    ds = _test_split(cfg, args.data)
    seed = args.episode_seed if args.episode_seed is not None else cfg.eval_seed
    ep = sample_episode(ds, cfg.way, cfg.shot, args.queries, seed)
    prov = {k: v for k, v in provenance(cfg, "export-embeddings").items() if k != "timestamp"}
    export_embeddings(params, model_cfg, ep, args.out, prov)
    print(f"wrote {2 * len(ep.query_labels)} rows to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imaformer", description=__doc__.split("\n")[0])
    parser.add_argument("--threads", type=int, default=None, help="BLAS thread count (default 1)")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p):
        p.add_argument("--config", help="flat JSON run config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, help="training seed (falls back to $IMAFORMER_SEED)")
        return p

    p = common(sub.add_parser("gen-data", help="generate a synthetic FSDS dataset"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("meta-train", help="episodic meta-training"))
    p.add_argument("--data", required=True)
    p.add_argument("--val-data")
    p.add_argument("--out", default="model.imac")
    p.add_argument("--log")
    p.add_argument("--epochs", type=int)
    p.add_argument("--episodes", type=int, dest="episodes_per_epoch")
    p.add_argument("--variant", choices=("imaformer", "vanilla"))
    p.set_defaults(func=cmd_meta_train)

    p = common(sub.add_parser("evaluate", help="episodic test accuracy with 95%% CI"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="report.json")
    p.add_argument("--tasks", type=int)
    p.add_argument("--query", type=int, dest="eval_query")
    p.add_argument("--way", type=int)
    p.add_argument("--shot", type=int)
    p.add_argument("--variant", choices=("imaformer", "vanilla"))
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("ablate", help="train and evaluate a sweep of variant/policy cells"))
    p.add_argument("--data", required=True)
    p.add_argument("--sweep", default="imaformer:4:1,vanilla:4:1", help="variant:layers:cls,...")
    p.add_argument("--out", default="ablation.csv")
    p.add_argument("--tasks", type=int)
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("export-embeddings", help="PCA query embeddings before/after mutual attention"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--episode-seed", type=int)
    p.add_argument("--queries", type=int, default=15)
    p.add_argument("--out", default="embeddings.csv")
    p.set_defaults(func=cmd_export)
    return parser


_FLAG_KEYS = ("seed", "epochs", "episodes_per_epoch", "variant", "tasks", "eval_query", "way", "shot")


def run(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        overrides = _parse_set(args.set)
        for key in _FLAG_KEYS:
            if getattr(args, key, None) is not None:
                overrides[key] = getattr(args, key)
        if args.threads is not None:
            overrides["threads"] = args.threads
        cfg = RunConfig.resolve(args.config, overrides)
    except ConfigError as exc:
        print(f"imaformer: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"imaformer: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=cfg.threads):
            return args.func(args, cfg)
    except (DatasetFormatError, CheckpointError) as exc:
        print(f"imaformer: bad file format: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"imaformer: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        print(f"imaformer: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"imaformer: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, KeyError) as exc:
        print(f"imaformer: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())
