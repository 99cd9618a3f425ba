"""Toy-scale Vision Transformer backbone.

Images are split into non-overlapping patches, projected, given a learnable
CLS token and positional table, and run through pre-norm transformer blocks.
The first ``depth - 1`` blocks form the shared encoder; the last block is the
one the mutual-attention head runs on swapped token sets.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"IMAC"
CHECKPOINT_VERSION = 1

BLOCK_PARAM_NAMES = (
    "ln1_g", "ln1_b",
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln2_g", "ln2_b",
    "w1", "b1", "w2", "b2",
)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters plus the mechanism switches.

    ``final_attention`` picks how the last block treats a swapped sequence:
    ``"class"`` (only the CLS token issues a query) or ``"full"`` (ordinary
    self-attention, CLS row read out afterwards).  ``final_residual=False``
    drops the layer norms and residual adds around the last block, leaving
    the bare attention -> FFN composition.  ``score_mode`` is ``"sum"`` for
    the summed cross-cosine score or ``"diagonal"`` for matching pairs only.
    """

    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    depth: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 2
    temperature: float = 10.0
    ln_eps: float = 1e-6
    final_attention: str = "class"
    final_residual: bool = True
    score_mode: str = "sum"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 2:
            raise ValueError("depth must be >= 2 (encoder blocks + final block)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.final_attention not in ("class", "full"):
            raise ValueError(f"unknown final_attention {self.final_attention!r}")
        if self.score_mode not in ("sum", "diagonal"):
            raise ValueError(f"unknown score_mode {self.score_mode!r}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def hidden_dim(self) -> int:
        return self.mlp_ratio * self.dim

    @classmethod
    def micro(cls, **overrides) -> "ModelConfig":
        """d=8, L=2, M=4 model used for gradient and oracle checks."""
        base = dict(image_size=8, channels=3, patch_size=4, depth=2, dim=8, heads=2, mlp_ratio=2)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def vit_small(cls, **overrides) -> "ModelConfig":
        base = dict(image_size=224, channels=3, patch_size=16, depth=12, dim=384, heads=6, mlp_ratio=4)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def parameter_count(config: ModelConfig) -> int:
    d, h, p, m = config.dim, config.hidden_dim, config.patch_dim, config.num_patches
    per_block = 2 * d + 4 * (d * d + d) + 2 * d + (d * h + h) + (h * d + d)
    return p * d + d + d + (m + 1) * d + config.depth * per_block


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self):
        for name in BLOCK_PARAM_NAMES:
            yield name, getattr(self, name)


@dataclass
class ModelParams:
    patch_w: Tensor
    patch_b: Tensor
    cls_token: Tensor
    pos_embed: Tensor
    blocks: list[BlockParams] = field(default_factory=list)

    def named_parameters(self):
        """All tensors in checkpoint order."""
        yield "patch_proj.weight", self.patch_w
        yield "patch_proj.bias", self.patch_b
        yield "cls_token", self.cls_token
        yield "pos_embed", self.pos_embed
        for i, blk in enumerate(self.blocks):
            for name, t in blk.named():
                yield f"blocks.{i}.{name}", t

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def copy(self) -> "ModelParams":
        def c(t: Tensor) -> Tensor:
            return Tensor(t.data.copy(), requires_grad=t.requires_grad)

        return ModelParams(
            c(self.patch_w),
            c(self.patch_b),
            c(self.cls_token),
            c(self.pos_embed),
            [BlockParams(**{n: c(t) for n, t in b.named()}) for b in self.blocks],
        )

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag
            t.grad = None


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples redrawn until they fall inside two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(config: ModelConfig, seed: int | np.random.Generator = 0) -> ModelParams:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d, h = config.dim, config.hidden_dim

    def w(*shape):
        return Tensor(trunc_normal(rng, shape))

    def zeros(*shape):
        return Tensor(np.zeros(shape))

    def ones(*shape):
        return Tensor(np.ones(shape))

    params = ModelParams(
        patch_w=w(config.patch_dim, d),
        patch_b=zeros(d),
        cls_token=w(d),
        pos_embed=Tensor(rng.normal(0.0, 0.02, (config.num_patches + 1, d))),
    )
    for _ in range(config.depth):
        params.blocks.append(
            BlockParams(
                ln1_g=ones(d), ln1_b=zeros(d),
                wq=w(d, d), bq=zeros(d),
                wk=w(d, d), bk=zeros(d),
                wv=w(d, d), bv=zeros(d),
                wo=w(d, d), bo=zeros(d),
                ln2_g=ones(d), ln2_b=zeros(d),
                w1=w(d, h), b1=zeros(h),
                w2=w(h, d), b2=zeros(d),
            )
        )
    return params


@dataclass
class TokenSequence:
    """One CLS vector and M patch vectors.

    Both fields may carry the same leading batch axes: ``cls`` is
    ``(..., d)`` and ``patches`` is ``(..., M, d)``.
    """

    cls: Tensor
    patches: Tensor

    def __post_init__(self):
        if self.patches.shape[:-2] != self.cls.shape[:-1] or self.patches.shape[-1] != self.cls.shape[-1]:
            raise T.ShapeError("TokenSequence", self.cls.shape, self.patches.shape)

    @property
    def num_patches(self) -> int:
        return self.patches.shape[-2]

    @property
    def dim(self) -> int:
        return self.cls.shape[-1]

    def tokens(self) -> Tensor:
        """``(..., M+1, d)`` with CLS in row 0."""
        cls = T.reshape(self.cls, self.cls.shape[:-1] + (1, self.dim))
        return T.concat([cls, self.patches], axis=-2)

    @classmethod
    def from_tokens(cls, tokens: Tensor) -> "TokenSequence":
        return cls(tokens[..., 0, :], tokens[..., 1:, :])

    def __getitem__(self, index) -> "TokenSequence":
        """Index the leading batch axes."""
        return TokenSequence(self.cls[index], self.patches[index])


# -- image <-> patches ------------------------------------------------------------
def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """``(..., C, H, W)`` -> ``(..., M, patch_size**2 * C)``.

    Patches are in row-major raster order; each row is channel-major.
    """
    image = np.asarray(image)
    *lead, c, h, w = image.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = image.reshape(*lead, c, gh, patch_size, gw, patch_size)
    n = len(lead)
    # (..., gh, gw, c, py, px)
    x = x.transpose(*range(n), n + 1, n + 3, n, n + 2, n + 4)
    return x.reshape(*lead, gh * gw, c * patch_size * patch_size)


def unpatchify(patches: np.ndarray, patch_size: int, channels: int, height: int, width: int) -> np.ndarray:
    patches = np.asarray(patches)
    *lead, _, _ = patches.shape
    gh, gw = height // patch_size, width // patch_size
    n = len(lead)
    x = patches.reshape(*lead, gh, gw, channels, patch_size, patch_size)
    x = x.transpose(*range(n), n + 2, n, n + 3, n + 1, n + 4)
    return x.reshape(*lead, channels, height, width)


# -- layers -------------------------------------------------------------------------
def embed(patches, params: ModelParams, config: ModelConfig) -> TokenSequence:
    """Project patch rows, prepend the CLS token, add positional rows."""
    patches = T.as_tensor(patches)
    if patches.shape[-1] != params.patch_w.shape[0]:
        raise T.ShapeError("embed", patches.shape, params.patch_w.shape)
    x = patches @ params.patch_w + params.patch_b
    lead = x.shape[:-2]
    cls = T.broadcast_to(params.cls_token, lead + (config.dim,)) + params.pos_embed[0]
    return TokenSequence(cls, x + params.pos_embed[1:])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    x = T.reshape(x, tuple(lead) + (t, heads, d // heads))
    return T.swapaxes(x, -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dh = x.shape
    x = T.swapaxes(x, -2, -3)
    return T.reshape(x, tuple(lead) + (t, h * dh))


def attention(q_in: Tensor, kv_in: Tensor, blk: BlockParams, heads: int) -> Tensor:
    """Multi-head attention of ``q_in`` rows over ``kv_in`` rows, output-projected."""
    d = kv_in.shape[-1]
    q = _split_heads(q_in @ blk.wq + blk.bq, heads)
    k = _split_heads(kv_in @ blk.wk + blk.bk, heads)
    v = _split_heads(kv_in @ blk.wv + blk.bv, heads)
    scale = 1.0 / np.sqrt(d // heads)
    weights = T.softmax((q @ T.transpose(k)) * scale, axis=-1)
    return _merge_heads(weights @ v) @ blk.wo + blk.bo


def ffn(x: Tensor, blk: BlockParams) -> Tensor:
    return T.gelu(x @ blk.w1 + blk.b1) @ blk.w2 + blk.b2


def encoder_block(tokens: Tensor, blk: BlockParams, heads: int, eps: float = 1e-6) -> Tensor:
    """Pre-norm transformer block on ``(..., T, d)`` tokens."""
    h = T.layer_norm(tokens, blk.ln1_g, blk.ln1_b, eps)
    x = tokens + attention(h, h, blk, heads)
    return x + ffn(T.layer_norm(x, blk.ln2_g, blk.ln2_b, eps), blk)


def encode_stage1(images, params: ModelParams, config: ModelConfig) -> TokenSequence:
    """Patchify, embed and run blocks ``0 .. depth-2``; images are ``(..., C, H, W)``."""
    images = np.asarray(images, dtype=np.float64)
    expect = (config.channels, config.image_size, config.image_size)
    if images.shape[-3:] != expect:
        raise T.ShapeError("encode_stage1", images.shape, expect)
    seq = embed(patchify(images, config.patch_size), params, config)
    x = seq.tokens()
    for blk in params.blocks[:-1]:
        x = encoder_block(x, blk, config.heads, config.ln_eps)
    return TokenSequence.from_tokens(x)


# -- checkpoints ---------------------------------------------------------------------
class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


def save_checkpoint(path, params: ModelParams, config: ModelConfig, provenance: dict | None = None) -> None:
    """Write ``IMAC`` | version u32 | json length u32 | json | f64 LE tensors in ``named_parameters`` order."""
    meta = {"model_config": config.to_dict()}
    if provenance is not None:
        meta["provenance"] = provenance
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, t in params.named_parameters():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise CheckpointError("truncated header", len(raw))
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}", 0)
    version, n = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    if len(raw) < 12 + n:
        raise CheckpointError("truncated config blob", len(raw))
    try:
        meta = json.loads(raw[12 : 12 + n].decode("utf-8"))
        config = ModelConfig.from_dict(meta["model_config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"invalid config blob: {exc}", 12) from None
    params = init_params(config, 0)
    offset = 12 + n
    expected = offset + 8 * parameter_count(config)
    if len(raw) != expected:
        raise CheckpointError(f"length {len(raw)} != expected {expected}", min(len(raw), expected))
    for _, t in params.named_parameters():
        size = t.data.size
        t.data = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).astype(np.float64).reshape(t.shape)
        offset += 8 * size
    return params, config, meta.get("provenance", {})
