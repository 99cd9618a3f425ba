"""Intra-task mutual attention between class prototypes and queries.

After the shared encoder, each class prototype and each query exchange their
patch tokens.  The last transformer block then lets every CLS token attend
over the *other* image's patches:

* ``P'_i = [CLS of prototype i | query patches]``
* ``Q'_i = [CLS of query | patches of prototype i]``

The enhanced CLS outputs are compared by cosine similarity and summed over
the class-conditioned query variants to give one score per class.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .vit import BlockParams, ModelConfig, ModelParams, TokenSequence, attention, encode_stage1, encoder_block, ffn

VARIANTS = ("imaformer", "vanilla")


@dataclass
class ClassPrototype:
    class_id: int
    tokens: TokenSequence


@dataclass
class EpisodeScores:
    """Scores ``(B, N)`` plus the enhanced CLS vectors behind them.

    ``query_cls[b, i]`` is the query's CLS after attending to prototype ``i``'s
    patches; ``proto_cls[b, j]`` is prototype ``j``'s CLS after attending to
    query ``b``'s patches.
    """

    scores: Tensor
    query_cls: Tensor
    proto_cls: Tensor


def prototype_tokens(support: Sequence[TokenSequence] | TokenSequence) -> TokenSequence:
    """Elementwise mean over K support sequences (a list, or a batch with K leading)."""
    if isinstance(support, TokenSequence):
        if support.cls.ndim < 2:
            raise ValueError("prototype_tokens: batched input needs a leading K axis")
        cls, patches = support.cls, support.patches
    else:
        support = list(support)
        if not support:
            raise ValueError("prototype_tokens: need at least one support sequence (K=0)")
        shapes = {(s.cls.shape, s.patches.shape) for s in support}
        if len(shapes) != 1:
            raise T.ShapeError("prototype_tokens", *(s.patches.shape for s in support))
        cls = T.stack([s.cls for s in support])
        patches = T.stack([s.patches for s in support])
    if cls.shape[0] == 0:
        raise ValueError("prototype_tokens: need at least one support sequence (K=0)")
    return TokenSequence(cls.mean(axis=0), patches.mean(axis=0))


def class_prototypes(support: TokenSequence, labels, n_way: int) -> TokenSequence:
    """Average a batch of support sequences per episode-local label; result has leading N."""
    labels = np.asarray(labels)
    protos = []
    for c in range(n_way):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            raise ValueError(f"class_prototypes: class {c} has no support samples")
        protos.append(prototype_tokens(support[idx]))
    return TokenSequence(T.stack([p.cls for p in protos]), T.stack([p.patches for p in protos]))


def swap_tokens(proto: TokenSequence, query: TokenSequence) -> tuple[TokenSequence, TokenSequence]:
    """Return ``P' = [proto CLS | query patches]`` and ``Q' = [query CLS | proto patches]``."""
    if proto.cls.shape != query.cls.shape or proto.patches.shape != query.patches.shape:
        raise T.ShapeError("swap_tokens", proto.patches.shape, query.patches.shape)
    return TokenSequence(proto.cls, query.patches), TokenSequence(query.cls, proto.patches)


def pair_grid(protos: TokenSequence, queries: TokenSequence) -> tuple[TokenSequence, TokenSequence]:
    """Broadcast N prototypes and B queries to aligned ``(B, N)`` grids."""
    b, n = queries.cls.shape[0], protos.cls.shape[0]
    m, d = protos.patches.shape[-2:]
    p = TokenSequence(
        T.broadcast_to(T.reshape(protos.cls, (1, n, d)), (b, n, d)),
        T.broadcast_to(T.reshape(protos.patches, (1, n, m, d)), (b, n, m, d)),
    )
    q = TokenSequence(
        T.broadcast_to(T.reshape(queries.cls, (b, 1, d)), (b, n, d)),
        T.broadcast_to(T.reshape(queries.patches, (b, 1, m, d)), (b, n, m, d)),
    )
    return p, q


def final_class_attention(seq: TokenSequence, blk: BlockParams, config: ModelConfig) -> Tensor:
    """Run the last block with the CLS token as the only attention query.

    Keys and values are the whole ``[cls | patches]`` sequence.  Returns the
    updated CLS vector(s), shape ``seq.cls.shape``.
    """
    tokens = seq.tokens()
    eps = config.ln_eps
    if not config.final_residual:
        return ffn(attention(tokens[..., :1, :], tokens, blk, config.heads), blk)[..., 0, :]
    if config.final_attention == "full":
        return encoder_block(tokens, blk, config.heads, eps)[..., 0, :]
    h = T.layer_norm(tokens, blk.ln1_g, blk.ln1_b, eps)
    # CLS kept as a (..., 1, d) row so unbatched sequences still go through 2-D matmuls
    x = tokens[..., :1, :] + attention(h[..., :1, :], h, blk, config.heads)
    return (x + ffn(T.layer_norm(x, blk.ln2_g, blk.ln2_b, eps), blk))[..., 0, :]


def class_attention_weights(seq: TokenSequence, blk: BlockParams, config: ModelConfig) -> np.ndarray:
    """Per-head attention weights of the CLS query over ``[cls | patches]``, shape ``(..., heads, M+1)``."""
    tokens = seq.tokens()
    if config.final_residual:
        tokens = T.layer_norm(tokens, blk.ln1_g, blk.ln1_b, config.ln_eps)
    d, h = config.dim, config.heads
    q = (tokens.data[..., :1, :] @ blk.wq.data + blk.bq.data)
    k = (tokens.data @ blk.wk.data + blk.bk.data)
    lead = q.shape[:-2]
    q = q.reshape(lead + (1, h, d // h)).swapaxes(-2, -3)
    k = k.reshape(lead + (-1, h, d // h)).swapaxes(-2, -3)
    logits = (q @ k.swapaxes(-1, -2))[..., 0, :] / np.sqrt(d // h)
    return T.softmax(T.Tensor(logits), axis=-1).data


def episode_scores(
    protos: TokenSequence, queries: TokenSequence, blk: BlockParams, config: ModelConfig
) -> EpisodeScores:
    """Mutual-attention scores of B queries against N prototypes.

    ``protos`` has leading axis N; ``queries`` leading axis B (or none, for a
    single query, in which case the batch axis is dropped from the result).
    With ``score_mode="sum"``, ``score[b, j] = sum_i cos(CLS_q[b, i], CLS_p[b, j])``.
    """
    single = queries.cls.ndim == 1
    if single:
        queries = TokenSequence(T.reshape(queries.cls, (1,) + queries.cls.shape),
                                T.reshape(queries.patches, (1,) + queries.patches.shape))
    if protos.cls.shape[0] < 2:
        raise ValueError("episode_scores: need at least two classes")
    p_grid, q_grid = pair_grid(protos, queries)
    p_swapped, q_swapped = swap_tokens(p_grid, q_grid)
    # P' and Q' go through identically shaped calls so that equal inputs give equal bits.
    cls_p = final_class_attention(p_swapped, blk, config)
    cls_q = final_class_attention(q_swapped, blk, config)
    if config.score_mode == "diagonal":
        scores = T.cosine_similarity(cls_q, cls_p)
    else:
        b, n, d = cls_q.shape
        pairs = T.cosine_similarity(T.reshape(cls_q, (b, n, 1, d)), T.reshape(cls_p, (b, 1, n, d)))
        scores = pairs.sum(axis=1)
    if single:
        return EpisodeScores(scores[0], cls_q[0], cls_p[0])
    return EpisodeScores(scores, cls_q, cls_p)


def final_cls(seq: TokenSequence, params: ModelParams, config: ModelConfig) -> Tensor:
    """CLS output of the ordinary last block on an unswapped sequence."""
    return final_class_attention(seq, params.blocks[-1], config)


def vanilla_scores(proto_cls: Tensor, query_cls: Tensor) -> Tensor:
    """Plain cosine between query CLS ``(B, d)`` and prototype CLS ``(N, d)``; returns ``(B, N)``, or ``(N,)`` for one query."""
    if query_cls.ndim == 1:
        return T.cosine_similarity(T.reshape(query_cls, (1, -1)), proto_cls)
    b, d = query_cls.shape
    return T.cosine_similarity(T.reshape(query_cls, (b, 1, d)), T.reshape(proto_cls, (1,) + proto_cls.shape))


def classify(scores: Tensor, temperature: float) -> Tensor:
    if temperature <= 0:
        raise ValueError("classify: temperature must be positive")
    return T.softmax(T.as_tensor(scores) * float(temperature), axis=-1)


def predict(scores) -> np.ndarray:
    """Argmax over classes; ties resolve to the lowest index."""
    data = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    return np.argmax(data, axis=-1)


@dataclass
class EpisodeOutput:
    scores: Tensor
    query_cls: Tensor | None = None
    proto_cls: Tensor | None = None
    vanilla_query_cls: Tensor | None = None


def episode_forward(
    params: ModelParams,
    config: ModelConfig,
    support_images: np.ndarray,
    support_labels,
    query_images: np.ndarray,
    n_way: int,
    variant: str = "imaformer",
) -> EpisodeOutput:
    """Scores ``(B, N)`` for every query of an episode under ``variant``."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    support = encode_stage1(support_images, params, config)
    queries = encode_stage1(query_images, params, config)
    if variant == "imaformer":
        protos = class_prototypes(support, support_labels, n_way)
        out = episode_scores(protos, queries, params.blocks[-1], config)
        return EpisodeOutput(out.scores, out.query_cls, out.proto_cls)
    support_cls = final_cls(support, params, config)
    query_cls = final_cls(queries, params, config)
    labels = np.asarray(support_labels)
    proto_cls = T.stack([support_cls[np.flatnonzero(labels == c)].mean(axis=0) for c in range(n_way)])
    return EpisodeOutput(vanilla_scores(proto_cls, query_cls), vanilla_query_cls=query_cls)
