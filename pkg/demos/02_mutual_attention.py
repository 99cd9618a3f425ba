"""Scoring one query against class prototypes, with and without the patch swap.

Support and query images go through the first L-1 blocks. Each prototype then
trades patch tokens with the query, and the last block runs class attention
on both mixed sequences.
"""

import numpy as np

from imaformer import ModelConfig, encode_stage1, init_params
from imaformer.mutual_attention import (
    class_attention_weights, class_prototypes, classify, episode_scores, swap_tokens, vanilla_scores,
    final_cls,
)

config = ModelConfig.micro()
params = init_params(config, seed=0)
rng = np.random.default_rng(1)

support = rng.random((3, config.channels, config.image_size, config.image_size))
labels = np.arange(3)
query = support[1:2] + 0.05 * rng.standard_normal(support[1:2].shape)

s_tokens = encode_stage1(support, params, config)
q_tokens = encode_stage1(query, params, config)
print("stage-1 tokens:", s_tokens.cls.shape, s_tokens.patches.shape)

protos = class_prototypes(s_tokens, labels, 3)
p_mixed, q_mixed = swap_tokens(protos[0], q_tokens[0])
weights = class_attention_weights(q_mixed, params.blocks[-1], config)
print("CLS attention of the query over prototype 0 patches, per head:\n", weights.round(3))

out = episode_scores(protos, q_tokens, params.blocks[-1], config)
print("mutual-attention scores  ", out.scores.data.round(4), "(each in [-3, 3])")
print("class probabilities      ", classify(out.scores, config.temperature).data.round(3))

proto_cls = final_cls(s_tokens, params, config)
query_cls = final_cls(q_tokens, params, config)
print("vanilla cosine scores    ", vanilla_scores(proto_cls, query_cls).data.round(4))
