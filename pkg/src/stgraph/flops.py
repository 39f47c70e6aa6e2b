"""Closed-form multiply-accumulate counts for one clip forward pass.

Counts cover projections, message passing, gating, and readout; cheap
elementwise work (softmax, ReLU, layer norm) is excluded.  Every keyframe
is treated as interior, so the temporal key/value set always holds
(tau_c - 1) * n_fg rows and the total is exactly linear in the number of
keyframes and independent of the temporal stride.
"""

from .errors import ConfigError
from .passing import FN_GAT, FN_NONLOCAL, TASK_ACTION, ModelConfig


def _attention_macs(fn: str, n_queries: int, n_kv: int, d: int) -> int:
    if fn == FN_NONLOCAL:
        project = n_queries * d * d + 2 * n_kv * d * d
        mix = 2 * n_queries * n_kv * d
        return project + mix
    # scoring reads the 2d concatenation per neighbor, aggregation sums
    # d-vectors, and the output transform is one d x d matmul per node
    score = n_kv * 2 * d
    aggregate = n_kv * d
    transform = d * d
    return n_queries * (score + aggregate) + n_queries * transform


def estimate_flops(config: ModelConfig, n_fg: int, n_context: int, keyframes: int) -> dict:
    """Multiply-accumulate counts, itemized and totaled.

    n_fg and n_context are per-keyframe node counts; the estimate assumes
    they are uniform across the clip.
    """
    config.validate()
    if n_fg < 1:
        raise ConfigError(f"n_fg must be at least 1, got {n_fg}")
    if n_context < 0:
        raise ConfigError(f"n_context must be nonnegative, got {n_context}")
    if keyframes < 1:
        raise ConfigError(f"keyframes must be at least 1, got {keyframes}")
    d = config.state_dim
    c = config.feature_channels

    input_projection = keyframes * (n_fg + n_context) * c * d

    spatial_kv = n_fg + n_context
    temporal_kv = (config.tau_c - 1) * n_fg
    spatial = 0
    temporal = 0
    gating = 0
    num_messages = config.num_messages
    for _ in range(config.iterations):
        for fn in config.message_fns:
            for _ in range(config.heads):
                spatial += keyframes * _attention_macs(fn, n_fg, spatial_kv, d)
                if config.tau_c > 1:
                    temporal += keyframes * _attention_macs(fn, n_fg, temporal_kv, d)
        if num_messages > 1:
            per_node = num_messages * 2 * d + num_messages * d
            phases = 2 if config.tau_c > 1 else 1
            gating += phases * keyframes * n_fg * per_node

    if config.task == TASK_ACTION:
        readout = keyframes * n_fg * d * config.action_classes
    else:
        pairs = n_fg * (n_fg - 1) // 2
        readout = keyframes * (n_fg * d * config.object_classes
                               + pairs * 2 * d * config.relation_classes)

    components = {
        "input_projection": input_projection,
        "spatial_messages": spatial,
        "temporal_messages": temporal,
        "gating": gating,
        "readout": readout,
    }
    components["total"] = sum(components.values())
    return components
