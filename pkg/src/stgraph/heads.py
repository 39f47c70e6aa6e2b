"""Readout heads and losses on final foreground states.

Action detection: per-node multi-label logits with a mean binary cross
entropy over classes.  Scene graphs: a softmax class head per node plus
a relation head over ordered node pairs (i, j) with i > j, scored from
the concatenated pair states.
"""

from dataclasses import dataclass

from . import numgrad as ng
from .errors import ValidationError
from .numgrad import Tensor


def action_readout(states: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Linear logits per state row: states @ weight + bias."""
    logits = ng.matmul(states, weight)
    if logits.ndim == 1:
        return ng.add(logits, bias)
    return ng.add_rowvec(logits, bias)


def action_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean sigmoid cross entropy over every logit.

    Accepts one node (C,) or a batch (n, C); the gradient with respect to
    the logits is exactly (sigmoid(x) - y) / count.
    """
    return ng.bce_with_logits_mean(logits, labels)


def pair_index(n: int) -> list[tuple[int, int]]:
    """Ordered pairs (i, j) with i > j: (1,0), (2,0), (2,1), ..."""
    return [(i, j) for i in range(1, n) for j in range(i)]


@dataclass
class SceneGraphPrediction:
    """Logits for one keyframe: per-node classes and per-pair relations."""

    object_logits: Tensor            # (n, object_classes)
    pairs: list[tuple[int, int]]     # row order of relation_logits
    relation_logits: Tensor | None   # (len(pairs), relation_classes); None if n == 1


def sg_readout(states: Tensor, object_weight: Tensor, object_bias: Tensor,
               relation_weight: Tensor, relation_bias: Tensor) -> SceneGraphPrediction:
    """Object and relation logits for all foreground nodes of a keyframe.

    The relation input for pair (i, j) is the concatenation of the two
    final states, put through a single linear layer.
    """
    if states.ndim != 2 or states.shape[0] < 1:
        raise ValidationError(f"sg_readout expects at least one state row, got {states.shape}")
    object_logits = ng.add_rowvec(ng.matmul(states, object_weight), object_bias)
    pairs = pair_index(states.shape[0])
    if not pairs:
        return SceneGraphPrediction(object_logits, pairs, None)
    heads_i = ng.gather_rows(states, [i for i, _ in pairs])
    heads_j = ng.gather_rows(states, [j for _, j in pairs])
    pair_states = ng.concat_cols([heads_i, heads_j])
    relation_logits = ng.add_rowvec(ng.matmul(pair_states, relation_weight), relation_bias)
    return SceneGraphPrediction(object_logits, pairs, relation_logits)


def sg_loss(object_logits: Tensor, relation_logits: Tensor | None,
            object_onehot: Tensor, relation_targets: Tensor | None,
            lam: float = 0.5) -> Tensor:
    """Weighted scene-graph loss: lam * object loss + relation loss.

    The object term is softmax cross entropy averaged over nodes; the
    relation term is sigmoid cross entropy averaged over all pair/relation
    slots.  With a single node there are no pairs and the relation term
    vanishes.
    """
    ng.check_one_hot(object_onehot.data)
    if object_logits.shape != object_onehot.shape:
        raise ValidationError(
            f"object logits {object_logits.shape} and targets {object_onehot.shape} differ")
    obj = ng.softmax_xent_mean(object_logits, object_onehot)
    if relation_logits is None:
        return ng.scale(obj, lam)
    if relation_targets is None or relation_logits.shape != relation_targets.shape:
        raise ValidationError("relation logits and targets must have matching shapes")
    rel = ng.bce_with_logits_mean(relation_logits, relation_targets)
    return ng.add(ng.scale(obj, lam), rel)
