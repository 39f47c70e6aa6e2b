"""Evaluation: box overlap, label assignment, frame AP, and triplet recall.

Frame AP follows the standard detection protocol: per class, detections
are sorted by descending score (input order breaks ties), matched
greedily to unmatched ground truth of the same keyframe at IoU >= 0.5,
and the precision/recall curve is integrated with all-point
interpolation.  The mean runs over classes with at least one ground
truth box.

Triplet recall ranks all (subject, object, predicate) candidates of a
keyframe by the product of their three probabilities and reports the
fraction of ground-truth triplets found in the top K.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ValidationError
from .graph import Box
from .heads import SceneGraphPrediction
from .numgrad import sigmoid_values

MODE_SGCLS = "sgcls"
MODE_PREDCLS = "predcls"


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when they do not overlap."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area() + b.area() - inter)


def assign_labels(pred_boxes, gt_boxes, gt_labels: np.ndarray, threshold: float = 0.75) -> np.ndarray:
    """Transfer labels from the best-overlapping ground truth box.

    A predicted box takes the label vector of the ground truth it overlaps
    most, provided that IoU reaches the threshold; otherwise it becomes an
    all-negative sample.  Returns an array of shape (n_pred, C).
    """
    gt_labels = np.asarray(gt_labels, dtype=np.float64)
    if gt_labels.ndim != 2:
        raise ValidationError(f"ground truth labels must be (n, C), got shape {gt_labels.shape}")
    if len(gt_boxes) != gt_labels.shape[0]:
        raise ValidationError(
            f"{len(gt_boxes)} ground truth boxes but {gt_labels.shape[0]} label rows")
    out = np.zeros((len(pred_boxes), gt_labels.shape[1]))
    for p, box in enumerate(pred_boxes):
        best, best_iou = -1, 0.0
        for g, gt in enumerate(gt_boxes):
            ov = iou(box, gt)
            if ov > best_iou:
                best, best_iou = g, ov
        if best >= 0 and best_iou >= threshold:
            out[p] = gt_labels[best]
    return out


def detection_training_samples(pred_boxes, gt_boxes, gt_labels, threshold: float = 0.75):
    """Training boxes for one keyframe: ground truth plus labeled detections.

    Ground truth boxes keep their own labels and are always included;
    detected boxes get labels via assign_labels.
    """
    gt_labels = np.asarray(gt_labels, dtype=np.float64)
    assigned = assign_labels(pred_boxes, gt_boxes, gt_labels, threshold)
    boxes = list(gt_boxes) + list(pred_boxes)
    labels = np.concatenate([gt_labels, assigned], axis=0) if len(pred_boxes) else gt_labels
    return boxes, labels


@dataclass(frozen=True)
class Detection:
    clip_id: str
    keyframe_id: int
    box: Box
    class_id: int
    score: float


@dataclass(frozen=True)
class GroundTruthBox:
    clip_id: str
    keyframe_id: int
    box: Box
    class_id: int


def _average_precision(tp_flags: list[bool], num_gt: int) -> float:
    """All-point interpolated AP from ordered true-positive flags."""
    if num_gt == 0:
        return 0.0
    tp = np.cumsum([1.0 if f else 0.0 for f in tp_flags])
    fp = np.cumsum([0.0 if f else 1.0 for f in tp_flags])
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    ap = 0.0
    for i in range(1, len(mrec)):
        if mrec[i] != mrec[i - 1]:
            ap += (mrec[i] - mrec[i - 1]) * mpre[i]
    return float(ap)


def frame_ap(detections: list[Detection], ground_truth: list[GroundTruthBox],
             iou_threshold: float = 0.5) -> tuple[dict[int, float], float]:
    """Per-class average precision and its mean over annotated classes.

    Classes without any ground truth are excluded from the mean; an empty
    ground truth list leaves the metric undefined and raises.
    """
    if not ground_truth:
        raise ValidationError("frame AP is undefined without ground truth boxes")
    classes = sorted({g.class_id for g in ground_truth})
    per_class: dict[int, float] = {}
    for cls in classes:
        gts = [g for g in ground_truth if g.class_id == cls]
        num_gt = len(gts)
        by_frame: dict[tuple, list] = {}
        for g in gts:
            by_frame.setdefault((g.clip_id, g.keyframe_id), []).append([g.box, False])
        dets = sorted((d for d in detections if d.class_id == cls),
                      key=lambda d: -d.score)
        flags: list[bool] = []
        for d in dets:
            slots = by_frame.get((d.clip_id, d.keyframe_id), [])
            best, best_iou = -1, 0.0
            for s, (box, _) in enumerate(slots):
                ov = iou(d.box, box)
                if ov > best_iou:
                    best, best_iou = s, ov
            if best >= 0 and best_iou >= iou_threshold and not slots[best][1]:
                slots[best][1] = True
                flags.append(True)
            else:
                flags.append(False)
        per_class[cls] = _average_precision(flags, num_gt)
    mean = float(np.mean([per_class[c] for c in classes]))
    return per_class, mean


@dataclass(frozen=True)
class Triplet:
    """One subject-predicate-object statement about a keyframe."""

    subject_index: int
    object_index: int
    subject_class: int
    object_class: int
    predicate_class: int


def triplet_score(subject_prob: float, predicate_prob: float, object_prob: float) -> float:
    """Confidence of a candidate triplet: the product of its three parts."""
    return subject_prob * predicate_prob * object_prob


def recall_at_k(prediction: SceneGraphPrediction, gt_triplets: list[Triplet], k: int,
                mode: str, gt_object_classes=None) -> float:
    """Fraction of ground-truth triplets recovered in the top-k candidates.

    sgcls scores subjects and objects with their own predicted class and
    probability; predcls pins both to the ground-truth classes with
    probability one, ranking by predicate confidence alone.  A keyframe
    without ground truth counts as fully recalled.
    """
    if k < 1:
        raise ConfigError(f"recall cutoff k must be positive, got {k}")
    if mode not in (MODE_SGCLS, MODE_PREDCLS):
        raise ConfigError(f"unknown recall mode {mode!r}")
    if not gt_triplets:
        return 1.0
    n = prediction.object_logits.shape[0]
    if mode == MODE_PREDCLS:
        if gt_object_classes is None or len(gt_object_classes) != n:
            raise ValidationError("predcls mode needs one ground-truth class per node")
        node_class = [int(c) for c in gt_object_classes]
        node_prob = [1.0] * n
    else:
        logits = prediction.object_logits.data
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        node_class = [int(np.argmax(probs[i])) for i in range(n)]
        node_prob = [float(probs[i, node_class[i]]) for i in range(n)]

    candidates = []  # (score, subject, object, subj_class, obj_class, predicate)
    if prediction.relation_logits is not None:
        rel_probs = sigmoid_values(prediction.relation_logits.data)
        for row, (i, j) in enumerate(prediction.pairs):
            for r in range(rel_probs.shape[1]):
                score = triplet_score(node_prob[i], float(rel_probs[row, r]), node_prob[j])
                candidates.append((score, i, j, node_class[i], node_class[j], r))
    candidates.sort(key=lambda c: -c[0])  # stable: enumeration order breaks ties
    top = {(c[1], c[2], c[3], c[4], c[5]) for c in candidates[:k]}
    hits = sum(
        1 for t in gt_triplets
        if (t.subject_index, t.object_index, t.subject_class, t.object_class, t.predicate_class) in top
    )
    return hits / len(gt_triplets)
