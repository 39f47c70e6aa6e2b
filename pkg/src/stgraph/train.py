"""Learning-rate schedule, SGD with momentum, training loop, evaluation, checkpoints."""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import numgrad as ng
from .data import ClipFeatures, one_hot, relation_target_matrix
from .errors import ConfigError, NumericError, ValidationError
from .graph import Box, FeatureGrid, build_graph, featurize_keyframe
from .heads import action_loss, action_readout, sg_loss, sg_readout
from .metrics import Detection, GroundTruthBox, Triplet, frame_ap, recall_at_k
from .numgrad import Tape, Tensor, grad, sigmoid_values
from .passing import ModelConfig, param_shapes, run_inference

CHECKPOINT_FORMAT = "stgraph-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Schedule:
    """Linear warmup followed by step decays, addressed by fractional epoch."""

    base_lr: float = 0.1
    warmup_start_lr: float = 1.25e-4
    warmup_epochs: float = 5.0
    decay_epochs: tuple[float, ...] = (10.0, 15.0)
    decay_factor: float = 10.0
    total_epochs: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(self.decay_epochs))

    def validate(self) -> None:
        if self.base_lr <= 0 or self.warmup_start_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.warmup_epochs < 0 or self.total_epochs <= 0:
            raise ConfigError("epoch counts must be positive")
        if self.decay_factor <= 1:
            raise ConfigError("decay_factor must exceed 1")
        if list(self.decay_epochs) != sorted(self.decay_epochs):
            raise ConfigError("decay_epochs must be sorted")
        if self.decay_epochs and self.decay_epochs[0] < self.warmup_epochs:
            raise ConfigError("decays must not start before warmup ends")

    def scaled(self, total_epochs: float) -> "Schedule":
        """Stretch or shrink every breakpoint proportionally to a new length."""
        if total_epochs <= 0:
            raise ConfigError("total_epochs must be positive")
        r = total_epochs / self.total_epochs
        return replace(
            self,
            warmup_epochs=self.warmup_epochs * r,
            decay_epochs=tuple(d * r for d in self.decay_epochs),
            total_epochs=total_epochs,
        )


def lr_at(epoch: float, schedule: Schedule) -> float:
    """Learning rate at a fractional epoch position."""
    if epoch < 0:
        raise ConfigError(f"epoch must be nonnegative, got {epoch}")
    if epoch < schedule.warmup_epochs:
        frac = epoch / schedule.warmup_epochs
        return schedule.warmup_start_lr + (schedule.base_lr - schedule.warmup_start_lr) * frac
    drops = sum(1 for d in schedule.decay_epochs if epoch >= d)
    return schedule.base_lr / schedule.decay_factor ** drops


@dataclass
class SgdState:
    """Momentum buffers plus a step counter for error reporting."""

    momentum: float = 0.9
    weight_decay: float = 1e-7
    step: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: dict[str, Tensor], grads: dict[str, Tensor], lr: float,
             state: SgdState) -> None:
    """One in-place SGD update: v <- m*v + (g + wd*p); p <- p - lr*v."""
    for name, p in params.items():
        g = grads[name].data
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r} at step {state.step}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + (g + state.weight_decay * p.data)
        state.velocity[name] = v
        params[name] = Tensor(p.data - lr * v, requires_grad=True, name=name)
    state.step += 1


def init_params(config: ModelConfig, seed: int | None = None) -> dict[str, Tensor]:
    """Glorot-uniform weights, unit norm scales, zero shifts and biases.

    Draws happen in the deterministic order of param_shapes, so a seed pins
    every value.  Score and gate vectors treat their length as fan-in.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("norm.scale"):
            data = np.ones(shape)
        elif name.endswith("norm.shift") or name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            if len(shape) == 2:
                fan_in, fan_out = shape
            else:
                fan_in, fan_out = shape[0], 1
            a = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-a, a, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def clip_loss(clip: ClipFeatures, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Scalar task loss for one clip.

    Action: one binary cross entropy over the logits of every node in the
    clip.  Scene graph: mean over keyframes of the combined object/relation
    loss.
    """
    graph = build_graph(clip.frames, params, config)
    result = run_inference(graph, params, config)
    positions = sorted(result.fg_states)
    if config.task == "action":
        logits = [action_readout(result.fg_states[pos],
                                 params["readout.action.weight"],
                                 params["readout.action.bias"]) for pos in positions]
        logit_rows = logits[0] if len(logits) == 1 else ng.concat_rows(logits)
        labels = np.concatenate([np.asarray(clip.action_labels[pos]) for pos in positions])
        return action_loss(logit_rows, Tensor(labels))
    per_frame = []
    for pos in positions:
        pred = sg_readout(result.fg_states[pos],
                          params["readout.object.weight"], params["readout.object.bias"],
                          params["readout.relation.weight"], params["readout.relation.bias"])
        onehot = one_hot(clip.object_classes[pos], config.object_classes)
        rel_targets = None
        if pred.relation_logits is not None:
            rel_targets = relation_target_matrix(
                pred.pairs, clip.relations[pos], config.relation_classes)
        per_frame.append(sg_loss(pred.object_logits, pred.relation_logits,
                                 Tensor(onehot),
                                 Tensor(rel_targets) if rel_targets is not None else None))
    total = per_frame[0]
    for term in per_frame[1:]:
        total = ng.add(total, term)
    return ng.scale(total, 1.0 / len(per_frame))


def effective_batch_size(batch_size: int, tau_c: int) -> int:
    """Shrink the clip batch as the temporal window grows, never below one."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    if tau_c > 1:
        return max(1, batch_size // tau_c)
    return batch_size


def merge_warm_start(params: dict[str, Tensor], donor: dict[str, Tensor]) -> dict[str, Tensor]:
    """Overlay donor tensors onto a fresh layout by name.

    Names absent from the layout are ignored; names present in both must
    agree on shape.  Returns a new dict, leaving both inputs untouched.
    """
    merged = dict(params)
    for name, tensor in donor.items():
        if name not in merged:
            continue
        if tensor.shape != merged[name].shape:
            raise ValidationError(
                f"warm start shape mismatch for {name!r}: "
                f"{tensor.shape} vs {merged[name].shape}")
        merged[name] = Tensor(tensor.data, requires_grad=True, name=name)
    return merged


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    log: list[dict]


def train_loop(clips: list[ClipFeatures], config: ModelConfig, schedule: Schedule,
               seed: int | None = None, batch_size: int = 8,
               init_from: dict[str, Tensor] | None = None) -> TrainResult:
    """Full SGD run over the clips; deterministic for a fixed seed.

    init_from warm-starts any parameter whose name and shape match the
    current layout; everything else keeps its fresh initialization, so a
    model with temporal phases can resume from a spatial-only run.
    """
    if not clips:
        raise ValidationError("no clips to train on")
    config.validate()
    schedule.validate()
    seed = config.seed if seed is None else seed
    params = init_params(config, seed)
    if init_from is not None:
        params = merge_warm_start(params, init_from)
    state = SgdState()
    batch = effective_batch_size(batch_size, config.tau_c)
    num_batches = math.ceil(len(clips) / batch)
    total_epochs = int(math.ceil(schedule.total_epochs))
    shuffle_rng = np.random.default_rng([seed, 9173])
    log: list[dict] = []
    for epoch in range(total_epochs):
        order = shuffle_rng.permutation(len(clips))
        epoch_loss = 0.0
        for b in range(num_batches):
            chunk = order[b * batch:(b + 1) * batch]
            lr = lr_at(epoch + b / num_batches, schedule)
            with Tape() as tape:
                losses = [clip_loss(clips[i], params, config) for i in chunk]
                total = losses[0]
                for term in losses[1:]:
                    total = ng.add(total, term)
            grads = grad(tape, total, params)
            sgd_step(params, grads, lr, state)
            epoch_loss += total.item()
        log.append({"epoch": epoch, "lr": lr_at(float(epoch), schedule),
                    "loss": epoch_loss / len(clips)})
    return TrainResult(params=params, log=log)


# ---------------------------------------------------------------------------
# evaluation


def _clip_action_outputs(clip: ClipFeatures, params, config):
    graph = build_graph(clip.frames, params, config)
    result = run_inference(graph, params, config)
    detections = []
    for pos in sorted(result.fg_states):
        logits = action_readout(result.fg_states[pos],
                                params["readout.action.weight"],
                                params["readout.action.bias"])
        probs = sigmoid_values(logits.data)
        frame = clip.frames[pos]
        for row, box in enumerate(frame.fg_boxes):
            for cls in range(config.action_classes):
                detections.append(Detection(
                    clip_id=clip.clip_id, keyframe_id=frame.keyframe_id,
                    box=box, class_id=cls, score=float(probs[row, cls])))
    return detections


def evaluate_action(clips: list[ClipFeatures], params: dict[str, Tensor], config: ModelConfig,
                    iou_threshold: float = 0.5, workers: int = 1):
    """Frame mean average precision over every keyframe of every clip.

    Returns (per-class AP dict, mAP).  workers > 1 scores clips in a thread
    pool; the reduction order is fixed, so results do not depend on it.
    """
    if not clips:
        raise ValidationError("no clips to evaluate")
    ground_truth = []
    for clip in clips:
        for pos, kid in enumerate(clip.keyframe_ids):
            labels = clip.gt_action_labels[pos]
            for row, box in enumerate(clip.gt_boxes[pos]):
                for cls in np.flatnonzero(labels[row]):
                    ground_truth.append(GroundTruthBox(
                        clip_id=clip.clip_id, keyframe_id=kid, box=box, class_id=int(cls)))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(
                lambda c: _clip_action_outputs(c, params, config), clips))
    else:
        batches = [_clip_action_outputs(c, params, config) for c in clips]
    detections = [d for batch in batches for d in batch]
    return frame_ap(detections, ground_truth, iou_threshold=iou_threshold)


def evaluate_scenegraph(clips: list[ClipFeatures], params: dict[str, Tensor],
                        config: ModelConfig, ks=(20, 50), mode: str = "sgcls",
                        workers: int = 1) -> dict[int, float]:
    """Mean recall at each K over all keyframes, under sgcls or predcls scoring."""
    if not clips:
        raise ValidationError("no clips to evaluate")

    def score_clip(clip: ClipFeatures):
        graph = build_graph(clip.frames, params, config)
        result = run_inference(graph, params, config)
        rows = []
        for pos in sorted(result.fg_states):
            pred = sg_readout(result.fg_states[pos],
                              params["readout.object.weight"], params["readout.object.bias"],
                              params["readout.relation.weight"], params["readout.relation.bias"])
            gt_classes = np.asarray(clip.object_classes[pos], dtype=int)
            gt = [Triplet(subject_index=s, object_index=o,
                          subject_class=int(gt_classes[s]), object_class=int(gt_classes[o]),
                          predicate_class=r) for s, o, r in clip.relations[pos]]
            rows.append((pred, gt, gt_classes))
        return rows

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = list(pool.map(score_clip, clips))
    else:
        scored = [score_clip(c) for c in clips]
    totals = {k: 0.0 for k in ks}
    count = 0
    for rows in scored:
        for pred, gt, gt_classes in rows:
            count += 1
            for k in ks:
                totals[k] += recall_at_k(pred, gt, k, mode, gt_object_classes=gt_classes)
    return {k: totals[k] / count for k in ks}


# ---------------------------------------------------------------------------
# gradient checking


def gradient_check(config: ModelConfig, seed: int = 0, step: float = 1e-5,
                   keyframes: int | None = None, n_boxes: int = 2,
                   grid_hw: tuple[int, int] = (2, 2),
                   with_proposal: bool = True) -> dict[str, float]:
    """Compare the analytic clip-loss gradient against central differences.

    Builds a small random clip for the configured task and returns the
    max relative error per parameter.  The scene size arguments bound the
    graph so the quadratic cost of the numeric pass stays small.
    """
    rng = np.random.default_rng(seed)
    c = config.feature_channels
    frames = []
    if keyframes is None:
        keyframes = max(2, min(3, config.tau_c))
    all_boxes = [Box(0.05, 0.05, 0.45, 0.45), Box(0.55, 0.55, 0.95, 0.95),
                 Box(0.05, 0.55, 0.45, 0.95)]
    boxes = all_boxes[:n_boxes]
    h, w = grid_hw
    proposals = [Box(0.3, 0.3, 0.7, 0.7)] if with_proposal else []
    for k in range(keyframes):
        grid = FeatureGrid(values=Tensor(rng.normal(0.0, 1.0, size=(1, h, w, c))), keyframe_id=k)
        frames.append(featurize_keyframe(grid, boxes, proposals))
    if config.task == "action":
        labels = [(rng.uniform(size=(n_boxes, config.action_classes)) < 0.5).astype(float)
                  for _ in range(keyframes)]
        clip = ClipFeatures(clip_id="check", frames=frames, action_labels=labels)
    else:
        classes = [rng.integers(0, config.object_classes, size=n_boxes) for _ in range(keyframes)]
        rels = [[(1, 0, int(rng.integers(config.relation_classes)))] if n_boxes > 1 else []
                for _ in range(keyframes)]
        clip = ClipFeatures(clip_id="check", frames=frames,
                            object_classes=classes, relations=rels)
    params = init_params(config, seed)

    with Tape() as tape:
        loss = clip_loss(clip, params, config)
    analytic = grad(tape, loss, params)

    def objective(p: dict[str, Tensor]) -> float:
        return clip_loss(clip, p, config).item()

    numeric = ng.finite_difference_grads(objective, params, step=step)
    return {name: ng.max_relative_error(analytic[name].data, numeric[name])
            for name in params}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, params: dict[str, Tensor], config: ModelConfig,
                    seed: int, log: list[dict] | None = None) -> None:
    """Versioned JSON checkpoint: config echo, seed, and named tensors.

    Serialization uses sorted keys and shortest-round-trip floats, so the
    same state always produces the same bytes.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": seed,
        "config": config.to_dict(),
        "params": {
            name: {"shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
            for name, t in params.items()
        },
    }
    if log is not None:
        payload["log"] = log
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def load_checkpoint(path: str) -> tuple[dict[str, Tensor], ModelConfig, dict]:
    """Load a checkpoint, failing loudly on any name or shape mismatch."""
    try:
        with open(path) as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as err:
        raise ValidationError(f"cannot read checkpoint {path}: {err}") from None
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path}: not a model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    config = ModelConfig.from_dict(payload["config"])
    expected = param_shapes(config)
    stored = payload["params"]
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        extra = sorted(set(stored) - set(expected))
        raise ValidationError(
            f"{path}: parameter names do not match the config "
            f"(missing {missing}, unexpected {extra})")
    params: dict[str, Tensor] = {}
    for name, shape in expected.items():
        entry = stored[name]
        if tuple(entry["shape"]) != shape:
            raise ValidationError(
                f"{path}: {name!r} has shape {tuple(entry['shape'])}, expected {shape}")
        data = np.array(entry["values"]).reshape(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    meta = {"seed": payload.get("seed"), "log": payload.get("log")}
    return params, config, meta
