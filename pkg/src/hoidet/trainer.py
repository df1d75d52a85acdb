"""Multi-task training: label assignment, sampling quotas, and the loop.

Label assignment follows the detection convention: proposals (which
always include the ground-truth boxes) are matched to ground truth by
IoU at 0.5. The object branch samples at most 64 boxes per image at a
1:3 positive:negative ratio; when positives are scarce the negative
count drops to three times the actual positives, preserving the ratio.
The human-centric branch samples at most 16 person boxes; each carries
a multi-hot action target over the registry entries (verb-level: both
role entries of a dual-role verb light up together) and, per role
entry with an annotated target object, the ground-truth relative
offset measured from the sampled box. Interaction samples are
ground-truth pairs only.

The reference loop is single-worker: the 16-image effective batch is
emulated by accumulating gradients over 8 virtual workers of 2 images
each before every optimizer step, in fixed order so training is
bit-reproducible given the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import ROLE_NONE, ActionRegistry, SceneAnnotation
from .geometry import Box, encode_rel, iou
from .model import (
    HeadConfig,
    ImageSamples,
    LossWeights,
    backward,
    init_params,
    init_velocity,
    save_checkpoint,
    sgd_step,
    zero_grads,
)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class Quotas:
    object_quota: int = 64
    pos_fraction: float = 0.25
    human_quota: int = 16
    iou_pos: float = 0.5


@dataclass(frozen=True)
class Phase:
    iterations: int
    lr: float


@dataclass
class Schedule:
    phases: list = field(
        default_factory=lambda: [Phase(10000, 1e-3), Phase(3000, 1e-4)]
    )
    images_per_step: int = 2
    workers: int = 8
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        self.phases = [p if isinstance(p, Phase) else Phase(*p) for p in self.phases]
        if not self.phases:
            raise ValueError("schedule needs at least one phase")
        if any(p.lr < 0 or p.iterations < 0 for p in self.phases):
            raise ValueError("phase rates must be nonnegative")
        if self.images_per_step < 1 or self.workers < 1:
            raise ValueError("batch shape must be positive")

    @property
    def total_iterations(self) -> int:
        return sum(p.iterations for p in self.phases)


@dataclass
class TrainScene:
    scene_id: int
    annotation: SceneAnnotation
    proposals: list


def from_synthetic(scenes):
    """Adapt generated scenes into (TrainScene list, feature provider)."""
    from .features import SyntheticFeatureProvider

    train_scenes = [
        TrainScene(s.annotation.image_id, s.annotation, s.proposals) for s in scenes
    ]
    provider = SyntheticFeatureProvider(
        {s.annotation.image_id: s.feature_map for s in scenes}
    )
    return train_scenes, provider


@dataclass
class SampleBoxes:
    """assign_labels output: labeled boxes before feature pooling."""

    object_boxes: list
    object_labels: np.ndarray
    object_reg_targets: np.ndarray
    object_reg_mask: np.ndarray
    human_boxes: list
    human_action_targets: np.ndarray
    human_target_offsets: np.ndarray
    human_target_mask: np.ndarray
    interaction_pairs: list  # [(person Box, object Box)]
    interaction_action_targets: np.ndarray


def _rel(a: Box, ref: Box) -> np.ndarray:
    return np.array(encode_rel(a, ref).as_tuple())


def assign_labels(proposals, scene: SceneAnnotation, registry: ActionRegistry,
                  categories, quotas: Quotas = Quotas(), seed=0) -> SampleBoxes:
    """Match proposals to ground truth and sample the three sections.

    categories lists the non-background class names and must contain
    "person"; class index = list position + 1, background 0.
    """
    rng = np.random.default_rng(seed)
    cat_index = {c: i + 1 for i, c in enumerate(categories)}
    if "person" not in cat_index:
        raise ValueError('categories must include "person"')
    a = len(registry)

    gt_boxes = list(scene.persons) + [o.box for o in scene.objects]
    gt_labels = [cat_index["person"]] * len(scene.persons) + [
        cat_index[o.category] for o in scene.objects
    ]
    gt_ignore = [False] * len(scene.persons) + [o.ignore for o in scene.objects]

    n = len(proposals)
    labels = np.zeros(n, dtype=int)
    reg_targets = np.zeros((n, 4))
    reg_mask = np.zeros(n, dtype=bool)
    pos_idx, neg_idx = [], []
    person_match = np.full(n, -1, dtype=int)
    person_iou = np.zeros(n)
    for i, prop in enumerate(proposals):
        best_j, best_v = -1, 0.0
        best_ign = 0.0
        for j, gt in enumerate(gt_boxes):
            v = iou(prop, gt)
            if gt_ignore[j]:
                best_ign = max(best_ign, v)
                continue
            if v > best_v:
                best_j, best_v = j, v
            if j < len(scene.persons) and v > person_iou[i]:
                person_match[i] = j
                person_iou[i] = v
        if best_v >= quotas.iou_pos:
            labels[i] = gt_labels[best_j]
            reg_targets[i] = _rel(gt_boxes[best_j], prop)
            reg_mask[i] = True
            pos_idx.append(i)
        elif best_ign >= quotas.iou_pos:
            # overlaps an ignore region: neither positive nor negative
            continue
        else:
            neg_idx.append(i)

    pos_requested = int(round(quotas.object_quota * quotas.pos_fraction))
    rng.shuffle(pos_idx)
    rng.shuffle(neg_idx)
    take_pos = pos_idx[:pos_requested]
    take_neg = neg_idx[: 3 * len(take_pos)]
    chosen = sorted(take_pos + take_neg)

    hum_idx = [i for i in range(n) if person_iou[i] >= quotas.iou_pos]
    rng.shuffle(hum_idx)
    hum_idx = sorted(hum_idx[: quotas.human_quota])

    hum_targets = np.zeros((len(hum_idx), a))
    hum_offsets = np.zeros((len(hum_idx), a, 4))
    hum_mask = np.zeros((len(hum_idx), a), dtype=bool)
    for row, i in enumerate(hum_idx):
        pid = person_match[i]
        for rec in scene.interactions:
            if rec.person != pid:
                continue
            for entry in registry.entries_for(rec.action):
                hum_targets[row, registry.index(entry.name, entry.role)] = 1.0
            if rec.role != ROLE_NONE:
                e = registry.index(rec.action, rec.role)
                if not hum_mask[row, e]:  # first record wins on duplicates
                    hum_offsets[row, e] = _rel(
                        scene.objects[rec.object].box, proposals[i]
                    )
                    hum_mask[row, e] = True

    pair_targets = {}
    for rec in scene.interactions:
        if rec.role == ROLE_NONE:
            continue
        key = (rec.person, rec.object)
        t = pair_targets.setdefault(key, np.zeros(a))
        for entry in registry.entries_for(rec.action):
            t[registry.index(entry.name, entry.role)] = 1.0
    pairs = [
        (scene.persons[p], scene.objects[o].box) for p, o in sorted(pair_targets)
    ]
    pair_mat = (
        np.stack([pair_targets[k] for k in sorted(pair_targets)])
        if pair_targets
        else np.zeros((0, a))
    )

    return SampleBoxes(
        object_boxes=[proposals[i] for i in chosen],
        object_labels=labels[chosen],
        object_reg_targets=reg_targets[chosen],
        object_reg_mask=reg_mask[chosen],
        human_boxes=[proposals[i] for i in hum_idx],
        human_action_targets=hum_targets,
        human_target_offsets=hum_offsets,
        human_target_mask=hum_mask,
        interaction_pairs=pairs,
        interaction_action_targets=pair_mat,
    )


def featurize(samples: SampleBoxes, provider, scene_id: int,
              cfg: HeadConfig) -> ImageSamples:
    a = cfg.num_actions
    n_h = len(samples.human_boxes)
    return ImageSamples(
        object_feats=provider.pooled_matrix(scene_id, samples.object_boxes),
        object_labels=samples.object_labels,
        object_reg_targets=samples.object_reg_targets,
        object_reg_mask=samples.object_reg_mask,
        human_feats=provider.pooled_matrix(scene_id, samples.human_boxes),
        human_action_targets=samples.human_action_targets.reshape(n_h, a),
        human_target_offsets=samples.human_target_offsets.reshape(n_h, a, 4),
        human_target_mask=samples.human_target_mask.reshape(n_h, a),
        interaction_h_feats=provider.pooled_matrix(
            scene_id, [p for p, _ in samples.interaction_pairs]
        ),
        interaction_o_feats=provider.pooled_matrix(
            scene_id, [o for _, o in samples.interaction_pairs]
        ),
        interaction_action_targets=samples.interaction_action_targets,
    )


def build_image_samples(ts: TrainScene, provider, registry, categories,
                        cfg: HeadConfig, quotas: Quotas, seed) -> ImageSamples:
    samples = assign_labels(ts.proposals, ts.annotation, registry, categories,
                            quotas, seed)
    return featurize(samples, provider, ts.scene_id, cfg)


def _mean_report(reports):
    from .model import LossReport

    out = LossReport()
    k = len(reports)
    for r in reports:
        out.object_cls_loss += r.object_cls_loss / k
        out.object_reg_loss += r.object_reg_loss / k
        out.action_cls_loss += r.action_cls_loss / k
        out.target_loc_loss += r.target_loc_loss / k
        out.interaction_cls_loss += r.interaction_cls_loss / k
        out.total += r.total / k
    return out


LOG_FIELDS = ("total", "object_cls_loss", "object_reg_loss", "action_cls_loss",
              "target_loc_loss", "interaction_cls_loss")


def train(scenes, provider, cfg: HeadConfig, schedule: Schedule,
          registry: ActionRegistry, categories,
          quotas: Quotas = Quotas(), loss_weights: LossWeights = LossWeights(),
          params=None, log_path=None, checkpoint_path=None,
          checkpoint_every: int = 0, actions_json=None):
    """Run the schedule; returns (params, LossReport history).

    Deterministic given the seed: scene choice, sampling, and gradient
    reduction all follow fixed seeded orders. Aborts with the iteration
    index if the total loss leaves the finite range.
    """
    if not scenes:
        raise ValueError("training needs at least one scene")
    if params is None:
        params = init_params(cfg, schedule.seed)
    velocity = init_velocity(params)
    history = []
    log_fh = open(log_path, "w") if log_path else None
    if log_fh:
        log_fh.write("iteration lr " + " ".join(LOG_FIELDS) + "\n")
    if actions_json is None:
        actions_json = registry.to_json()
    it = 0
    try:
        for phase in schedule.phases:
            for _ in range(phase.iterations):
                rng = np.random.default_rng((schedule.seed, it))
                picks = rng.integers(
                    0, len(scenes),
                    size=schedule.workers * schedule.images_per_step,
                )
                acc = zero_grads(params)
                reports = []
                for w in range(schedule.workers):
                    batch = []
                    for j in range(schedule.images_per_step):
                        ts = scenes[picks[w * schedule.images_per_step + j]]
                        batch.append(
                            build_image_samples(
                                ts, provider, registry, categories, cfg,
                                quotas, seed=(schedule.seed, it, w, j),
                            )
                        )
                    try:
                        grads, rep = backward(batch, params, cfg, loss_weights)
                    except FloatingPointError as exc:
                        raise TrainingDiverged(
                            f"iteration {it}: {exc}"
                        ) from exc
                    for k in acc:
                        acc[k] += grads[k]
                    reports.append(rep)
                for k in acc:
                    acc[k] /= schedule.workers
                sgd_step(params, acc, velocity, phase.lr,
                         schedule.momentum, schedule.weight_decay)
                rep = _mean_report(reports)
                if not np.isfinite(rep.total):
                    raise TrainingDiverged(
                        f"non-finite loss {rep.total} at iteration {it}"
                    )
                history.append(rep)
                if log_fh:
                    vals = rep.as_dict()
                    log_fh.write(
                        f"{it} {phase.lr:g} "
                        + " ".join(f"{vals[f]:.6f}" for f in LOG_FIELDS)
                        + "\n"
                    )
                it += 1
                if (checkpoint_path and checkpoint_every
                        and it % checkpoint_every == 0):
                    save_checkpoint(checkpoint_path, params, cfg, actions_json)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, params, cfg, actions_json)
    finally:
        if log_fh:
            log_fh.close()
    return params, history
