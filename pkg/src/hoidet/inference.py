"""Cascaded inference: detect, score humans, pick one target per action.

The cascade avoids quadratic head work: every post-detection box runs
through the per-RoI heads exactly once (batched), caching its action
logits, density parameters, and object-side interaction logits. Pair
scoring then reduces to sums and products over the cached values, and
the target for each (human, action) is the candidate maximizing

    s_o * interaction_score * compat

which equals the full triplet-score argmax since the human's own terms
are constant within the group. Ties go to the lowest candidate index.

Self-pairs are excluded: a human box is never its own target, but other
detected people are legitimate candidates.

Predictions serialize as JSON lines, one triplet per line; that file is
the evaluator's input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dataset import PERSON_CATEGORY, ROLE_NONE, ActionRegistry
from .density import gaussian_compat, kmeans_compat, mixture_compat
from .geometry import Box, Detection, decode_rel, encode_rel, nms
from .model import (
    HeadConfig,
    forward_human,
    forward_object,
    interaction_human_logits,
    interaction_object_logits,
    pair_scores,
)

SCORE_THRESHOLD = 0.05
NMS_THRESHOLD = 0.3
MAX_TRIPLETS = 100


@dataclass(frozen=True)
class InferenceConfig:
    score_threshold: float = SCORE_THRESHOLD
    nms_threshold: float = NMS_THRESHOLD
    max_triplets: int = MAX_TRIPLETS


@dataclass
class ScoredTriplet:
    """One (human, action, object) prediction with its score factors.

    ``object`` is None exactly when the action takes no target; then
    ``s_o`` and ``compat`` are None and the total is s_h * action_score.
    """

    image_id: int
    human: Detection
    action: str
    role: str
    object: Detection | None
    s_h: float
    s_o: float | None
    action_score: float
    compat: float | None
    score: float

    def component_product(self) -> float:
        p = self.s_h * self.action_score
        if self.object is not None:
            p = self.s_h * self.s_o * self.action_score * self.compat
        return p


@dataclass
class InferStats:
    num_proposals: int = 0
    num_detections: int = 0
    per_roi_forwards: int = 0
    num_pairs_scored: int = 0


def detect_objects(probs: np.ndarray, deltas: np.ndarray, proposals,
                   categories, score_threshold: float = SCORE_THRESHOLD,
                   nms_threshold: float = NMS_THRESHOLD) -> list[Detection]:
    """Decode per-class boxes, drop low scores, per-class NMS."""
    dets = []
    for i, prop in enumerate(proposals):
        for c, name in enumerate(categories, start=1):
            s = float(probs[i, c])
            if s <= score_threshold:
                continue
            dets.append(Detection(box=decode_rel(deltas[i, c], prop),
                                  category=name, score=s))
    return nms(dets, nms_threshold)


def select_object(s_o: np.ndarray, inter: np.ndarray, compat: np.ndarray):
    """Index of the candidate maximizing the product, or None if empty.

    np.argmax keeps the first maximum, which is the tie-break rule.
    """
    if len(s_o) == 0:
        return None
    return int(np.argmax(np.asarray(s_o) * np.asarray(inter)
                         * np.asarray(compat)))


def _compat_fn(hum, h, a, cfg: HeadConfig, baseline_centers):
    """Closure evaluating the target-location term for one (human, action)."""
    if baseline_centers is not None:
        centers = baseline_centers[a]
        return lambda rel: kmeans_compat(rel, centers, cfg.sigma)
    if cfg.use_mdn:
        w, mu, sg = hum.weights[h, a], hum.mus[h, a], hum.sigmas[h, a]
        return lambda rel: mixture_compat(rel, w, mu, sg)
    mu = hum.mus[h, a, 0]
    return lambda rel: gaussian_compat(rel, mu, cfg.sigma)


def infer(scene_id: int, proposals, provider, params, cfg: HeadConfig,
          registry: ActionRegistry, categories,
          icfg: InferenceConfig = InferenceConfig(),
          baseline_centers=None):
    """Full cascade for one image -> (triplets sorted by score, stats).

    baseline_centers, when given, maps action index -> (K, 4) cluster
    centers and replaces the model's density output in the compat term.
    """
    stats = InferStats(num_proposals=len(proposals))
    if not proposals:
        return [], stats
    feats = provider.pooled_matrix(scene_id, proposals)
    obj_out = forward_object(feats, params, cfg)
    detections = detect_objects(obj_out.probs, obj_out.deltas, proposals,
                                categories, icfg.score_threshold,
                                icfg.nms_threshold)
    triplets = score_detections(scene_id, detections, provider, params, cfg,
                                registry, stats, baseline_centers)
    order = sorted(range(len(triplets)),
                   key=lambda i: (-triplets[i].score, i))
    return [triplets[i] for i in order[: icfg.max_triplets]], stats


def score_detections(scene_id: int, detections, provider, params,
                     cfg: HeadConfig, registry: ActionRegistry,
                     stats: InferStats | None = None,
                     baseline_centers=None) -> list:
    """Post-detection cascade: unsorted triplets for the given boxes."""
    if stats is None:
        stats = InferStats()
    stats.num_detections = len(detections)
    if not detections:
        return []

    det_feats = provider.pooled_matrix(scene_id, [d.box for d in detections])
    # one cascade-stage pass per surviving box: caches action scores,
    # density parameters, and both interaction-side quantities
    hum = forward_human(det_feats, params, cfg)
    if cfg.use_interaction_branch:
        logit_h = interaction_human_logits(hum.hidden, params, cfg)
        logit_o, hidden_o = interaction_object_logits(det_feats, params, cfg)
    stats.per_roi_forwards += len(detections)

    triplets = []
    for h, hdet in enumerate(detections):
        if hdet.category != PERSON_CATEGORY:
            continue
        cand = [j for j in range(len(detections)) if j != h]
        rels = [
            np.array(encode_rel(detections[j].box, hdet.box).as_tuple())
            for j in cand
        ]
        inter_all = None
        if cand and cfg.use_interaction_branch:
            if cfg.pairwise_mode == "logit_sum":
                inter_all = pair_scores(
                    np.tile(logit_h[h], (len(cand), 1)), logit_o[cand],
                    None, None, params, cfg)
            else:
                zeros = np.zeros((len(cand), cfg.num_actions))
                inter_all = pair_scores(
                    zeros, zeros, np.tile(hum.hidden[h], (len(cand), 1)),
                    hidden_o[cand], params, cfg)
            stats.num_pairs_scored += len(cand)
        for a, entry in enumerate(registry):
            act = float(hum.action_scores[h, a])
            if entry.role == ROLE_NONE:
                triplets.append(ScoredTriplet(
                    image_id=scene_id, human=hdet, action=entry.name,
                    role=entry.role, object=None, s_h=hdet.score, s_o=None,
                    action_score=act, compat=None,
                    score=hdet.score * act))
                continue
            if not cand:
                continue
            inter = (inter_all[:, a] if inter_all is not None
                     else np.full(len(cand), act))
            g_of = _compat_fn(hum, h, a, cfg, baseline_centers)
            compat = np.array([g_of(rel) for rel in rels])
            s_o = np.array([detections[j].score for j in cand])
            best = select_object(s_o, inter, compat)
            j = cand[best]
            triplets.append(ScoredTriplet(
                image_id=scene_id, human=hdet, action=entry.name,
                role=entry.role, object=detections[j], s_h=hdet.score,
                s_o=float(s_o[best]), action_score=float(inter[best]),
                compat=float(compat[best]),
                score=hdet.score * float(s_o[best]) * float(inter[best])
                * float(compat[best])))
    return triplets


def _det_json(d: Detection | None):
    if d is None:
        return None
    return {"box": list(d.box.as_tuple()), "category": d.category,
            "score": d.score}


def _det_from_json(obj):
    if obj is None:
        return None
    return Detection(box=Box(*obj["box"]), category=obj["category"],
                     score=float(obj["score"]))


def triplet_to_json(t: ScoredTriplet) -> dict:
    return {
        "image_id": t.image_id,
        "human": _det_json(t.human),
        "action": t.action,
        "role": t.role,
        "object": _det_json(t.object),
        "s_h": t.s_h,
        "s_o": t.s_o,
        "action_score": t.action_score,
        "compat": t.compat,
        "score": t.score,
    }


def triplet_from_json(obj: dict) -> ScoredTriplet:
    return ScoredTriplet(
        image_id=int(obj["image_id"]),
        human=_det_from_json(obj["human"]),
        action=str(obj["action"]),
        role=str(obj["role"]),
        object=_det_from_json(obj["object"]),
        s_h=float(obj["s_h"]),
        s_o=None if obj["s_o"] is None else float(obj["s_o"]),
        action_score=float(obj["action_score"]),
        compat=None if obj["compat"] is None else float(obj["compat"]),
        score=float(obj["score"]),
    )


def write_predictions(path, triplets) -> None:
    with open(path, "w") as f:
        for t in triplets:
            f.write(json.dumps(triplet_to_json(t)) + "\n")


def read_predictions(path) -> list[ScoredTriplet]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(triplet_from_json(json.loads(line)))
    return out
