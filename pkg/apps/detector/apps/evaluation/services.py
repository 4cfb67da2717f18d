"""
Novel-class evaluation, inference dumps and the ablation grid.

Detections are matched to ground truth per class, greedily in order of
descending confidence: a detection takes the unmatched box it overlaps most,
and a detection whose best box is already taken (or below the IoU threshold)
is a false positive. AP is the area under the precision envelope of the
resulting precision/recall staircase (all-point interpolation).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from django.conf import settings

from apps.episodic.models import Detection, Episode, FewShotDetector, QueryScene, TrainingConfig
from apps.episodic.services import (
    BackboneService,
    BoxHeadService,
    EpisodeService,
    TrainingService,
    decode_boxes,
    support_pool_window,
)
from apps.evaluation.models import EpisodeResult, EvalResult
from apps.meta.services import EmbeddingExportService, MRService
from apps.metric.models import MetricConfig
from apps.metric.services import similarity_row
from apps.tensorcore.checkpoint import parameter_digest
from apps.tensorcore.layers import maxpool2d
from apps.toydata.models import Box, ToyDataset
from apps.toydata.services import iou, iou_matrix
from core.utils.errors import ArtifactIOError, EpisodeAbortError, StateError, ValidationError
from core.utils.hashing import derive_seed
from core.utils.timing import track_duration

logger = logging.getLogger("fsod.evaluation")

VARIANTS = (
    ("no-mr+pearson", False, "pearson"),
    ("mr+cosine", True, "cosine"),
    ("mr+pearson", True, "pearson"),
)


def defaults():
    return settings.FSOD_DEFAULTS


def nms(detections, iou_threshold=0.5) -> list[Detection]:
    """Greedy per-class non-maximum suppression, highest score first."""
    kept = []
    for class_index in sorted({d.class_index for d in detections}):
        candidates = sorted(
            (d for d in detections if d.class_index == class_index), key=lambda d: -d.score
        )
        selected = []
        for candidate in candidates:
            if all(iou(candidate.box, other.box) <= iou_threshold for other in selected):
                selected.append(candidate)
        kept.extend(selected)
    return kept


def match_detections(detections, ground_truth, iou_threshold=0.5) -> np.ndarray:
    """
    True-positive flags for ``detections`` sorted by descending score.

    ``ground_truth`` maps scene index -> list of boxes of one class.
    """
    taken = {scene: np.zeros(len(boxes), dtype=bool) for scene, boxes in ground_truth.items()}
    flags = np.zeros(len(detections), dtype=bool)
    for i, detection in enumerate(detections):
        boxes = ground_truth.get(detection.scene_index, [])
        if not boxes:
            continue
        overlaps = iou_matrix([detection.box], boxes)[0]
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_threshold and not taken[detection.scene_index][best]:
            taken[detection.scene_index][best] = True
            flags[i] = True
    return flags


def average_precision(tp_flags, n_ground_truth) -> float:
    """All-point interpolated AP from true-positive flags in score order."""
    if n_ground_truth <= 0:
        raise ValidationError("average precision needs at least one ground-truth box")
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / n_ground_truth
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    changes = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


def class_average_precision(detections, ground_truth, iou_threshold=0.5) -> float:
    ordered = sorted(detections, key=lambda d: -d.score)
    n_gt = sum(len(boxes) for boxes in ground_truth.values())
    return average_precision(match_detections(ordered, ground_truth, iou_threshold), n_gt)


class DetectionService:
    @staticmethod
    def adapt_episode(model: FewShotDetector, episode: Episode, config: TrainingConfig):
        """Per-episode inner adaptation on a clone, then prototypes from the adapted parameters."""
        pooled, rows, _, _, adapted = TrainingService.adapt(model, episode, config)
        prototypes = MRService.support_prototypes(
            adapted,
            {c: pooled[rows == c] for c in range(episode.way)},
            metric_kind=model.metric_kind,
        )
        return adapted, prototypes

    @staticmethod
    def detect_scene(model, adapted, prototypes, query: QueryScene, score_threshold, scene_index=0, nms_iou=None):
        """
        Classify and refine every proposal of one query scene.

        Returns (detections after NMS, one SimilarityRow per proposal).
        """
        nms_iou = defaults()["NMS_IOU"] if nms_iou is None else nms_iou
        if len(query.proposals) == 0:
            return [], []
        features, _ = BackboneService.forward(model, query.roi_crops)
        embeddings = MRService.reconstruct_queries(adapted, maxpool2d(features, support_pool_window()))
        metric_config = MetricConfig(alpha=model.alpha, metric_kind=model.metric_kind)
        vectors = [p.vector for p in prototypes]
        rows = [similarity_row(v, vectors, metric_config, training=False) for v in embeddings]

        deltas, _ = BoxHeadService.forward(features, model.box_conv, model.box_fc)
        refined = decode_boxes(query.proposal_array, deltas)
        scene = query.scene

        detections = []
        for proposal, box, row in zip(query.proposals, refined, rows):
            if row.predicted_class == 0:
                continue
            score = float(row.confidences[row.predicted_class])
            if score < score_threshold:
                continue
            x1, y1 = max(0.0, box[0]), max(0.0, box[1])
            x2, y2 = min(float(scene.width), box[0] + box[2]), min(float(scene.height), box[1] + box[3])
            final = Box(x1, y1, x2 - x1, y2 - y1) if x2 > x1 and y2 > y1 else proposal.box
            detections.append(Detection(final, row.predicted_class, score, scene_index))
        return nms(detections, nms_iou), rows

    @staticmethod
    def evaluate_episode(model, episode: Episode, config: TrainingConfig, score_threshold) -> EpisodeResult:
        try:
            adapted, prototypes = DetectionService.adapt_episode(model, episode, config)
        except EpisodeAbortError as e:
            logger.warning(f"Evaluation episode {episode.seed} aborted: {e.message}", extra={"episode_seed": episode.seed})
            return EpisodeResult(0.0, 0.0, 0.0, 0.0, 0, episode.seed, aborted=True)

        detections = []
        ground_truth = {c: {} for c in range(1, episode.way)}
        own, cross = [], []
        for scene_index, query in enumerate(episode.queries):
            found, rows = DetectionService.detect_scene(
                model, adapted, prototypes, query, score_threshold, scene_index
            )
            detections.extend(found)
            for obj, label in zip(query.scene.objects, query.gt_labels):
                ground_truth[label].setdefault(scene_index, []).append(obj.box)
            for row, label in zip(rows, query.roi_labels):
                if row.degenerate:
                    continue
                own.append(row.sims[label])
                cross.append(np.delete(row.sims, label).mean())

        ap50, ap75 = [], []
        for class_index, truth in ground_truth.items():
            if not truth:
                continue
            class_dets = [d for d in detections if d.class_index == class_index]
            ap50.append(class_average_precision(class_dets, truth, 0.5))
            ap75.append(class_average_precision(class_dets, truth, 0.75))

        return EpisodeResult(
            ap50=float(np.mean(ap50)) if ap50 else 0.0,
            ap75=float(np.mean(ap75)) if ap75 else 0.0,
            own_similarity=float(np.mean(own)) if own else 0.0,
            cross_similarity=float(np.mean(cross)) if cross else 0.0,
            n_detections=len(detections),
            episode_seed=episode.seed,
        )


class EvaluationService:
    @staticmethod
    def run_evaluation(
        model: FewShotDetector,
        config: TrainingConfig,
        dataset: ToyDataset,
        *,
        n_episodes,
        seed,
        way=None,
        shot=None,
        split="novel",
        score_threshold=None,
        seed_groups=None,
        workers=None,
    ) -> EvalResult:
        """
        Mean AP over ``n_episodes`` episodes in each of ``seed_groups`` groups
        seeded ``seed + g``. The model's parameters are never modified; this
        is checked by hashing them before and after.
        """
        if n_episodes < 1:
            raise ValidationError(f"n_episodes must be >= 1, got {n_episodes}")
        way = way or config.way
        shot = shot or config.shot
        seed_groups = seed_groups or defaults()["SEED_GROUPS"]
        workers = workers or settings.FSOD_EVAL_WORKERS
        score_threshold = defaults()["EVAL_SCORE_THRESHOLD"] if score_threshold is None else score_threshold

        digest = parameter_digest(model.parameters())

        def run(episode_seed):
            episode = EpisodeService.sample_episode(
                dataset,
                way,
                shot,
                config.n_query,
                episode_seed,
                split=split,
                n_bg=config.n_bg_proposals,
                jitter=config.jitter,
            )
            with track_duration("evaluation episode", episode_seed=episode_seed):
                return DetectionService.evaluate_episode(model, episode, config, score_threshold)

        results, group_ap50, group_ap75 = [], [], []
        for group in range(seed_groups):
            seeds = [derive_seed(seed + group, "eval", i) for i in range(n_episodes)]
            with ThreadPoolExecutor(max_workers=workers) as pool:
                group_results = list(pool.map(run, seeds))
            group_ap50.append(float(np.mean([r.ap50 for r in group_results])))
            group_ap75.append(float(np.mean([r.ap75 for r in group_results])))
            results.extend(group_results)
            logger.info(f"Seed group {group}: AP50 {group_ap50[-1]:.4f}, AP75 {group_ap75[-1]:.4f}")

        if parameter_digest(model.parameters()) != digest:
            raise StateError("evaluation modified the model parameters")

        scored = [r for r in results if not r.aborted]
        return EvalResult(
            ap50=float(np.mean(group_ap50)),
            ap75=float(np.mean(group_ap75)),
            per_episode_ap50=[r.ap50 for r in results],
            per_episode_ap75=[r.ap75 for r in results],
            n_episodes=len(results),
            group_ap50=group_ap50,
            group_ap75=group_ap75,
            own_similarity=float(np.mean([r.own_similarity for r in scored])) if scored else 0.0,
            cross_similarity=float(np.mean([r.cross_similarity for r in scored])) if scored else 0.0,
            aborted=len(results) - len(scored),
            parameter_digest=digest,
            config={
                "way": way,
                "shot": shot,
                "split": split,
                "seed": seed,
                "seed_groups": seed_groups,
                "episodes_per_group": n_episodes,
                "score_threshold": score_threshold,
                "metric_kind": str(model.metric_kind),
                "mr_enabled": model.mr_enabled,
                "meta_lr": config.meta_lr,
                "inner_steps": config.inner_steps,
            },
        )


class InferenceService:
    @staticmethod
    def infer(
        model, config, dataset, *, seed, way=None, shot=None, split="novel", score_threshold=None, embeddings_path=None
    ) -> dict:
        """JSON-ready dump of one episode: scenes, proposals, similarity rows and detections."""
        score_threshold = defaults()["SCORE_THRESHOLD"] if score_threshold is None else score_threshold
        episode = EpisodeService.sample_episode(
            dataset,
            way or config.way,
            shot or config.shot,
            config.n_query,
            seed,
            split=split,
            n_bg=config.n_bg_proposals,
            jitter=config.jitter,
        )
        adapted, prototypes = DetectionService.adapt_episode(model, episode, config)

        scenes, export_rows = [], []
        for scene_index, query in enumerate(episode.queries):
            detections, rows = DetectionService.detect_scene(
                model, adapted, prototypes, query, score_threshold, scene_index
            )
            scenes.append(
                {
                    **query.scene.to_dict(),
                    "proposals": [p.to_dict() for p in query.proposals],
                    "roi_labels": [int(label) for label in query.roi_labels],
                    "rows": [row.to_dict() for row in rows],
                    "detections": [d.to_dict() for d in detections],
                }
            )
            if embeddings_path is not None:
                features, _ = BackboneService.forward(model, query.roi_crops)
                embeddings = MRService.reconstruct_queries(adapted, maxpool2d(features, support_pool_window()))
                export_rows.extend(
                    EmbeddingExportService.rows_for_episode(episode.seed, [], embeddings, query.roi_labels)
                )

        if embeddings_path is not None:
            export_rows = list(EmbeddingExportService.rows_for_episode(episode.seed, prototypes, [], [])) + export_rows
            EmbeddingExportService.export_embeddings(embeddings_path, export_rows)

        return {
            "episode": {
                "seed": episode.seed,
                "way": episode.way,
                "shot": episode.shot,
                "split": episode.split,
                "classes": episode.classes,
                "label_perm": list(episode.label_perm),
            },
            "score_threshold": score_threshold,
            "metric_kind": str(model.metric_kind),
            "inner_losses": list(adapted.inner_losses) if adapted is not None else [],
            "prototypes": [p.to_dict() for p in prototypes],
            "scenes": scenes,
        }


class AblationService:
    @staticmethod
    def variant_config(config: TrainingConfig, mr_enabled, metric_kind) -> TrainingConfig:
        return TrainingConfig.model_validate(
            {**config.to_dict(), "mr_enabled": mr_enabled, "metric_kind": metric_kind}
        )

    @staticmethod
    def latest_checkpoint(directory) -> Path:
        checkpoints = sorted(Path(directory).glob("checkpoint-*.json"))
        if not checkpoints:
            raise ArtifactIOError("No checkpoint found for ablation variant", path=directory)
        return checkpoints[-1]

    @staticmethod
    def run_ablation(config: TrainingConfig, dataset: ToyDataset, out_dir, *, train=False, **eval_kwargs):
        """
        Evaluate the three variants on the novel split: without MR (Pearson),
        MR with cosine and MR with Pearson. With ``train`` each variant is
        trained first under ``out_dir/<variant>``.
        """
        out_dir = Path(out_dir)
        table = []
        for name, mr_enabled, metric_kind in VARIANTS:
            variant = AblationService.variant_config(config, mr_enabled, metric_kind)
            directory = out_dir / name
            if train:
                logger.info(f"Training ablation variant {name}")
                model = TrainingService.train(variant, dataset, directory).model
            else:
                model, _ = TrainingService.load_model(AblationService.latest_checkpoint(directory), variant)
            result = EvaluationService.run_evaluation(model, variant, dataset, **eval_kwargs)
            table.append(
                {
                    "variant": name,
                    "mr_enabled": mr_enabled,
                    "metric_kind": metric_kind,
                    "ap50": result.ap50,
                    "ap75": result.ap75,
                    "group_ap50": result.group_ap50,
                    "ap50_spread": float(np.std(result.group_ap50)),
                    "clustering_gap": result.clustering_gap,
                }
            )
        return table

    @staticmethod
    def ranking(table) -> dict:
        """
        Variants ordered by AP50. A lead counts as separated only when it
        exceeds the summed seed-group spreads of the two variants.

        ``ordering_holds`` is true when AP50 follows the VARIANTS order in
        reverse (MR+Pearson, then MR+cosine, then no-MR) with every lead
        separated.
        """
        ordered = sorted(table, key=lambda row: -row["ap50"])
        ranked = []
        for row, runner_up in zip(ordered, [*ordered[1:], None]):
            lead = None if runner_up is None else row["ap50"] - runner_up["ap50"]
            ranked.append(
                {
                    "variant": row["variant"],
                    "ap50": row["ap50"],
                    "lead": lead,
                    "separated": lead is not None and lead > row["ap50_spread"] + runner_up["ap50_spread"],
                }
            )
        expected = [name for name, _, _ in reversed(VARIANTS)]
        holds = [r["variant"] for r in ranked] == expected and all(r["separated"] for r in ranked[:-1])
        if not holds:
            logger.warning(f"Ablation order {[r['variant'] for r in ranked]} differs from {expected} or is within spread")
        return {"ranked": ranked, "ordering_holds": holds}
