"""
Episode sampling, the toy backbone and box head, and the outer training loop.

The outer step is first order: the inner loop adapts a clone of the MR
parameters, every loss gradient is taken at the adapted parameters, and the
MR part of it is applied to the shared parameters. Classification gradients
reach the model along two routes, the query RoI embeddings and the support
prototypes; both continue through the MR module into the backbone.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from django.conf import settings

from apps.episodic.models import (
    BACKGROUND,
    BoxDelta,
    Episode,
    FewShotDetector,
    LossReport,
    QueryScene,
    TrainingConfig,
    TrainingRun,
)
from apps.meta.models import InnerLoopConfig, MRModule
from apps.meta.services import EmbedTrace, MRService, stack_supports
from apps.metric import services as metric_services
from apps.tensorcore.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from apps.tensorcore.layers import (
    avgpool_global,
    avgpool_global_backward,
    conv2d_backward,
    conv2d_forward,
    fc_backward,
    fc_forward,
    maxpool2d,
    maxpool2d_backward,
    relu,
    relu_backward,
)
from apps.tensorcore.services import sgd_step, zero_grads
from apps.toydata.models import ToyDataset
from apps.toydata.services import SceneService
from core.utils.errors import (
    ArtifactIOError,
    DegenerateVectorError,
    EpisodeAbortError,
    NonFiniteError,
    SamplingError,
    TrainingError,
    ValidationError,
)
from core.utils.hashing import derive_seed
from core.utils.timing import track_duration

logger = logging.getLogger("fsod.training")

BACKBONE_STRIDE = 2
BACKBONE_PAD = 1
# largest log size ratio a decoded box may use
DELTA_CLIP = float(np.log(1000.0 / 16))
MAX_BACKGROUND_SCENES = 10
ALL_PATHS = ("query", "support")


def support_pool_window():
    return settings.FSOD_DEFAULTS["SUPPORT_POOL_WINDOW"]


def encode_boxes(proposals, targets):
    """Deltas (tx, ty, tw, th) that move each proposal onto its target box."""
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    p_cx, p_cy = p[:, 0] + p[:, 2] / 2, p[:, 1] + p[:, 3] / 2
    g_cx, g_cy = g[:, 0] + g[:, 2] / 2, g[:, 1] + g[:, 3] / 2
    return np.stack(
        [
            (g_cx - p_cx) / p[:, 2],
            (g_cy - p_cy) / p[:, 3],
            np.log(g[:, 2] / p[:, 2]),
            np.log(g[:, 3] / p[:, 3]),
        ],
        axis=1,
    )


def decode_boxes(proposals, deltas):
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    cx = p[:, 0] + p[:, 2] / 2 + d[:, 0] * p[:, 2]
    cy = p[:, 1] + p[:, 3] / 2 + d[:, 1] * p[:, 3]
    w = p[:, 2] * np.exp(np.minimum(d[:, 2], DELTA_CLIP))
    h = p[:, 3] * np.exp(np.minimum(d[:, 3], DELTA_CLIP))
    return np.stack([cx - w / 2, cy - h / 2, w, h], axis=1)


def smooth_l1_rows(residual):
    """Per-row smooth-L1: sum of 0.5 x^2 (|x| < 1) or |x| - 0.5."""
    x = np.abs(np.asarray(residual, dtype=np.float64))
    return np.where(x < 1.0, 0.5 * x**2, x - 0.5).sum(axis=-1)


def smooth_l1_grad(residual):
    return np.clip(np.asarray(residual, dtype=np.float64), -1.0, 1.0)


def smooth_l1(pred: BoxDelta, target: BoxDelta) -> float:
    return float(smooth_l1_rows(pred.to_array() - target.to_array()))


@dataclass
class BackboneTrace:
    inputs: list
    pre: list


class BackboneService:
    @staticmethod
    def forward(model: FewShotDetector, images):
        """[B, 3, H, W] crops -> relu feature maps, stride 2 per layer."""
        x = np.asarray(images, dtype=np.float64)
        trace = BackboneTrace([], [])
        for layer in model.backbone:
            trace.inputs.append(x)
            pre = conv2d_forward(x, layer, stride=BACKBONE_STRIDE, pad=BACKBONE_PAD)
            trace.pre.append(pre)
            x = relu(pre)
        return x, trace

    @staticmethod
    def backward(model: FewShotDetector, grad, trace: BackboneTrace):
        for layer, x, pre in reversed(list(zip(model.backbone, trace.inputs, trace.pre))):
            grad = relu_backward(grad, pre)
            grad = conv2d_backward(grad, x, layer, stride=BACKBONE_STRIDE, pad=BACKBONE_PAD)
        return grad


@dataclass
class BoxHeadTrace:
    input: np.ndarray
    pre: np.ndarray
    act: np.ndarray
    pooled: np.ndarray


class BoxHeadService:
    """Class-agnostic regression: conv 3x3 + relu, global average pool, fc -> 4."""

    @staticmethod
    def forward(roi_maps, box_conv, box_fc):
        pre = conv2d_forward(roi_maps, box_conv, stride=1, pad=1)
        act = relu(pre)
        pooled = avgpool_global(act)
        return fc_forward(pooled, box_fc), BoxHeadTrace(np.asarray(roi_maps), pre, act, pooled)

    @staticmethod
    def backward(grad_deltas, trace: BoxHeadTrace, box_conv, box_fc):
        grad = fc_backward(grad_deltas, trace.pooled, box_fc)
        grad = avgpool_global_backward(grad, trace.act.shape)
        grad = relu_backward(grad, trace.pre)
        return conv2d_backward(grad, trace.input, box_conv, stride=1, pad=1)

    @staticmethod
    def box_head_forward(roi_feature_map, params) -> BoxDelta:
        box_conv, box_fc = params
        deltas, _ = BoxHeadService.forward(np.asarray(roi_feature_map)[None], box_conv, box_fc)
        return BoxDelta.from_array(deltas[0])


class EpisodeService:
    @staticmethod
    def sample_episode(
        dataset: ToyDataset, way, shot, n_query, seed, split="base", n_bg=4, jitter=0.2
    ) -> Episode:
        """
        Draw an N-way K-shot episode: ``way - 1`` foreground classes from the
        split plus the background class at index 0.

        Every draw is derived from ``seed``; the same arguments always give the
        same classes, crops, proposals and label permutation.
        """
        dataset.assert_disjoint()
        if way < 2 or shot < 1 or n_query < 1:
            raise ValidationError(f"need way >= 2, shot >= 1, n_query >= 1; got {way}, {shot}, {n_query}")
        pool = dataset.split(split)
        if len(pool) < way - 1:
            deficit = way - 1 - len(pool)
            raise SamplingError(
                f"split {split!r} has {len(pool)} classes, a {way}-way episode needs {way - 1}",
                deficits={"classes": deficit},
            )

        rng = np.random.default_rng(seed)
        generator = dataset.generator
        size = generator.support_size
        foreground = [str(c) for c in rng.choice(pool, size=way - 1, replace=False)]
        classes = [BACKGROUND, *foreground]

        support, sources = {}, {}
        for index, name in enumerate(foreground, start=1):
            scenes = [
                SceneService.render_scene([name], derive_seed(seed, "support", index, k), generator)
                for k in range(shot)
            ]
            sources[index] = [(scene, scene.boxes[0]) for scene in scenes]
            support[index] = np.stack(
                [SceneService.crop_support(scene, box, size) for scene, box in sources[index]]
            )
        sources[0] = EpisodeService._background_sources(pool, shot, seed, generator)
        support[0] = np.stack([SceneService.crop_support(scene, box, size) for scene, box in sources[0]])

        queries = []
        for index, name in enumerate(foreground, start=1):
            others = [c for c in foreground if c != name]
            for q in range(n_query):
                query_rng = np.random.default_rng(derive_seed(seed, "query", index, q))
                n_other = int(query_rng.integers(0, min(2, len(others)) + 1))
                chosen = [name, *(str(c) for c in query_rng.choice(others, size=n_other, replace=False))]
                scene = SceneService.render_scene(chosen, derive_seed(seed, "query-scene", index, q), generator)
                proposals = SceneService.make_proposals(
                    scene, n_bg=n_bg, jitter=jitter, seed=derive_seed(seed, "proposals", index, q)
                )
                queries.append(EpisodeService.build_query(scene, proposals, classes, size))

        return Episode(
            way=way,
            shot=shot,
            classes=classes,
            support=support,
            queries=queries,
            label_perm=tuple(int(i) for i in rng.permutation(way)),
            head_seeds=tuple(derive_seed(seed, "head", name) for name in classes),
            seed=int(seed),
            split=split,
            support_sources=sources,
        )

    @staticmethod
    def _background_sources(pool, shot, seed, generator):
        """Crops that overlap no annotated object, cut from scenes of the split."""
        sources = []
        for attempt in range(shot * MAX_BACKGROUND_SCENES):
            if len(sources) == shot:
                break
            rng = np.random.default_rng(derive_seed(seed, "background", attempt))
            n_objects = int(rng.integers(1, min(3, len(pool)) + 1))
            names = [str(c) for c in rng.choice(pool, size=n_objects, replace=False)]
            scene = SceneService.render_scene(names, derive_seed(seed, "background-scene", attempt), generator)
            box = SceneService.background_box(scene, rng)
            if box is not None:
                sources.append((scene, box))
        if len(sources) < shot:
            raise SamplingError(
                f"found {len(sources)} of {shot} background crops",
                deficits={"background": shot - len(sources)},
            )
        return sources

    @staticmethod
    def build_query(scene, proposals, classes, size=32) -> QueryScene:
        """Crop every proposal and label it with the episode class of its best match."""
        matches = SceneService.label_proposals(proposals, scene)
        labels = np.array([classes.index(name) if name else 0 for name, _ in matches], dtype=np.int64)
        targets = np.zeros((len(proposals), 4))
        for r, (name, gt_index) in enumerate(matches):
            if name is not None:
                targets[r] = encode_boxes(proposals[r].box.to_list(), scene.boxes[gt_index].to_list())[0]
        crops = [SceneService.crop_image(scene.image, p.box, size) for p in proposals]
        return QueryScene(
            scene=scene,
            proposals=list(proposals),
            roi_crops=np.stack(crops) if crops else np.zeros((0, scene.image.shape[0], size, size)),
            roi_labels=labels,
            targets=targets,
            gt_labels=[classes.index(o.class_name) for o in scene.objects],
        )


@dataclass
class EpisodeForward:
    """Activations and losses of one episode, kept for the backward pass."""

    adapted: MRModule | None
    support_rows: np.ndarray
    support_counts: np.ndarray
    support_features: np.ndarray
    support_trace: BackboneTrace
    support_embed: EmbedTrace
    prototypes: np.ndarray
    query_features: np.ndarray
    query_trace: BackboneTrace
    query_embed: EmbedTrace
    query_embeddings: np.ndarray
    labels: np.ndarray
    sims: np.ndarray
    confidences: np.ndarray
    deltas: np.ndarray
    box_trace: BoxHeadTrace
    targets: np.ndarray
    gate: np.ndarray
    report: LossReport


class TrainingService:
    @staticmethod
    def inner_config(episode: Episode, config: TrainingConfig) -> InnerLoopConfig:
        return InnerLoopConfig(
            meta_lr=config.meta_lr,
            steps=config.inner_steps,
            label_perm=episode.label_perm,
            head_seeds=episode.head_seeds,
        )

    @staticmethod
    def adapt(model: FewShotDetector, episode: Episode, config: TrainingConfig):
        """
        Backbone features of the supports and the adapted MR clone.

        Returns (pooled support maps, rows, support features, backbone trace,
        adapted module or None without MR).
        """
        batch, rows, n_classes = stack_supports(episode.support)
        features, trace = BackboneService.forward(model, batch)
        pooled = maxpool2d(features, support_pool_window())
        adapted = None
        if model.mr_enabled:
            adapted = MRService.inner_adapt(
                model.mr,
                {c: pooled[rows == c] for c in range(n_classes)},
                TrainingService.inner_config(episode, config),
            )
        return pooled, rows, features, trace, adapted

    @staticmethod
    def forward_episode(model: FewShotDetector, episode: Episode, config: TrainingConfig) -> EpisodeForward:
        pooled_s, rows, features_s, trace_s, adapted = TrainingService.adapt(model, episode, config)

        embeddings_s, embed_s = MRService.embed_trace(pooled_s, adapted)
        built = MRService.build_prototypes(
            {c: embeddings_s[rows == c] for c in range(episode.way)}, metric_kind=model.metric_kind
        )
        prototypes = np.stack([p.vector for p in built])
        counts = np.array([p.k_used for p in built])

        if episode.n_rois == 0:
            raise EpisodeAbortError("episode has no query RoIs", data={"episode_seed": episode.seed})
        crops = np.concatenate([q.roi_crops for q in episode.queries])
        labels = np.concatenate([q.roi_labels for q in episode.queries])
        targets = np.concatenate([q.targets for q in episode.queries])

        features_q, trace_q = BackboneService.forward(model, crops)
        pooled_q = maxpool2d(features_q, support_pool_window())
        embeddings_q, embed_q = MRService.embed_trace(pooled_q, adapted)

        try:
            sims = metric_services.similarity_matrix(embeddings_q, prototypes, model.metric_kind)
        except DegenerateVectorError as e:
            raise EpisodeAbortError(f"degenerate embedding: {e.message}", data=e.data)
        confidences = np.stack([metric_services.temperature_softmax(row, model.alpha) for row in sims])
        l_cls = float(
            np.mean([metric_services.classification_loss(c, y) for c, y in zip(confidences, labels)])
        )

        deltas, box_trace = BoxHeadService.forward(features_q, model.box_conv, model.box_fc)
        gate = (labels > 0) & (1.0 - confidences[:, 0] > config.reg_gate)
        l_reg = float(smooth_l1_rows(deltas[gate] - targets[gate]).mean()) if gate.any() else 0.0

        report = LossReport.combine(
            l_cls, l_reg, config.lambda_, n_rois=len(labels), n_regressed=int(gate.sum())
        )
        if not np.isfinite([report.l_cls, report.l_reg, report.l_det]).all():
            raise EpisodeAbortError(
                "non-finite episode loss",
                data={"l_cls": report.l_cls, "l_reg": report.l_reg, "episode_seed": episode.seed},
            )
        return EpisodeForward(
            adapted=adapted,
            support_rows=rows,
            support_counts=counts,
            support_features=features_s,
            support_trace=trace_s,
            support_embed=embed_s,
            prototypes=prototypes,
            query_features=features_q,
            query_trace=trace_q,
            query_embed=embed_q,
            query_embeddings=embeddings_q,
            labels=labels,
            sims=sims,
            confidences=confidences,
            deltas=deltas,
            box_trace=box_trace,
            targets=targets,
            gate=gate,
            report=report,
        )

    @staticmethod
    def compute_gradients(model: FewShotDetector, episode: Episode, config: TrainingConfig, paths=ALL_PATHS):
        """
        Accumulate outer gradients into the model's buffers (callers zero them).

        ``paths`` selects the routes: "query" (RoI embeddings and the box
        head) and "support" (prototypes). Running the two separately and
        summing gives the same gradient as running both at once.
        """
        unknown = set(paths) - set(ALL_PATHS)
        if unknown:
            raise ValidationError(f"unknown gradient paths: {sorted(unknown)}")
        fwd = TrainingService.forward_episode(model, episode, config)
        adapted, window = fwd.adapted, support_pool_window()

        n_rois = len(fwd.labels)
        grad_sims = np.stack(
            [metric_services.loss_grad_sims(c, y, model.alpha) for c, y in zip(fwd.confidences, fwd.labels)]
        ) / n_rois
        grad_queries, grad_prototypes = metric_services.similarity_matrix_backward(
            fwd.query_embeddings, fwd.prototypes, grad_sims, model.metric_kind
        )

        if "query" in paths:
            grad = MRService.embed_backward(grad_queries, fwd.query_embed, adapted)
            grad_features = maxpool2d_backward(grad, fwd.query_features, window)
            if fwd.gate.any() and config.lambda_ > 0:
                grad_deltas = np.zeros_like(fwd.deltas)
                residual = fwd.deltas[fwd.gate] - fwd.targets[fwd.gate]
                grad_deltas[fwd.gate] = config.lambda_ * smooth_l1_grad(residual) / fwd.gate.sum()
                grad_features = grad_features + BoxHeadService.backward(
                    grad_deltas, fwd.box_trace, model.box_conv, model.box_fc
                )
            BackboneService.backward(model, grad_features, fwd.query_trace)

        if "support" in paths:
            rows, counts = fwd.support_rows, fwd.support_counts
            grad_supports = grad_prototypes[rows] / counts[rows][:, None]
            grad = MRService.embed_backward(grad_supports, fwd.support_embed, adapted)
            grad_features = maxpool2d_backward(grad, fwd.support_features, window)
            BackboneService.backward(model, grad_features, fwd.support_trace)

        if adapted is not None:
            # first order: gradients taken at the adapted parameters move the shared ones
            for shared, local in zip(model.mr.shared_layers(), adapted.shared_layers()):
                shared.grad_weights += local.grad_weights
                shared.grad_bias += local.grad_bias
        return fwd.report, fwd

    @staticmethod
    def outer_step(model: FewShotDetector, episode: Episode, config: TrainingConfig, lr) -> LossReport:
        """
        One outer update. A non-finite loss or gradient skips the step with no
        parameter change and returns a report flagged ``skipped``.
        """
        params = model.parameters()
        zero_grads(params)
        paths = ALL_PATHS if config.support_gradient else ("query",)
        try:
            report, _ = TrainingService.compute_gradients(model, episode, config, paths)
            sgd_step(params, lr)
        except (EpisodeAbortError, TrainingError, NonFiniteError) as e:
            zero_grads(params)
            logger.warning(
                f"Episode {episode.seed} skipped: {e.message}",
                extra={"episode_seed": episode.seed, "code": e.code, "data": e.data},
            )
            nan = float("nan")
            return LossReport(nan, nan, nan, config.lambda_, skipped=True)
        return report

    @staticmethod
    def learning_rate(config: TrainingConfig, step) -> float:
        if config.decay_policy == "none":
            return config.outer_lr
        if config.decay_policy == "multistep":
            decays = sum(1 for boundary in config.decay_steps if step >= boundary)
            return config.outer_lr * config.decay_gamma**decays
        return config.outer_lr * (config.decay_gamma if step >= config.decay_step else 1.0)

    @staticmethod
    def episode_seed(config: TrainingConfig, step) -> int:
        return derive_seed(config.seed, "episode", step)

    @staticmethod
    def checkpoint_path(out_dir, step) -> Path:
        return Path(out_dir) / f"checkpoint-{step:06d}.json"

    @staticmethod
    def train(config: TrainingConfig, dataset: ToyDataset, out_dir, resume_from=None) -> TrainingRun:
        """
        Run ``epochs * iters`` outer steps on base-split episodes.

        Writes a JSON-lines metrics log and a checkpoint every
        ``checkpoint_interval`` steps and at the end. With ``resume_from``
        the run continues at the step stored in that checkpoint; metrics
        lines from later steps are dropped first.
        """
        out_dir = Path(out_dir)
        model = FewShotDetector.initialise(config, derive_seed(config.seed, "init"))
        start = 0
        if resume_from is not None:
            meta = load_checkpoint(model.parameters(), resume_from)
            start = int(meta.get("step", 0))
            logger.info(f"Resuming from {resume_from} at step {start}")

        metrics_path = out_dir / "metrics.jsonl"
        kept = TrainingService._metrics_before(metrics_path, start) if start else []
        checkpoints, skipped = [], 0
        total = config.total_steps
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            log = metrics_path.open("w")
        except OSError as e:
            raise ArtifactIOError(f"Could not open metrics log ({e.strerror})", path=metrics_path)

        with log:
            log.writelines(kept)
            for step in range(start, total):
                seed = TrainingService.episode_seed(config, step)
                lr = TrainingService.learning_rate(config, step)
                with track_duration("episode", step=step, episode_seed=seed):
                    episode = EpisodeService.sample_episode(
                        dataset,
                        config.way,
                        config.shot,
                        config.n_query,
                        seed,
                        split="base",
                        n_bg=config.n_bg_proposals,
                        jitter=config.jitter,
                    )
                    report = TrainingService.outer_step(model, episode, config, lr)

                if report.skipped:
                    skipped += 1
                else:
                    record = {
                        "step": step,
                        "l_cls": report.l_cls,
                        "l_reg": report.l_reg,
                        "l_det": report.l_det,
                        "lr": lr,
                        "episode_seed": seed,
                    }
                    log.write(json.dumps(record, sort_keys=True) + "\n")

                done = step + 1
                if done % config.checkpoint_interval == 0 or done == total:
                    log.flush()
                    checkpoints.append(
                        save_checkpoint(
                            TrainingService.checkpoint_path(out_dir, done),
                            model.parameters(),
                            meta={"step": done, "config": config.to_dict()},
                        )
                    )
                if done % config.iters == 0:
                    logger.info(f"Epoch {done // config.iters}/{config.epochs} done (lr {lr:g}, skipped {skipped})")

        return TrainingRun(
            model=model,
            checkpoints=checkpoints,
            metrics_path=metrics_path,
            steps_run=total - start,
            skipped=skipped,
        )

    @staticmethod
    def _metrics_before(path, step):
        try:
            lines = path.read_text().splitlines(keepends=True) if path.exists() else []
        except OSError as e:
            raise ArtifactIOError(f"Could not read metrics log ({e.strerror})", path=path)
        return [line for line in lines if line.strip() and json.loads(line)["step"] < step]

    @staticmethod
    def load_model(checkpoint, config: TrainingConfig = None) -> tuple[FewShotDetector, TrainingConfig]:
        """
        Rebuild a detector from a checkpoint. The architecture comes from the
        config stored in the checkpoint unless ``config`` is given.
        """
        _, meta = read_checkpoint(checkpoint)
        if config is None:
            config = TrainingConfig.model_validate(meta.get("config", {}))
        model = FewShotDetector.initialise(config, derive_seed(config.seed, "init"))
        load_checkpoint(model.parameters(), checkpoint)
        return model, config
