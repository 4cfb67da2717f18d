"""
Meta-representation embedding, prototypes and the episodic inner loop.

The inner loop adapts a clone of the MR parameters on the episode's support
set only: supports are embedded, averaged into one prototype per class, and
each prototype is classified by ``fc_head`` against the label the episode's
permutation assigned to it. Query RoIs are embedded with the adapted
parameters and classified by similarity to the recomputed prototypes, never
by ``fc_head``.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from apps.meta.models import InnerLoopConfig, MRModule, Prototype
from apps.metric import services as metric_services
from apps.metric.models import MetricKind
from apps.tensorcore.layers import (
    avgpool_global,
    avgpool_global_backward,
    conv2d_backward,
    conv2d_forward,
    fc_backward,
    fc_forward,
    relu,
    relu_backward,
)
from apps.tensorcore.services import sgd_step, zero_grads
from core.utils.errors import (
    ArtifactIOError,
    ConfigurationError,
    EpisodeAbortError,
    NonFiniteError,
    SamplingError,
    TrainingError,
)

logger = logging.getLogger("fsod.meta")

CONV1_STRIDE = 2
CONV2_STRIDE = 1
PAD = 1
EMBEDDING_ROLES = ("support-prototype", "query-roi")


@dataclass
class EmbedTrace:
    """Saved activations of one batched embedding pass."""

    input: np.ndarray
    pre1: np.ndarray = None
    act1: np.ndarray = None
    pre2: np.ndarray = None
    act2: np.ndarray = None
    with_mr: bool = True


def stack_supports(support_feature_maps):
    """
    Flatten {class index: [K, C, h, w]} into one batch.

    Returns (batch, class index per row, number of classes). Class indices
    must be 0..N-1.
    """
    classes = sorted(support_feature_maps)
    if classes != list(range(len(classes))):
        raise ConfigurationError(f"support classes must be 0..N-1, got {classes}")
    empty = {c: 1 for c in classes if len(support_feature_maps[c]) == 0}
    if empty:
        raise SamplingError(f"support classes without examples: {sorted(empty)}", deficits=empty)
    batch = np.concatenate([np.asarray(support_feature_maps[c], dtype=np.float64) for c in classes])
    rows = np.concatenate([np.full(len(support_feature_maps[c]), c) for c in classes])
    return batch, rows, len(classes)


def class_means(embeddings, rows, n_classes):
    means = np.stack([embeddings[rows == c].mean(axis=0) for c in range(n_classes)])
    counts = np.bincount(rows, minlength=n_classes)
    return means, counts


class MRService:
    @staticmethod
    def embed_trace(feature_maps, mr: MRModule = None):
        """
        Batched embedding [B, C, h, w] -> [B, D] with saved activations.

        ``mr=None`` is the ablation without the MR module: global average
        pooling of the (max-pooled) backbone features.
        """
        x = np.asarray(feature_maps, dtype=np.float64)
        if mr is None:
            return avgpool_global(x), EmbedTrace(input=x, with_mr=False)
        pre1 = conv2d_forward(x, mr.conv1, stride=CONV1_STRIDE, pad=PAD)
        act1 = relu(pre1)
        pre2 = conv2d_forward(act1, mr.conv2, stride=CONV2_STRIDE, pad=PAD)
        act2 = relu(pre2)
        return avgpool_global(act2), EmbedTrace(x, pre1, act1, pre2, act2)

    @staticmethod
    def embed(feature_map, mr: MRModule = None):
        """Embedding of one feature map [d, h, w] (or a batch)."""
        single = np.ndim(feature_map) == 3
        embeddings, _ = MRService.embed_trace(
            np.asarray(feature_map)[None] if single else feature_map, mr
        )
        return embeddings[0] if single else embeddings

    @staticmethod
    def embed_backward(grad_embeddings, trace: EmbedTrace, mr: MRModule = None):
        """Accumulate conv1/conv2 gradients and return d(loss)/d(feature maps)."""
        if not trace.with_mr:
            return avgpool_global_backward(grad_embeddings, trace.input.shape)
        grad = avgpool_global_backward(grad_embeddings, trace.act2.shape)
        grad = relu_backward(grad, trace.pre2)
        grad = conv2d_backward(grad, trace.act1, mr.conv2, stride=CONV2_STRIDE, pad=PAD)
        grad = relu_backward(grad, trace.pre1)
        return conv2d_backward(grad, trace.input, mr.conv1, stride=CONV1_STRIDE, pad=PAD)

    @staticmethod
    def build_prototypes(support_embeddings, metric_kind=None, epsilon=1e-12) -> list[Prototype]:
        """
        Intra-class mean of support embeddings, one Prototype per class.

        With ``metric_kind`` set, a prototype that is degenerate for that
        distance (constant for Pearson, zero for cosine) aborts the episode.
        """
        prototypes = []
        for class_index in sorted(support_embeddings):
            vectors = np.asarray(support_embeddings[class_index], dtype=np.float64)
            if vectors.size == 0:
                raise SamplingError(
                    f"class {class_index} has no support embeddings",
                    deficits={class_index: 1},
                )
            vectors = vectors.reshape(len(vectors), -1)
            prototypes.append(Prototype(class_index, vectors.mean(axis=0), len(vectors)))

        if metric_kind is not None:
            centered = MetricKind(metric_kind) is MetricKind.PEARSON
            for prototype in prototypes:
                v = prototype.vector - prototype.vector.mean() if centered else prototype.vector
                if np.linalg.norm(v) <= epsilon:
                    raise EpisodeAbortError(
                        f"prototype of class {prototype.class_index} is degenerate",
                        data={"class_index": prototype.class_index},
                    )
        return prototypes

    @staticmethod
    def inner_loss_and_grads(mr: MRModule, batch, rows, label_perm, with_grads=True) -> float:
        """
        Inner-loop cross-entropy of the support prototypes under fc_head.

        Prototype ``n`` targets label ``label_perm[n]``; the loss is the mean
        over the N prototypes. Gradients accumulate into ``mr`` when
        ``with_grads`` is set.
        """
        n_classes = len(label_perm)
        embeddings, trace = MRService.embed_trace(batch, mr)
        means, counts = class_means(embeddings, rows, n_classes)
        logits = fc_forward(means, mr.fc_head)

        probs = np.stack([metric_services.temperature_softmax(row, 1.0) for row in logits])
        loss = float(
            np.mean([metric_services.classification_loss(probs[n], label_perm[n]) for n in range(n_classes)])
        )
        if not with_grads:
            return loss

        grad_logits = probs.copy()
        grad_logits[np.arange(n_classes), list(label_perm)] -= 1.0
        grad_logits /= n_classes
        grad_means = fc_backward(grad_logits, means, mr.fc_head)
        grad_embeddings = grad_means[rows] / counts[rows][:, None]
        MRService.embed_backward(grad_embeddings, trace, mr)
        return loss

    @staticmethod
    def inner_adapt(mr: MRModule, support_feature_maps, config: InnerLoopConfig) -> MRModule:
        """
        Adapt a clone of ``mr`` to the episode's supports.

        ``mr`` itself is never modified. The returned clone records the inner
        loss before every step and after the last one in ``inner_losses``.
        """
        batch, rows, n_classes = stack_supports(support_feature_maps)
        if n_classes != len(config.label_perm):
            raise ConfigurationError(
                f"{n_classes} support classes but label_perm covers {len(config.label_perm)}"
            )

        adapted = mr.clone()
        adapted.reset_head(config.label_perm, config.head_seeds)

        losses = []
        for step in range(config.steps + 1):
            final = step == config.steps
            zero_grads(adapted.layers())
            try:
                loss = MRService.inner_loss_and_grads(
                    adapted, batch, rows, config.label_perm, with_grads=not final
                )
                if not np.isfinite(loss):
                    raise NonFiniteError(f"inner loss is {loss}")
                losses.append(loss)
                if not final:
                    sgd_step(adapted.layers(), config.meta_lr)
            except (NonFiniteError, TrainingError) as e:
                logger.warning(
                    f"Inner loop aborted at step {step}: {e.message}",
                    extra={"step": step, "losses": losses},
                )
                raise EpisodeAbortError(
                    f"inner loop diverged at step {step}: {e.message}",
                    data={"step": step, "losses": losses},
                )

        zero_grads(adapted.layers())
        adapted.inner_losses = losses
        logger.debug(f"Inner loop: loss {losses[0]:.4f} -> {losses[-1]:.4f} over {config.steps} steps")
        return adapted

    @staticmethod
    def reconstruct_queries(adapted: MRModule, roi_feature_maps):
        """Embed RoI feature maps with the adapted parameters; fc_head is not used."""
        if len(roi_feature_maps) == 0:
            dim = adapted.embed_dim if adapted is not None else 0
            return np.zeros((0, dim))
        embeddings, _ = MRService.embed_trace(np.asarray(roi_feature_maps), adapted)
        return embeddings

    @staticmethod
    def support_prototypes(adapted: MRModule, support_feature_maps, metric_kind=None):
        """Prototypes recomputed from the supports with the adapted parameters."""
        batch, rows, n_classes = stack_supports(support_feature_maps)
        embeddings, _ = MRService.embed_trace(batch, adapted)
        return MRService.build_prototypes(
            {c: embeddings[rows == c] for c in range(n_classes)}, metric_kind=metric_kind
        )


class EmbeddingExportService:
    """CSV tables of prototypes and query embeddings for external visualisation."""

    HEADER = ("episode_id", "role", "class_index")

    @staticmethod
    def rows_for_episode(episode_id, prototypes, query_embeddings, query_labels):
        for prototype in prototypes:
            yield episode_id, "support-prototype", prototype.class_index, prototype.vector
        for vector, label in zip(query_embeddings, query_labels):
            yield episode_id, "query-roi", int(label), vector

    @staticmethod
    def export_embeddings(path, rows) -> Path:
        path = Path(path)
        rows = list(rows)
        dim = len(rows[0][3]) if rows else 0
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", newline="") as handle:
                writer = csv.writer(handle)
                writer.writerow([*EmbeddingExportService.HEADER, *(f"e{i}" for i in range(dim))])
                for episode_id, role, class_index, vector in rows:
                    if role not in EMBEDDING_ROLES:
                        raise ConfigurationError(f"unknown embedding role {role!r}")
                    writer.writerow([episode_id, role, class_index, *(repr(float(x)) for x in vector)])
        except OSError as e:
            raise ArtifactIOError(f"Could not write embeddings ({e.strerror})", path=path)
        logger.info(f"Exported {len(rows)} embeddings to {path}")
        return path
