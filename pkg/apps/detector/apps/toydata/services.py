import logging
from pathlib import Path

import numpy as np
from pydantic import ValidationError as PydanticValidationError

from apps.toydata.models import (
    Box,
    DatasetManifest,
    GeneratorParams,
    Proposal,
    ProposalSource,
    SceneObject,
    ToyDataset,
    ToyScene,
)
from apps.toydata.shapes import SHAPES, render_mask
from core.utils.errors import (
    ArtifactIOError,
    ConfigurationError,
    CropError,
    RenderError,
    ValidationError,
    format_pydantic_errors,
)
from core.utils.validators import validate_fraction

logger = logging.getLogger("fsod.toydata")

JITTER_COPIES = 3
JITTER_MIN_IOU = 0.5
BACKGROUND_MAX_IOU = 0.3
SUPPORT_BACKGROUND_MAX_IOU = 0.1
MIN_CROP_SIDE = 4
BG_SIDE_RANGE = (12, 40)
REJECTION_ATTEMPTS = 200


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes."""
    inter_w = min(a.x2, b.x2) - max(a.x, b.x)
    inter_h = min(a.y2, b.y2) - max(a.y, b.y)
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    inter = inter_w * inter_h
    return float(inter / (a.area + b.area - inter))


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise IoU, [len(a), len(b)]."""
    a = np.array([[b.x, b.y, b.x2, b.y2] for b in boxes_a], dtype=np.float64).reshape(-1, 4)
    b = np.array([[b.x, b.y, b.x2, b.y2] for b in boxes_b], dtype=np.float64).reshape(-1, 4)
    inter_w = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    inter_h = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = inter_w * inter_h
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _max_iou(box, others) -> float:
    return max((iou(box, other) for other in others), default=0.0)


def _random_box(scene: ToyScene, rng) -> Box:
    """Uniform box with sides in BG_SIDE_RANGE, capped to the scene extent."""
    high = min(BG_SIDE_RANGE[1], scene.width, scene.height)
    low = min(BG_SIDE_RANGE[0], high)
    w, h = rng.integers(low, high + 1, size=2)
    x = rng.integers(0, scene.width - w + 1)
    y = rng.integers(0, scene.height - h + 1)
    return Box(float(x), float(y), float(w), float(h))


class SceneService:
    """Scene rendering, proposal generation and cropping."""

    @staticmethod
    def render_scene(classes, seed, generator: GeneratorParams = None) -> ToyScene:
        """
        Render ``classes`` (one object each) over uniform noise.

        Objects are placed one by one; a placement whose tight box overlaps an
        earlier object with IoU above the overlap limit is redrawn, and the
        render fails after ``placement_attempts`` draws for a single object.
        """
        generator = generator or GeneratorParams()
        classes = list(classes)
        if not 1 <= len(classes) <= generator.max_objects:
            raise ValidationError(
                f"a scene holds 1 to {generator.max_objects} objects, got {len(classes)}"
            )
        unknown = sorted(set(classes) - set(SHAPES))
        if unknown:
            raise ValidationError(f"unknown shape classes: {unknown}")

        rng = np.random.default_rng(seed)
        size = generator.image_size
        image = rng.uniform(0.0, generator.noise, size=(generator.channels, size, size))

        objects = []
        for class_name in classes:
            for _ in range(generator.placement_attempts):
                extent = int(rng.integers(generator.min_object, generator.max_object + 1))
                mask = render_mask(class_name, extent, rng)
                top, left = rng.integers(0, size - extent + 1, size=2)
                rows = np.flatnonzero(mask.any(axis=1))
                cols = np.flatnonzero(mask.any(axis=0))
                box = Box(
                    float(left + cols[0]),
                    float(top + rows[0]),
                    float(cols[-1] - cols[0] + 1),
                    float(rows[-1] - rows[0] + 1),
                )
                if _max_iou(box, [o.box for o in objects]) <= generator.overlap_limit:
                    break
            else:
                raise RenderError(
                    f"could not place {class_name} after {generator.placement_attempts} attempts",
                    data={"seed": int(seed), "classes": classes},
                )

            colour = rng.uniform(0.5, 1.0, size=generator.channels)
            region = image[:, top : top + extent, left : left + extent]
            region[:, mask] = colour[:, None]
            objects.append(SceneObject(class_name, box))

        return ToyScene(image=image, objects=objects, seed=int(seed))

    @staticmethod
    def make_proposals(scene: ToyScene, n_bg=4, jitter=0.2, seed=0) -> list[Proposal]:
        """
        Three jittered copies of every ground-truth box followed by ``n_bg``
        random background boxes.

        Jittered copies keep IoU >= 0.5 with their source box; a copy that
        cannot be drawn within the attempt budget falls back to the source box.
        Background boxes overlap no ground truth with IoU >= 0.3.
        """
        validate_fraction(jitter, "jitter", upper=0.5)
        if n_bg < 0:
            raise ValidationError(f"n_bg must be >= 0, got {n_bg}")

        rng = np.random.default_rng(seed)
        proposals = []
        for gt in scene.boxes:
            for _ in range(JITTER_COPIES):
                box = gt if jitter == 0 else SceneService._jittered(gt, jitter, scene, rng)
                proposals.append(Proposal(box, ProposalSource.JITTERED_GT))

        gts = scene.boxes
        for _ in range(n_bg):
            for _ in range(REJECTION_ATTEMPTS):
                box = _random_box(scene, rng)
                if _max_iou(box, gts) < BACKGROUND_MAX_IOU:
                    proposals.append(Proposal(box, ProposalSource.RANDOM_BG))
                    break
            else:
                logger.warning(f"No background proposal found for scene {scene.seed}; skipped")
        return proposals

    @staticmethod
    def _jittered(gt, jitter, scene, rng):
        cx, cy = gt.centre
        for _ in range(REJECTION_ATTEMPTS):
            dx, dy, sw, sh = rng.uniform(-jitter, jitter, size=4)
            w, h = gt.w * (1.0 + sw), gt.h * (1.0 + sh)
            x, y = cx + dx * gt.w - w / 2.0, cy + dy * gt.h - h / 2.0
            clipped_w = min(scene.width, x + w) - max(0.0, x)
            clipped_h = min(scene.height, y + h) - max(0.0, y)
            if clipped_w < MIN_CROP_SIDE or clipped_h < MIN_CROP_SIDE:
                continue
            box = Box(x, y, w, h).clip(scene.width, scene.height)
            if iou(box, gt) >= JITTER_MIN_IOU:
                return box
        return gt

    @staticmethod
    def crop_index_map(start, extent, out, limit):
        """Source pixel for each of ``out`` output pixels: floor(start + (i + 0.5) * extent / out)."""
        index = np.floor(start + (np.arange(out) + 0.5) * extent / out).astype(np.int64)
        return np.clip(index, int(np.floor(start)), limit - 1)

    @staticmethod
    def crop_image(image, box: Box, size=32) -> np.ndarray:
        height, width = image.shape[1:]
        if box.w < MIN_CROP_SIDE or box.h < MIN_CROP_SIDE:
            raise CropError(f"crop box {box.to_list()} is smaller than {MIN_CROP_SIDE} px")
        if not box.inside(width, height):
            raise CropError(f"crop box {box.to_list()} leaves the {width}x{height} image")
        rows = SceneService.crop_index_map(box.y, box.h, size, height)
        cols = SceneService.crop_index_map(box.x, box.w, size, width)
        return np.ascontiguousarray(image[:, rows[:, None], cols[None, :]])

    @staticmethod
    def crop_support(scene: ToyScene, box: Box, size=32) -> np.ndarray:
        """Nearest-neighbour crop of ``box`` resized to [C, size, size]."""
        return SceneService.crop_image(scene.image, box, size)

    @staticmethod
    def background_box(scene: ToyScene, rng, max_iou=SUPPORT_BACKGROUND_MAX_IOU):
        """A random box overlapping no annotated object with IoU > ``max_iou``, or None."""
        for _ in range(REJECTION_ATTEMPTS):
            box = _random_box(scene, rng)
            if _max_iou(box, scene.boxes) <= max_iou:
                return box
        return None

    @staticmethod
    def label_proposals(proposals, scene: ToyScene, threshold=JITTER_MIN_IOU):
        """
        Match each proposal to its best ground-truth box.

        Returns (class_name or None, gt index or -1) per proposal; proposals
        whose best IoU is below ``threshold`` are background.
        """
        if not proposals:
            return []
        overlaps = iou_matrix([p.box for p in proposals], scene.boxes)
        labels = []
        for row in overlaps:
            best = int(np.argmax(row))
            if row[best] >= threshold:
                labels.append((scene.objects[best].class_name, best))
            else:
                labels.append((None, -1))
        return labels


class ManifestService:
    @staticmethod
    def load_manifest(path) -> ToyDataset:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ArtifactIOError(f"Could not read dataset manifest ({e.strerror})", path=path)
        try:
            manifest = DatasetManifest.model_validate_json(text)
        except PydanticValidationError as e:
            raise ConfigurationError(
                f"Invalid dataset manifest {path}: " + "; ".join(format_pydantic_errors(e))
            )
        logger.info(f"Loaded dataset manifest {path} ({len(manifest.classes)} classes)")
        return ToyDataset(manifest)

    @staticmethod
    def dump_manifest(dataset: ToyDataset, path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(dataset.manifest.model_dump_json(indent=2))
        except OSError as e:
            raise ArtifactIOError(f"Could not write dataset manifest ({e.strerror})", path=path)
        return path
