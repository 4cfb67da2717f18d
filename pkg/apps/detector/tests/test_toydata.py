import json

import numpy as np
import pytest
from pydantic import ValidationError as PydanticValidationError

from apps.toydata.models import Box, DatasetManifest, GeneratorParams, ProposalSource, ToyDataset
from apps.toydata.services import ManifestService, SceneService, iou
from apps.toydata.shapes import SHAPES, render_mask
from core.utils.errors import ArtifactIOError, ConfigurationError, CropError, RenderError, ValidationError


@pytest.fixture
def dataset():
    return ToyDataset()


@pytest.fixture
def scene():
    return SceneService.render_scene(["disk", "cross", "triangle"], seed=5)


class TestShapes:
    def test_registry_holds_twelve_classes(self):
        assert len(SHAPES) == 12

    @pytest.mark.parametrize("name", sorted(SHAPES))
    def test_masks_are_non_empty(self, name):
        for size in (14, 22, 30):
            mask = render_mask(name, size, np.random.default_rng(size))
            assert mask.shape == (size, size)
            assert mask.any()


class TestBoxes:
    def test_identical_boxes(self):
        assert iou(Box(1, 1, 4, 4), Box(1, 1, 4, 4)) == 1.0

    def test_disjoint_boxes(self):
        assert iou(Box(0, 0, 2, 2), Box(5, 5, 2, 2)) == 0.0

    def test_half_offset_unit_squares(self):
        assert iou(Box(0, 0, 1, 1), Box(0.5, 0, 1, 1)) == pytest.approx(1 / 3)

    def test_rejects_non_positive_extent(self):
        with pytest.raises(ValidationError):
            Box(0, 0, 0, 3)

    def test_rejects_non_finite_corner(self):
        with pytest.raises(ValidationError):
            Box(float("nan"), 0, 3, 3)

    def test_clip(self):
        assert Box(-2, 90, 10, 10).clip(96, 96).to_list() == [0.0, 90.0, 8.0, 6.0]


class TestDataset:
    def test_default_split_is_disjoint(self, dataset):
        assert len(dataset.split("base")) == 8
        assert len(dataset.split("novel")) == 4
        assert not set(dataset.split("base")) & set(dataset.split("novel"))

    def test_overlapping_split_rejected(self):
        with pytest.raises(PydanticValidationError):
            DatasetManifest(base=["disk", "ring"], novel=["ring"])

    def test_unknown_split_name(self, dataset):
        with pytest.raises(ValidationError):
            dataset.split("val")

    def test_unknown_generator_key(self):
        with pytest.raises(PydanticValidationError):
            GeneratorParams(image_size=96, colour="red")

    def test_manifest_round_trip(self, tmp_path, dataset):
        path = ManifestService.dump_manifest(dataset, tmp_path / "manifest.json")
        loaded = ManifestService.load_manifest(path)
        assert loaded.manifest == dataset.manifest

    def test_invalid_manifest(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"base": ["disk"], "novel": ["disk"]}))
        with pytest.raises(ConfigurationError):
            ManifestService.load_manifest(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ArtifactIOError):
            ManifestService.load_manifest(tmp_path / "absent.json")


class TestRenderScene:
    def test_same_seed_same_image(self):
        first = SceneService.render_scene(["ring", "tee"], seed=9)
        second = SceneService.render_scene(["ring", "tee"], seed=9)
        assert first.image.tobytes() == second.image.tobytes()
        assert first.boxes == second.boxes

    def test_object_count(self, scene):
        assert 1 <= len(scene.objects) <= 4
        assert [o.class_name for o in scene.objects] == ["disk", "cross", "triangle"]

    def test_boxes_inside_image(self, scene):
        assert all(box.inside(scene.width, scene.height) for box in scene.boxes)

    def test_boxes_are_tight(self):
        # one object on a zero-noise background: painted pixels are exactly the shape
        generator = GeneratorParams(noise=0.0)
        for seed in range(10):
            scene = SceneService.render_scene(["diamond"], seed=seed, generator=generator)
            rows = np.flatnonzero(scene.image.any(axis=(0, 2)))
            cols = np.flatnonzero(scene.image.any(axis=(0, 1)))
            box = scene.boxes[0]
            assert abs(box.x - cols[0]) <= 1 and abs(box.x2 - (cols[-1] + 1)) <= 1
            assert abs(box.y - rows[0]) <= 1 and abs(box.y2 - (rows[-1] + 1)) <= 1

    def test_too_many_objects(self):
        with pytest.raises(ValidationError):
            SceneService.render_scene(["disk"] * 5, seed=0)

    def test_overcrowded_scene(self):
        generator = GeneratorParams(image_size=32, min_object=30, max_object=30, placement_attempts=5)
        with pytest.raises(RenderError):
            SceneService.render_scene(["disk", "disk"], seed=0, generator=generator)


class TestProposals:
    def test_zero_jitter_copies_ground_truth(self, scene):
        proposals = SceneService.make_proposals(scene, n_bg=0, jitter=0.0, seed=1)
        assert [p.box for p in proposals] == [box for box in scene.boxes for _ in range(3)]

    def test_jittered_overlap_source(self, scene):
        for seed in range(5):
            proposals = SceneService.make_proposals(scene, n_bg=4, jitter=0.3, seed=seed)
            jittered = [p for p in proposals if p.source is ProposalSource.JITTERED_GT]
            assert len(jittered) == 3 * len(scene.boxes)
            for index, proposal in enumerate(jittered):
                assert iou(proposal.box, scene.boxes[index // 3]) >= 0.5

    def test_background_avoids_ground_truth(self, scene):
        for seed in range(5):
            proposals = SceneService.make_proposals(scene, n_bg=6, seed=seed)
            background = [p for p in proposals if p.source is ProposalSource.RANDOM_BG]
            for proposal in background:
                assert all(iou(proposal.box, gt) < 0.3 for gt in scene.boxes)

    def test_jitter_out_of_range(self, scene):
        with pytest.raises(ValidationError):
            SceneService.make_proposals(scene, jitter=0.8)

    def test_labels_follow_best_match(self, scene):
        proposals = SceneService.make_proposals(scene, n_bg=3, jitter=0.0, seed=2)
        labels = SceneService.label_proposals(proposals, scene)
        assert labels[0] == ("disk", 0)
        assert all(label == (None, -1) for label in labels[-3:])


class TestCrops:
    def test_full_image_crop(self, scene):
        crop = SceneService.crop_support(scene, Box(0, 0, 96, 96))
        np.testing.assert_array_equal(crop, scene.image[:, 1::3, 1::3])

    def test_crop_is_deterministic(self, scene):
        box = scene.boxes[0]
        np.testing.assert_array_equal(SceneService.crop_support(scene, box), SceneService.crop_support(scene, box))

    def test_crop_shape(self, scene):
        assert SceneService.crop_support(scene, scene.boxes[1]).shape == (3, 32, 32)

    def test_matches_index_map(self, scene):
        box = Box(10.5, 20.0, 17.0, 9.0)
        crop = SceneService.crop_image(scene.image, box, 32)
        for i in range(32):
            for j in range(32):
                row = min(int(np.floor(20.0 + (i + 0.5) * 9.0 / 32)), 95)
                col = min(int(np.floor(10.5 + (j + 0.5) * 17.0 / 32)), 95)
                np.testing.assert_array_equal(crop[:, i, j], scene.image[:, row, col])

    def test_tiny_box_rejected(self, scene):
        with pytest.raises(CropError):
            SceneService.crop_image(scene.image, Box(0, 0, 2, 10))

    def test_box_outside_image_rejected(self, scene):
        with pytest.raises(CropError):
            SceneService.crop_image(scene.image, Box(90, 90, 10, 10))

    def test_background_box_avoids_objects(self, scene):
        rng = np.random.default_rng(0)
        for _ in range(10):
            box = SceneService.background_box(scene, rng)
            if box is not None:
                assert all(iou(box, gt) <= 0.1 for gt in scene.boxes)


class TestSmallImages:
    @pytest.fixture
    def small_generator(self):
        return GeneratorParams(image_size=36, min_object=10, max_object=16)

    def test_random_boxes_fit_the_image(self, small_generator):
        for seed in range(10):
            scene = SceneService.render_scene(["disk"], seed=seed, generator=small_generator)
            proposals = SceneService.make_proposals(scene, n_bg=4, seed=seed)
            assert all(p.box.inside(scene.width, scene.height) for p in proposals)
            box = SceneService.background_box(scene, np.random.default_rng(seed))
            assert box is None or box.inside(scene.width, scene.height)

    def test_episode_sampling(self, small_generator):
        from apps.episodic.services import EpisodeService

        dataset = ToyDataset(DatasetManifest(generator=small_generator))
        episode = EpisodeService.sample_episode(dataset, 3, 2, 1, seed=0)
        assert episode.support[0].shape == (2, 3, 32, 32)
        assert all(q.scene.width == 36 for q in episode.queries)
