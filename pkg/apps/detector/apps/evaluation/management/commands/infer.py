from django.core.management.base import BaseCommand

from apps.episodic.models import TrainingConfig
from apps.episodic.services import TrainingService
from apps.evaluation.cli import PRESETS, apply_preset, emit, override_metric, resolve_dataset
from apps.evaluation.services import InferenceService
from apps.metric.models import MetricKind
from core.utils.errors import command_exception_handler


class Command(BaseCommand):
    help = "Dump scenes, proposals, similarity rows and detections for one episode"
    requires_system_checks = []

    def add_arguments(self, parser):
        parser.add_argument("--checkpoint", required=True)
        parser.add_argument("--config")
        parser.add_argument("--seed", type=int, default=0, help="Episode seed")
        parser.add_argument("--split", default="novel", choices=["base", "novel", "all"])
        parser.add_argument("--way", type=int)
        parser.add_argument("--shot", type=int)
        parser.add_argument("--score-threshold", type=float)
        parser.add_argument("--metric", choices=[kind.value for kind in MetricKind])
        parser.add_argument("--preset", default="default", choices=sorted(PRESETS))
        parser.add_argument("--embeddings", help="Also write prototype and RoI embeddings as CSV")
        parser.add_argument("--out")

    @command_exception_handler
    def handle(self, *args, **options):
        config = TrainingConfig.load(options["config"]) if options["config"] else None
        model, config = TrainingService.load_model(options["checkpoint"], config)
        dataset = resolve_dataset(config, options["config"])

        config = override_metric(config, options["metric"])
        config, score_threshold = apply_preset(config, options["preset"], options["score_threshold"])
        model.metric_kind = MetricKind(config.metric_kind)

        dump = InferenceService.infer(
            model,
            config,
            dataset,
            seed=options["seed"],
            way=options["way"],
            shot=options["shot"],
            split=options["split"],
            score_threshold=score_threshold,
            embeddings_path=options["embeddings"],
        )
        emit(self, dump, options["out"])
