from django.core.management.base import BaseCommand

from apps.episodic.models import TrainingConfig
from apps.episodic.services import TrainingService
from apps.evaluation.cli import PRESETS, apply_preset, emit, override_metric, resolve_dataset
from apps.evaluation.services import EvaluationService
from apps.metric.models import MetricKind
from core.utils.errors import command_exception_handler


class Command(BaseCommand):
    help = "Evaluate a checkpoint on novel-class episodes (AP50/AP75)"
    requires_system_checks = []

    def add_arguments(self, parser):
        parser.add_argument("--checkpoint", required=True)
        parser.add_argument("--config", help="Run configuration; defaults to the one stored in the checkpoint")
        parser.add_argument("--split", default="novel", choices=["base", "novel", "all"])
        parser.add_argument("--way", type=int)
        parser.add_argument("--shot", type=int)
        parser.add_argument("--episodes", type=int, default=100, help="Episodes per seed group")
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--score-threshold", type=float)
        parser.add_argument("--metric", choices=[kind.value for kind in MetricKind])
        parser.add_argument("--no-mr", action="store_true", help="Drop the MR module after loading")
        parser.add_argument("--workers", type=int)
        parser.add_argument("--seed-groups", type=int)
        parser.add_argument("--preset", default="default", choices=sorted(PRESETS))
        parser.add_argument("--out")

    @command_exception_handler
    def handle(self, *args, **options):
        config = TrainingConfig.load(options["config"]) if options["config"] else None
        model, config = TrainingService.load_model(options["checkpoint"], config)
        dataset = resolve_dataset(config, options["config"])

        config = override_metric(config, options["metric"])
        config, score_threshold = apply_preset(config, options["preset"], options["score_threshold"])
        model.metric_kind = MetricKind(config.metric_kind)
        if options["no_mr"]:
            model.mr = None

        result = EvaluationService.run_evaluation(
            model,
            config,
            dataset,
            n_episodes=options["episodes"],
            seed=options["seed"],
            way=options["way"],
            shot=options["shot"],
            split=options["split"],
            score_threshold=score_threshold,
            seed_groups=options["seed_groups"],
            workers=options["workers"],
        )
        payload = result.to_dict()
        payload["checkpoint"] = str(options["checkpoint"])
        emit(self, payload, options["out"])
