import logging

from django.conf import settings
from django.core.management.base import BaseCommand

from apps.episodic.models import TrainingConfig
from apps.episodic.services import TrainingService
from apps.evaluation.cli import emit, resolve_dataset
from core.utils.errors import command_exception_handler

logger = logging.getLogger("fsod.training")


class Command(BaseCommand):
    help = "Meta-train the detector on base-class episodes"
    requires_system_checks = []

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True, help="Run configuration JSON")
        parser.add_argument("--out", help="Output directory (default: FSOD_ARTIFACTS_DIR/train)")
        parser.add_argument("--resume", help="Checkpoint to resume from")
        parser.add_argument("--seed", type=int, help="Override the configured seed")

    @command_exception_handler
    def handle(self, *args, **options):
        config = TrainingConfig.load(options["config"])
        if options["seed"] is not None:
            config = TrainingConfig.model_validate({**config.to_dict(), "seed": options["seed"]})
        dataset = resolve_dataset(config, options["config"])
        out_dir = options["out"] or settings.FSOD_ARTIFACTS_DIR / "train"

        logger.info(f"Training for {config.total_steps} steps (seed {config.seed}) into {out_dir}")
        run = TrainingService.train(config, dataset, out_dir, resume_from=options["resume"])
        emit(
            self,
            {
                "checkpoints": [str(path) for path in run.checkpoints],
                "metrics": str(run.metrics_path),
                "steps_run": run.steps_run,
                "skipped": run.skipped,
                "seed": config.seed,
            },
        )
