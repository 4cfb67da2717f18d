from django.conf import settings
from django.core.management.base import BaseCommand

from apps.episodic.models import TrainingConfig
from apps.evaluation.cli import emit, resolve_dataset
from apps.evaluation.services import AblationService
from core.utils.errors import command_exception_handler


class Command(BaseCommand):
    help = "AP50 of the no-MR+Pearson, MR+cosine and MR+Pearson variants on the novel split"
    requires_system_checks = []

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True)
        parser.add_argument("--dir", help="Variant checkpoint root (default: FSOD_ARTIFACTS_DIR/ablation)")
        parser.add_argument("--train", action="store_true", help="Train each variant before evaluating")
        parser.add_argument("--episodes", type=int, default=200)
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--workers", type=int)
        parser.add_argument("--seed-groups", type=int)
        parser.add_argument("--score-threshold", type=float)
        parser.add_argument("--out")

    @command_exception_handler
    def handle(self, *args, **options):
        config = TrainingConfig.load(options["config"])
        dataset = resolve_dataset(config, options["config"])
        table = AblationService.run_ablation(
            config,
            dataset,
            options["dir"] or settings.FSOD_ARTIFACTS_DIR / "ablation",
            train=options["train"],
            n_episodes=options["episodes"],
            seed=options["seed"],
            workers=options["workers"],
            seed_groups=options["seed_groups"],
            score_threshold=options["score_threshold"],
        )
        ranking = AblationService.ranking(table)
        emit(
            self,
            {"variants": table, "ranking": ranking["ranked"], "ordering_holds": ranking["ordering_holds"], "seed": options["seed"]},
            options["out"],
        )
