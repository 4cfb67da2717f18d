from django.core.management.base import BaseCommand, CommandError

from apps.evaluation.cli import emit, parse_dims
from apps.evaluation.gradcheck import TOLERANCE, run_gradcheck
from core.utils.errors import EXIT_RUNTIME, ValidationError, command_exception_handler


class Command(BaseCommand):
    help = "Check every analytic gradient against central finite differences"
    requires_system_checks = []

    def add_arguments(self, parser):
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--dims", default="8,32,128", help="Comma-separated vector dimensions")
        parser.add_argument("--trials", type=int, default=400, help="Draws per dimension")
        parser.add_argument("--tolerance", type=float, default=TOLERANCE)
        parser.add_argument("--out")

    @command_exception_handler
    def handle(self, *args, **options):
        if options["trials"] < 0:
            raise ValidationError(f"--trials must be >= 0, got {options['trials']}")
        report = run_gradcheck(
            seed=options["seed"],
            dims=parse_dims(options["dims"]),
            trials=options["trials"],
            tolerance=options["tolerance"],
        )
        emit(self, report.to_dict(), options["out"])
        if not report.passed:
            failed = [suite.name for suite in report.suites if not suite.passed]
            raise CommandError(f"Gradient check failed: {', '.join(failed)}", returncode=EXIT_RUNTIME)
