from decouple import config

from .base import *  # noqa: F403

# Core settings
DEBUG = config("DEBUG", default=False, cast=bool)

# Long CPU runs: structured logs everywhere, console stays readable
LOGGING["handlers"]["file"]["formatter"] = "json"  # noqa: F405
LOGGING["loggers"]["fsod"]["handlers"] = ["console", "file", "error_file"]  # noqa: F405

# Evaluation episodes run in parallel against a frozen checkpoint
FSOD_EVAL_WORKERS = config("FSOD_EVAL_WORKERS", default=4, cast=int)
