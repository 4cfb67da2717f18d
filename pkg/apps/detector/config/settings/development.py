from .base import *  # noqa: F403

# Core settings
DEBUG = True

# Quieter console while iterating on toy runs
LOGGING["handlers"]["console"]["level"] = "WARNING"  # noqa: F405

# Tests and smoke runs share the local artifacts tree
FSOD_EVAL_WORKERS = 1
