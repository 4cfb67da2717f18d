"""
Base settings for the few-shot detector project.
Contains common settings shared across all environments.
"""

import os
from pathlib import Path

from decouple import config

# Base Directory
BASE_DIR = Path(__file__).resolve().parent.parent.parent

# Security Settings
SECRET_KEY = config("SECRET_KEY", default="fsod-insecure-local-key")
DEBUG = config("DEBUG", default=True, cast=bool)
ALLOWED_HOSTS = []

# Application Definition
INSTALLED_APPS = [
    "django.contrib.contenttypes",
    # Detector apps
    "apps.tensorcore",
    "apps.metric",
    "apps.meta",
    "apps.toydata",
    "apps.episodic",
    "apps.evaluation",
]

# No database: every artifact is a file under FSOD_ARTIFACTS_DIR
DATABASES = {}

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"
USE_TZ = True
TIME_ZONE = "UTC"

# Artifacts (checkpoints, metrics logs, dumps)
FSOD_ARTIFACTS_DIR = Path(
    config("FSOD_ARTIFACTS_DIR", default=os.path.join(BASE_DIR, "artifacts"))
)

# Evaluation worker pool
FSOD_EVAL_WORKERS = config("FSOD_EVAL_WORKERS", default=1, cast=int)

# Episodes slower than this are logged to fsod.performance
FSOD_SLOW_EPISODE_SECONDS = config("FSOD_SLOW_EPISODE_SECONDS", default=5.0, cast=float)

# Algorithm defaults
FSOD_DEFAULTS = {
    "ALPHA": 10.0,
    "EPSILON": 1e-12,
    "REG_GATE": 0.7,
    "SCORE_THRESHOLD": 0.7,
    "CROWDED_SCORE_THRESHOLD": 0.4,
    "EVAL_SCORE_THRESHOLD": 0.05,
    "NMS_IOU": 0.5,
    "SUPPORT_POOL_WINDOW": 2,
    "SEED_GROUPS": 5,
}

# Logging Configuration
LOGS_DIR = config("FSOD_LOGS_DIR", default=os.path.join(BASE_DIR, "logs"))
LOG_LEVEL = config("FSOD_LOG_LEVEL", default="INFO")
os.makedirs(LOGS_DIR, exist_ok=True)
LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "verbose": {
            "format": "{levelname} {asctime} {module} {process:d} {thread:d} {message}",
            "style": "{",
        },
        "simple": {
            "format": "{levelname} {asctime} {module} {message}",
            "style": "{",
        },
        "json": {
            "()": "pythonjsonlogger.json.JsonFormatter",
            "format": "%(asctime)s %(name)s %(levelname)s %(message)s %(pathname)s %(lineno)s",
        },
    },
    "handlers": {
        "console": {
            "level": LOG_LEVEL,
            "class": "logging.StreamHandler",
            "formatter": "simple",
        },
        "file": {
            "level": "INFO",
            "class": "logging.handlers.RotatingFileHandler",
            "filename": os.path.join(LOGS_DIR, "fsod.log"),
            "maxBytes": 10 * 1024 * 1024,
            "backupCount": 10,
            "formatter": "verbose",
        },
        "error_file": {
            "level": "ERROR",
            "class": "logging.handlers.RotatingFileHandler",
            "filename": os.path.join(LOGS_DIR, "error.log"),
            "maxBytes": 10 * 1024 * 1024,
            "backupCount": 10,
            "formatter": "json",
        },
        "performance_file": {
            "level": "WARNING",
            "class": "logging.handlers.RotatingFileHandler",
            "filename": os.path.join(LOGS_DIR, "performance.log"),
            "maxBytes": 10 * 1024 * 1024,
            "backupCount": 5,
            "formatter": "json",
        },
    },
    "loggers": {
        "django": {
            "handlers": ["console", "file"],
            "level": "WARNING",
            "propagate": True,
        },
        "fsod": {
            "handlers": ["console", "file"],
            "level": LOG_LEVEL,
            "propagate": False,
        },
        "fsod.performance": {
            "handlers": ["console", "performance_file"],
            "level": "WARNING",
            "propagate": False,
        },
        "fsod.errors": {
            "handlers": ["console", "error_file"],
            "level": "INFO",
            "propagate": False,
        },
    },
}
