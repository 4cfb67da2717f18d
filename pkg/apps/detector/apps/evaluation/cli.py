"""Shared plumbing for the train/eval/infer/gradcheck/ablate management commands."""

import json
import logging
from pathlib import Path

from django.conf import settings

from apps.episodic.models import TrainingConfig
from apps.metric.models import MetricKind
from apps.toydata.models import ToyDataset
from apps.toydata.services import ManifestService
from core.utils.errors import ArtifactIOError, ValidationError

logger = logging.getLogger("fsod.evaluation")

PRESETS = {
    "default": {},
    # crowded scenes: lower score threshold, slower and longer inner adaptation
    "crowded": {"score_threshold": "CROWDED_SCORE_THRESHOLD", "meta_lr": 0.005, "inner_steps": 50},
}


def resolve_dataset(config: TrainingConfig, config_path=None) -> ToyDataset:
    """Dataset named by ``dataset_manifest`` (relative to the config file), or the built-in inventory."""
    if not config.dataset_manifest:
        return ToyDataset()
    path = Path(config.dataset_manifest)
    if not path.is_absolute() and config_path is not None and not path.exists():
        path = Path(config_path).parent / path
    return ManifestService.load_manifest(path)


def apply_preset(config: TrainingConfig, name, score_threshold=None):
    """Return (config, score_threshold) with the preset applied; explicit thresholds win."""
    if name not in PRESETS:
        raise ValidationError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    preset = dict(PRESETS[name])
    threshold_key = preset.pop("score_threshold", None)
    if preset:
        config = TrainingConfig.model_validate({**config.to_dict(), **preset})
    if score_threshold is None and threshold_key is not None:
        score_threshold = settings.FSOD_DEFAULTS[threshold_key]
    return config, score_threshold


def override_metric(config: TrainingConfig, metric):
    if metric is None:
        return config
    return TrainingConfig.model_validate({**config.to_dict(), "metric_kind": MetricKind(metric)})


def parse_dims(text) -> tuple[int, ...]:
    try:
        dims = tuple(int(part) for part in str(text).split(",") if part.strip())
    except ValueError:
        raise ValidationError(f"--dims must be a comma-separated list of integers, got {text!r}")
    if not dims or any(d < 2 for d in dims):
        raise ValidationError(f"--dims entries must be >= 2, got {text!r}")
    return dims


def emit(command, payload, out=None):
    """Write ``payload`` as JSON to ``out`` or to the command's stdout."""
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out is None:
        command.stdout.write(text)
        return
    path = Path(out)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n")
    except OSError as e:
        raise ArtifactIOError(f"Could not write output ({e.strerror})", path=path)
    logger.info(f"Wrote {path}")
