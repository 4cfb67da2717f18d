from dataclasses import dataclass, field

from core.utils.errors import ValidationError


@dataclass
class EpisodeResult:
    ap50: float
    ap75: float
    own_similarity: float
    cross_similarity: float
    n_detections: int
    episode_seed: int
    aborted: bool = False


@dataclass
class EvalResult:
    """AP over novel-class episodes, averaged per seed group and then across groups."""

    ap50: float
    ap75: float
    per_episode_ap50: list[float]
    per_episode_ap75: list[float]
    n_episodes: int
    group_ap50: list[float] = field(default_factory=list)
    group_ap75: list[float] = field(default_factory=list)
    own_similarity: float = 0.0
    cross_similarity: float = 0.0
    aborted: int = 0
    parameter_digest: str = ""
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("ap50", "ap75"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {value}")

    @property
    def clustering_gap(self) -> float:
        return self.own_similarity - self.cross_similarity

    def to_dict(self):
        return {
            "ap50": self.ap50,
            "ap75": self.ap75,
            "group_ap50": self.group_ap50,
            "group_ap75": self.group_ap75,
            "per_episode_ap50": self.per_episode_ap50,
            "per_episode_ap75": self.per_episode_ap75,
            "n_episodes": self.n_episodes,
            "aborted": self.aborted,
            "clustering": {
                "own_prototype": self.own_similarity,
                "cross_prototype": self.cross_similarity,
                "gap": self.clustering_gap,
            },
            "parameter_digest": self.parameter_digest,
            "config": self.config,
        }


@dataclass
class SuiteResult:
    name: str
    trials: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.trials == 0 or self.max_rel_error < self.tolerance

    def to_dict(self):
        return {
            "name": self.name,
            "trials": self.trials,
            "max_rel_error": self.max_rel_error,
            "passed": self.passed,
        }


@dataclass
class GradcheckReport:
    seed: int
    dims: list[int]
    trials: int
    tolerance: float
    suites: list[SuiteResult] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return all(suite.trials == 0 for suite in self.suites)

    @property
    def passed(self) -> bool:
        return all(suite.passed for suite in self.suites)

    @property
    def max_rel_error(self) -> float:
        return max((s.max_rel_error for s in self.suites if s.trials), default=0.0)

    def to_dict(self):
        return {
            "seed": self.seed,
            "dims": self.dims,
            "trials": self.trials,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "empty": self.empty,
            "max_rel_error": self.max_rel_error,
            "suites": [suite.to_dict() for suite in self.suites],
        }
