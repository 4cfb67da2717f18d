from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from apps.tensorcore.models import LayerParams
from core.utils.errors import ConfigurationError
from core.utils.validators import validate_positive


@dataclass
class MRModule:
    """
    Meta-representation head: conv(stride 2, d -> 2d) -> relu -> conv(stride 1)
    -> relu -> global average pool, plus a per-episode classifier ``fc_head``
    over the episode labels that is never applied to query RoIs.
    """

    conv1: LayerParams
    conv2: LayerParams
    fc_head: LayerParams
    inner_losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        c_out, c_in = self.conv1.weights.shape[:2]
        if c_out != 2 * c_in:
            raise ConfigurationError(
                f"mr.conv1 must double the channel count, got {c_in} -> {c_out}"
            )
        if self.conv2.weights.shape[1] != c_out:
            raise ConfigurationError(
                f"mr.conv2 expects {self.conv2.weights.shape[1]} channels, conv1 yields {c_out}"
            )
        if self.fc_head.in_units != self.embed_dim:
            raise ConfigurationError(
                f"mr.fc_head width {self.fc_head.in_units} != embed_dim {self.embed_dim}"
            )

    @classmethod
    def initialise(cls, in_channels, way, rng) -> MRModule:
        width = 2 * in_channels
        return cls(
            conv1=LayerParams.conv("mr.conv1", in_channels, width, rng),
            conv2=LayerParams.conv("mr.conv2", width, width, rng),
            fc_head=LayerParams.linear("mr.fc_head", width, way, rng),
        )

    @property
    def embed_dim(self) -> int:
        return self.conv2.out_units

    @property
    def way(self) -> int:
        return self.fc_head.out_units

    def layers(self) -> list[LayerParams]:
        """Parameters adapted by the inner loop."""
        return [self.conv1, self.conv2, self.fc_head]

    def shared_layers(self) -> list[LayerParams]:
        """Parameters carried across episodes (fc_head is re-drawn per episode)."""
        return [self.conv1, self.conv2]

    def clone(self) -> MRModule:
        return MRModule(
            conv1=self.conv1.clone(),
            conv2=self.conv2.clone(),
            fc_head=self.fc_head.clone(),
            inner_losses=list(self.inner_losses),
        )

    def reset_head(self, label_perm, head_seeds):
        """
        Redraw fc_head for a new episode.

        Row ``label_perm[n]`` is drawn from ``head_seeds[n]``, so a class keeps
        the same initial classifier row whichever label it is assigned.
        """
        way = len(label_perm)
        if sorted(label_perm) != list(range(way)) or len(head_seeds) != way:
            raise ConfigurationError(f"label_perm {list(label_perm)} is not a permutation of {way} labels")
        weights = np.zeros((way, self.embed_dim))
        scale = np.sqrt(2.0 / self.embed_dim)
        for n, label in enumerate(label_perm):
            weights[label] = np.random.default_rng(head_seeds[n]).normal(size=self.embed_dim) * scale
        self.fc_head = LayerParams("mr.fc_head", weights, np.zeros(way))


@dataclass
class Prototype:
    class_index: int
    vector: np.ndarray
    k_used: int

    def to_dict(self):
        return {
            "class_index": int(self.class_index),
            "k_used": int(self.k_used),
            "vector": [float(x) for x in self.vector],
        }


@dataclass(frozen=True)
class InnerLoopConfig:
    """Inner-loop step count, learning rate and the episode's label assignment."""

    meta_lr: float
    steps: int
    label_perm: tuple[int, ...]
    head_seeds: tuple[int, ...]

    def __post_init__(self):
        # meta_lr == 0 is allowed: it leaves the clone untouched
        if not np.isfinite(self.meta_lr) or self.meta_lr < 0:
            raise ConfigurationError(f"meta_lr must be finite and >= 0, got {self.meta_lr}")
        validate_positive(self.steps, "steps")
        if sorted(self.label_perm) != list(range(len(self.label_perm))):
            raise ConfigurationError(f"label_perm {list(self.label_perm)} is not a permutation")
        if len(self.head_seeds) != len(self.label_perm):
            raise ConfigurationError("one head seed is required per episode class")
