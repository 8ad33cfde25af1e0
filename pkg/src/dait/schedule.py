"""Linear epoch schedule for the classification/distillation balance weight."""

from __future__ import annotations

from dataclasses import dataclass

from dait.errors import ConfigError


@dataclass(frozen=True)
class ScheduleParams:
    """Parameters of ``lambda = clamp(k * epoch + b)``.

    Attributes:
        k: Increment of lambda per epoch. ``k=0`` gives a fixed weight.
        b: Value of lambda at epoch 0.
        clamp_lo: Lower clamp bound.
        clamp_hi: Upper clamp bound.
    """

    k: float
    b: float = 0.0
    clamp_lo: float = 0.0
    clamp_hi: float = 1.0

    def __post_init__(self):
        if not self.clamp_lo <= self.clamp_hi:
            raise ConfigError(
                f"schedule clamp_lo={self.clamp_lo} must be <= clamp_hi={self.clamp_hi}"
            )

    @classmethod
    def ramp(cls, total_epochs: int) -> "ScheduleParams":
        """Default schedule: 0 at the first epoch, growing by 1/E per epoch."""
        if total_epochs < 1:
            raise ConfigError(f"total_epochs must be >= 1, got {total_epochs}")
        return cls(k=1.0 / total_epochs, b=0.0)


def lambda_at(params: ScheduleParams, epoch: int) -> float:
    """Weight on the classification term at ``epoch`` (0-based)."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return min(params.clamp_hi, max(params.clamp_lo, params.k * epoch + params.b))
