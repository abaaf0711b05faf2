import math
from typing import Optional

from app.config import settings
from app.errors import InvalidArgumentError
from app.models.wave_models import ErrorBudget


def split_error_budget(
    eps_target: float,
    second_moment: float,
    confidence: Optional[float] = None,
    M: Optional[int] = None,
) -> ErrorBudget:
    """
    Split eps_target for distillation:
      - eps/4 → data-net accuracy (delta)
      - eps/4 → product and assembly accuracy (gamma)
      - M = smallest integer >= confidence^2 * max(1, E[w^2]) / delta^2
    An explicit M overrides the Monte Carlo share.
    The default confidence (MC_CONFIDENCE = 1.0) is a one-standard-error
    budget for an eps/4 Monte Carlo share; the unspent quarter of eps and the
    max(1, E[w^2]) floor are the slack. Raise it for a stricter run.
    """
    if not eps_target > 0:
        raise InvalidArgumentError("eps_target must be positive")
    if second_moment < 0 or not math.isfinite(second_moment):
        raise InvalidArgumentError(f"second moment must be finite and nonnegative, got {second_moment}")
    z = settings.MC_CONFIDENCE if confidence is None else confidence
    delta = eps_target / 4.0
    gamma = eps_target / 4.0
    if M is None:
        M = max(1, math.ceil(z * z * max(1.0, second_moment) / (delta * delta) - 1e-9))
    elif M < 1:
        raise InvalidArgumentError("M must be positive")

    return ErrorBudget(
        eps_target=eps_target,
        delta=delta,
        gamma=gamma,
        second_moment=second_moment,
        confidence=z,
        M=int(M),
    )
