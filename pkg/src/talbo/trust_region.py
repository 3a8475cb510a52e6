"""Single trust-region (TuRBO-1 style) state machine in latent space."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class TrustRegionState:
    center: np.ndarray
    length: float = 0.8
    weights: np.ndarray | None = None
    success_count: int = 0
    failure_count: int = 0
    best_value: float = -math.inf
    length_init: float = 0.8
    length_min: float = 0.5**7
    length_max: float = 1.6
    success_tolerance: int = 3
    failure_tolerance: int = 4
    restart_triggered: bool = False

    def __post_init__(self) -> None:
        center = np.asarray(self.center, dtype=float).reshape(-1)
        object.__setattr__(self, "center", center)
        w = np.ones_like(center) if self.weights is None else np.asarray(self.weights, dtype=float).reshape(-1)
        if w.shape != center.shape or np.any(w <= 0):
            raise ValueError("weights must be positive with the center's shape")
        object.__setattr__(self, "weights", w)

    @classmethod
    def create(cls, center, best_value: float, batch_size: int, **kwargs) -> "TrustRegionState":
        """State with the canonical failure tolerance ``ceil(max(4, d) / B)``."""
        d = np.asarray(center).size
        kwargs.setdefault("failure_tolerance", math.ceil(max(4.0, d) / batch_size))
        kwargs.setdefault("length", kwargs.get("length_init", 0.8))
        return cls(center=center, best_value=best_value, **kwargs)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["center"] = self.center.tolist()
        out["weights"] = self.weights.tolist()
        return out


def trust_region_bounds(state: TrustRegionState) -> tuple[np.ndarray, np.ndarray]:
    half = 0.5 * state.weights * state.length
    return state.center - half, state.center + half


def is_success(batch_max: float, best_value: float, threshold: float = 1e-3) -> bool:
    return batch_max > best_value + threshold * abs(best_value)


def update_trust_region(state: TrustRegionState, batch_values) -> TrustRegionState:
    """Counter update, expansion/shrinking, incumbent value and restart flag."""
    values = np.asarray(batch_values, dtype=float).reshape(-1)
    if values.size == 0:
        raise ValueError("batch must be non-empty")
    batch_max = float(values.max())
    if is_success(batch_max, state.best_value):
        n_succ, n_fail = state.success_count + 1, 0
    else:
        n_succ, n_fail = 0, state.failure_count + 1
    length = state.length
    if n_succ == state.success_tolerance:
        length, n_succ = min(2.0 * length, state.length_max), 0
    elif n_fail == state.failure_tolerance:
        length, n_fail = length / 2.0, 0
    return replace(
        state,
        length=length,
        success_count=n_succ,
        failure_count=n_fail,
        best_value=max(state.best_value, batch_max),
        restart_triggered=length < state.length_min,
    )


def restart_trust_region(state: TrustRegionState, new_center, new_value: float) -> TrustRegionState:
    """Re-center on ``new_center`` with fresh counters and the initial length."""
    return replace(
        state,
        center=np.asarray(new_center, dtype=float).reshape(-1),
        length=state.length_init,
        success_count=0,
        failure_count=0,
        best_value=float(new_value),
        restart_triggered=False,
    )
