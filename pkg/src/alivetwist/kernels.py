"""Accept/reject comparison kernels for simulated pseudo-observations.

A kernel maps a batch of simulated observations and one recorded observation
to binary weights: 1 when the simulation landed close enough to count, else
0.  Anything exposing ``weights(simulated, observed) -> 0/1 int array`` plugs
into the alive filters, which lets the finite-alphabet oracle models use
exact acceptance tables through the same interface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AbcKernel:
    """Tolerance-ball acceptance around a recorded observation.

    mode "relative" accepts when |u - y| / max(|y|, relative_floor) <= epsilon,
    mode "absolute" accepts when |u - y| <= epsilon.
    """

    epsilon: float
    mode: str = "relative"
    relative_floor: float = 1e-8

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.mode not in ("relative", "absolute"):
            raise ValueError(f"mode must be 'relative' or 'absolute', got {self.mode!r}")
        if self.relative_floor <= 0:
            raise ValueError(f"relative_floor must be positive, got {self.relative_floor}")

    def weights(self, simulated, observed: float) -> np.ndarray:
        """Binary acceptance weights for a batch of simulated observations."""
        lo, hi = self.interval(observed)
        simulated = np.asarray(simulated, dtype=float)
        return ((simulated >= lo) & (simulated <= hi)).astype(np.int64)

    def weight(self, simulated: float, observed: float) -> int:
        return int(self.weights(np.array([simulated]), observed)[0])

    def interval(self, observed: float) -> tuple:
        """The closed acceptance interval [lo, hi] around ``observed``."""
        half = self.epsilon
        if self.mode == "relative":
            half *= max(abs(observed), self.relative_floor)
        return float(observed - half), float(observed + half)


@dataclass(frozen=True)
class DiscreteBallKernel:
    """Acceptance-table kernel over a finite observation alphabet.

    acceptance[y, u] is True when simulated symbol u is accepted for recorded
    symbol y; this mirrors the table inside the finite-state oracle model so
    filter output can be compared against the exact forward recursion.
    """

    acceptance: np.ndarray

    def __post_init__(self) -> None:
        acceptance = np.asarray(self.acceptance, dtype=bool)
        if acceptance.ndim != 2 or acceptance.shape[0] != acceptance.shape[1]:
            raise ValueError("acceptance must be a square boolean table")
        object.__setattr__(self, "acceptance", acceptance)

    def weights(self, simulated, observed) -> np.ndarray:
        simulated = np.asarray(simulated, dtype=np.int64)
        return self.acceptance[int(observed), simulated].astype(np.int64)

    def weight(self, simulated, observed) -> int:
        return int(self.acceptance[int(observed), int(simulated)])

    def accept_mask(self, observed) -> np.ndarray:
        """Boolean row of simulated symbols accepted for ``observed``."""
        return self.acceptance[int(observed)]
