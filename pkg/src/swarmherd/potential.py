"""Harmonic interaction potential and its energy integrals.

``phi`` is the signed force magnitude applied along the line between two
robots as a function of the displacement from equilibrium: negative for
positive displacement (pull back in) and positive for negative displacement
(push back out). ``phi_plus`` keeps only the repulsive branch.

The sign convention matters: the naive reading of the harmonic force
``a0 + k*d*|d|/2`` is positive for d > 0, which would turn every attraction
into repulsion and make formations fly apart. We use the attraction-consistent
form ``a0 - k*d*|d|/2``; the other sign remains available through
``PotentialParams(printed_sign=True)`` for experimentation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class PotentialParams:
    k: float = 0.02
    a0: float = 0.0
    printed_sign: bool = False

    def __post_init__(self) -> None:
        if not self.k > 0.0:
            raise ValueError(f"potential gain k must be positive, got {self.k}")


def phi(d: float, params: PotentialParams = PotentialParams()) -> float:
    """Signed force magnitude for displacement d from equilibrium.

    phi(0) = a0 (continuous limit of the 0/0 corner case).
    """
    if d == 0.0:
        return params.a0
    magnitude = params.k * d * abs(d) / 2.0
    if params.printed_sign:
        return params.a0 + magnitude
    return params.a0 - magnitude


def phi_plus(d: float, params: PotentialParams = PotentialParams()) -> float:
    """Repulsion-only potential: phi(d) for d < 0, zero for d >= 0."""
    if d >= 0.0:
        return 0.0
    return phi(d, params)


def pair_potential_energy(distance: float, d_eq: float, params: PotentialParams = PotentialParams()) -> float:
    """Potential well of one interacting pair, zero at the equilibrium distance.

    Defined so that phi is exactly the negative distance-derivative:
    U(d) = integral over [d, d_eq] of phi(s - d_eq) ds = k*|d - d_eq|^3 / 6.
    """
    e = distance - d_eq
    return params.k * abs(e) ** 3 / 6.0


def potential_energy(
    d_from: float,
    d_to: float,
    params: PotentialParams = PotentialParams(),
    repulsive_only: bool = False,
    max_step: float = 1e-3,
) -> float:
    """Trapezoid integral of phi (or phi_plus) over [d_from, d_to].

    Numerical on purpose: this is the audit tool the metrics module uses to
    cross-check closed forms, so it must not share their algebra.
    """
    if not (math.isfinite(d_from) and math.isfinite(d_to)):
        raise ValueError("integration bounds must be finite")
    if d_from == d_to:
        return 0.0
    f = phi_plus if repulsive_only else phi
    span = d_to - d_from
    n = max(1, int(math.ceil(abs(span) / max_step)))
    h = span / n
    total = 0.5 * (f(d_from, params) + f(d_to, params))
    for i in range(1, n):
        total += f(d_from + i * h, params)
    return total * h
