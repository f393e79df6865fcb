"""Functionals of density measures: entropy, modified Fisher information,
Laplace functional, intensity and the reduced Campbell table.

Every functional is an exact finite sum over the truncated state set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .configspace import DensityMeasure

FISHER_SENTINEL = 1e300


def entropy(P: DensityMeasure) -> float:
    """Relative entropy of ``P`` with respect to the truncated reference."""
    return float(np.sum(xlogy(P.rho, P.rho) * P.pi))


def _edge_pairs(P: DensityMeasure):
    space = P.space
    i, j = np.nonzero(space.edge_mask)
    k = space.up[i, j]
    return i, j, k


def in_fisher_domain(P: DensityMeasure) -> bool:
    """False when some edge joins a zero of the density to a positive value."""
    i, _, k = _edge_pairs(P)
    a, b = P.rho[i], P.rho[k]
    return not np.any((a == 0) != (b == 0))


def fisher(P: DensityMeasure, sentinel: float = FISHER_SENTINEL) -> float:
    """Modified Fisher information ``sum D rho * D log rho * pi * v``.

    Returns ``sentinel`` outside the Fisher domain (see ``in_fisher_domain``).
    """
    i, j, k = _edge_pairs(P)
    a, b = P.rho[i], P.rho[k]
    if np.any((a == 0) != (b == 0)):
        return sentinel
    pos = (a > 0) & (b > 0)
    terms = np.zeros_like(a)
    terms[pos] = (b[pos] - a[pos]) * (np.log(b[pos]) - np.log(a[pos]))
    return float(np.sum(terms * P.pi[i] * P.space.site_volumes[j]))


def laplace(P: DensityMeasure, f) -> float:
    """``E_P exp(-sum_j f_j n_j)`` for a nonnegative site function ``f``."""
    f = np.asarray(f, dtype=float)
    if f.shape != (P.space.m,) or np.any(f < 0):
        raise ValueError("f must be a nonnegative vector over sites")
    return float(np.sum(P.probabilities * np.exp(-(P.space.states @ f))))


def intensity(P: DensityMeasure) -> np.ndarray:
    """Expected occupancy of every site."""
    return P.space.states.T @ P.probabilities


@dataclass(frozen=True)
class CampbellTable:
    """``values[n, j]`` is the reduced Campbell mass of (configuration n, site j).

    Entries on edges leaving the truncated set are zero.
    """

    values: np.ndarray

    def total(self) -> float:
        return float(self.values.sum())


def campbell(P: DensityMeasure) -> CampbellTable:
    """Reduced Campbell table, ``rho(n+e_j) pi(n+e_j) (n_j + 1)`` per edge."""
    space = P.space
    C = np.zeros((space.size, space.m))
    i, j, k = _edge_pairs(P)
    C[i, j] = P.probabilities[k] * (space.states[i, j] + 1)
    return CampbellTable(C)


def mecke_table(P: DensityMeasure) -> np.ndarray:
    """The Mecke form ``rho(n+e_j) pi(n) v_j`` of the Campbell table."""
    space = P.space
    out = np.zeros((space.size, space.m))
    i, j, k = _edge_pairs(P)
    out[i, j] = P.rho[k] * P.pi[i] * space.site_volumes[j]
    return out


def total_variation(P: DensityMeasure, Q: DensityMeasure) -> float:
    return 0.5 * float(np.abs(P.probabilities - Q.probabilities).sum())
