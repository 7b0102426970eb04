"""Boltzmann ensembles, partition functions and level counting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .angular import rotor_levels
from .constants import kT

JMAX_START = 5
JMAX_STEP = 5
JMAX_CEILING = 120

CRITERIA = ("energy", "population")


@dataclass
class ThermalEnsemble:
    """Truncated, renormalized Boltzmann ensemble over |J M tau> states.

    The per-state arrays are ordered by ascending energy, then J, tau, M.
    Whole M multiplets are always kept together so the ensemble stays
    isotropic.
    """

    temperature: float
    rc: object
    J: np.ndarray
    M: np.ndarray
    tau: np.ndarray
    energy: np.ndarray
    weight: np.ndarray
    Z: float
    discarded_population: float
    Jmax_used: int
    cutoff: float

    @property
    def n_states(self):
        return int(self.J.size)

    @property
    def Jmax_populated(self):
        return int(self.J.max())

    @property
    def levels(self):
        return list(zip(self.J.tolist(), self.M.tolist(), self.tau.tolist(), self.energy.tolist(), self.weight.tolist()))


@dataclass(frozen=True)
class LevelCount:
    temperature: float
    N_E: int
    criterion: str
    threshold: float


def _check_temperature(T):
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")


def _level_arrays(lv, Jmax):
    J = np.concatenate([np.full(2 * j + 1, j) for j in range(Jmax + 1)])
    tau = np.concatenate([np.arange(1, 2 * j + 2) for j in range(Jmax + 1)])
    E = np.concatenate(lv.energies[: Jmax + 1])
    return J, tau, E


def _tail_bound(lv, Jmax, kt, E0):
    """Upper estimate of the Boltzmann mass above Jmax.

    Shell minima grow at least like C*J(J+1); the sum is cut once terms
    become negligible.
    """
    e_top = float(lv.energies[Jmax].min()) - E0
    Js = np.arange(Jmax + 1, Jmax + 4000)
    expo = (e_top + lv.rc.C * (Js * (Js + 1) - Jmax * (Jmax + 1))) / kt
    return float(np.sum((2 * Js + 1) ** 2 * np.exp(-expo)))


def converged_levels(rc, T, tol, jmax_ceiling=JMAX_CEILING):
    """Spectrum extended until the Boltzmann mass above Jmax is below ``tol * Z``.

    Returns (J, tau, E, degeneracy-weighted Boltzmann factors, Z, Jmax).
    """
    _check_temperature(T)
    kt = kT(T)
    Jmax = JMAX_START
    while True:
        if Jmax > jmax_ceiling:
            raise ValueError(f"Jmax ceiling {jmax_ceiling} exceeded at T={T} K; raise jmax_ceiling or the cutoff")
        lv = rotor_levels(rc, Jmax)
        J, tau, E = _level_arrays(lv, Jmax)
        E0 = float(E.min())
        E = E - E0
        boltz = (2 * J + 1) * np.exp(-E / kt)
        Z = float(boltz.sum())
        if _tail_bound(lv, Jmax, kt, E0) <= tol * Z:
            return J, tau, E, boltz, Z, Jmax
        Jmax += JMAX_STEP


def partition_function(rc, T, tol=1e-14, jmax_ceiling=JMAX_CEILING):
    """Z = sum_J (2J+1) sum_tau exp(-E/kT), ground state at zero."""
    return converged_levels(rc, T, tol, jmax_ceiling)[4]


def boltzmann_ensemble(rc, T, cutoff=1e-3, jmax_ceiling=JMAX_CEILING):
    """Keep levels in ascending energy until 1 - cutoff of the population is covered."""
    _check_temperature(T)
    if not 0 < cutoff < 1:
        raise ValueError(f"cutoff must lie in (0, 1), got {cutoff}")
    J, tau, E, boltz, Z, Jmax = converged_levels(rc, T, 1e-3 * cutoff, jmax_ceiling)
    order = np.lexsort((tau, J, E))
    J, tau, E, boltz = J[order], tau[order], E[order], boltz[order]
    cum = np.cumsum(boltz) / Z
    n_keep = int(np.searchsorted(cum, 1.0 - cutoff)) + 1
    n_keep = min(n_keep, J.size)
    discarded = max(0.0, 1.0 - float(cum[n_keep - 1]))
    J, tau, E = J[:n_keep], tau[:n_keep], E[:n_keep]

    reps = 2 * J + 1
    sJ = np.repeat(J, reps)
    stau = np.repeat(tau, reps)
    sE = np.repeat(E, reps)
    sM = np.concatenate([np.arange(-j, j + 1) for j in J])
    w = np.exp(-sE / kT(T))
    w /= w.sum()
    return ThermalEnsemble(
        temperature=float(T), rc=rc, J=sJ, M=sM, tau=stau, energy=sE, weight=w,
        Z=Z, discarded_population=discarded, Jmax_used=Jmax, cutoff=cutoff,
    )


def count_states(rc, T_list, cutoff=1e-3, criterion="energy", threshold=1.0, jmax_ceiling=JMAX_CEILING):
    """Number of |J M tau> states N_E(T) under a fixed truncation rule.

    ``criterion="energy"`` counts states with E <= threshold * k_B T;
    ``criterion="population"`` counts the states kept by
    :func:`boltzmann_ensemble` with the given cutoff.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}, got {criterion!r}")
    out = []
    for T in T_list:
        _check_temperature(T)
        if criterion == "population":
            n = boltzmann_ensemble(rc, T, cutoff, jmax_ceiling).n_states
            out.append(LevelCount(float(T), int(n), criterion, float(cutoff)))
            continue
        e_max = threshold * kT(T)
        # every state of shell J lies at or above C*J(J+1)
        Jmax = max(1, int(np.sqrt(e_max / rc.C)) + 1)
        lv = rotor_levels(rc, Jmax)
        J, _, E = _level_arrays(lv, Jmax)
        E = E - E.min()
        n = int(np.sum((2 * J + 1)[E <= e_max]))
        out.append(LevelCount(float(T), n, criterion, float(threshold)))
    return out


def thermal_energy(ensemble):
    """Mean rotational energy sum(weight * E) in cm^-1."""
    return float(np.dot(ensemble.weight, ensemble.energy))


def classical_energy(T):
    """High-temperature limit (3/2) k_B T of an asymmetric top."""
    return 1.5 * kT(T)


def mean_energy(rc, T, tol=1e-14, jmax_ceiling=200):
    """Converged Boltzmann mean energy <E> (cm^-1), ground state at zero.

    Unlike :func:`thermal_energy` this is not biased by an ensemble cutoff.
    """
    _, _, E, boltz, Z, _ = converged_levels(rc, T, tol, jmax_ceiling)
    return float(np.dot(boltz, E) / Z)
