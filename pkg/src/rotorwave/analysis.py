"""Observable traces, error functionals, scaling fits and static error scans."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rpwf import StaticOperators, static_realizations
from .thermal import boltzmann_ensemble

BOUND_TOL = 1e-9
DEFAULT_T_REV = 120.0


@dataclass
class ObservableTrace:
    times: np.ndarray
    orientation: np.ndarray
    alignment: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.orientation = np.asarray(self.orientation, dtype=float)
        self.alignment = np.asarray(self.alignment, dtype=float)
        if not (self.times.shape == self.orientation.shape == self.alignment.shape):
            raise ValueError("times, orientation and alignment must have equal length")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    def within_bounds(self, tol=BOUND_TOL):
        return bool(
            np.all(np.abs(self.orientation) <= 1 + tol)
            and np.all(self.alignment >= -tol)
            and np.all(self.alignment <= 1 + tol)
        )

    def window(self, t_lo, t_hi):
        m = (self.times >= t_lo) & (self.times <= t_hi)
        return self.times[m], self.orientation[m], self.alignment[m]


@dataclass(frozen=True)
class ScalingFit:
    x: tuple
    y: tuple
    slope: float
    intercept: float
    r_squared: float

    def predict(self, x):
        """Fitted power law evaluated at ``x`` (for log-log fits)."""
        return np.exp(self.intercept) * np.asarray(x, dtype=float) ** self.slope


def _ols(x, y):
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 if ss_tot == 0.0 else max(0.0, 1.0 - ss_res / ss_tot)
    return float(slope), float(intercept), min(r2, 1.0)


def linear_fit(x, y):
    """Ordinary least squares y = slope * x + intercept."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 3 or x.shape != y.shape:
        raise ValueError("need at least 3 (x, y) pairs of equal length")
    return ScalingFit(tuple(x), tuple(y), *_ols(x, y))


def loglog_fit(x, y):
    """Least-squares line through (ln x, ln y)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 3 or x.shape != y.shape:
        raise ValueError("need at least 3 (x, y) pairs of equal length")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log fit needs strictly positive data")
    return ScalingFit(tuple(x), tuple(y), *_ols(np.log(x), np.log(y)))


def error_epsilon(rp, ex, T_rev=DEFAULT_T_REV, t0=0.0, observable="orientation"):
    """(1/T_rev) * integral_{t0}^{t0+T_rev} |S_rp - S_ex|^2 dt, trapezoidal."""
    if rp.times.shape != ex.times.shape or not np.allclose(rp.times, ex.times, rtol=0, atol=1e-9):
        raise ValueError("traces must share the same time grid")
    t1 = t0 + T_rev
    if T_rev <= 0 or t0 < rp.times[0] - 1e-9 or t1 > rp.times[-1] + 1e-9:
        raise ValueError(f"window [{t0}, {t1}] ps is not inside the trace span")
    m = (rp.times >= t0 - 1e-9) & (rp.times <= t1 + 1e-9)
    d = getattr(rp, observable)[m] - getattr(ex, observable)[m]
    return float(np.trapezoid(d**2, rp.times[m]) / T_rev)


def baseline_flatness(trace, windows, observable="orientation"):
    """Largest peak-to-peak excursion of the trace over the given windows."""
    if not windows:
        raise ValueError("at least one window is required")
    worst = 0.0
    for lo, hi in windows:
        if lo < trace.times[0] - 1e-9 or hi > trace.times[-1] + 1e-9 or hi <= lo:
            raise ValueError(f"window ({lo}, {hi}) is outside the trace span")
        _, o, a = trace.window(lo, hi)
        v = o if observable == "orientation" else a
        if v.size:
            worst = max(worst, float(v.max() - v.min()))
    return worst


def peak_abs(trace, t_lo=None, t_hi=None, observable="orientation"):
    lo = trace.times[0] if t_lo is None else t_lo
    hi = trace.times[-1] if t_hi is None else t_hi
    _, o, a = trace.window(lo, hi)
    v = o if observable == "orientation" else a - 1.0 / 3.0
    return float(np.max(np.abs(v)))


# ---------------------------------------------------------------------------
# static error statistics


@dataclass
class StaticErrorRow:
    temperature: float
    N_r: int
    batches: int
    n_states: int
    inv_mean_sq_orientation: float
    mean_inv_sq_orientation: float
    inv_mean_sq_alignment: float
    mean_inv_sq_alignment: float


@dataclass
class StaticErrorScan:
    rows: list
    alpha_orientation: dict
    alpha_alignment: dict
    linearity_r2_orientation: dict
    linearity_r2_alignment: dict
    temperature_fit_orientation: ScalingFit | None
    temperature_fit_alignment: ScalingFit | None


def static_error_scan(rc, T_list, Nr_list, batches=100, master_seed=0, cutoff=1e-3, jmax_ceiling=120):
    """Batch statistics of the RPWF static orientation and alignment errors.

    Batch b at size N_r averages realizations k = b * max(Nr_list) + i,
    i < N_r, so smaller N_r reuse prefixes of the larger batches. For each
    (T, N_r) the primary statistic is 1 / mean_b |S_b|^2 (orientation,
    target 0) and 1 / mean_b |S_b - 1/3|^2 (alignment); the mean of the
    per-batch inverse is reported alongside. The per-T slope alpha is the
    OLS slope of the primary statistic against N_r.
    """
    T_list = [float(t) for t in T_list]
    Nr_list = sorted(int(n) for n in Nr_list)
    if not T_list or not Nr_list or batches < 1 or min(Nr_list) < 1 or min(T_list) <= 0:
        raise ValueError("temperatures, realization counts and batches must be positive")
    n_max = Nr_list[-1]
    rows = []
    a1, a2, r1, r2 = {}, {}, {}, {}
    for T in T_list:
        ens = boltzmann_ensemble(rc, T, cutoff, jmax_ceiling)
        ops = StaticOperators(ens)
        ks = np.arange(batches * n_max)
        e1, e2, _ = static_realizations(ens, master_seed, ks, ops)
        e1 = e1.reshape(batches, n_max)
        e2 = e2.reshape(batches, n_max) - 1.0 / 3.0
        y1, y2 = [], []
        for n in Nr_list:
            s1 = e1[:, :n].mean(axis=1)
            s2 = e2[:, :n].mean(axis=1)
            q1 = s1**2
            q2 = s2**2
            rows.append(StaticErrorRow(
                temperature=T, N_r=n, batches=batches, n_states=ens.n_states,
                inv_mean_sq_orientation=float(1.0 / q1.mean()),
                mean_inv_sq_orientation=float(np.mean(1.0 / q1)),
                inv_mean_sq_alignment=float(1.0 / q2.mean()),
                mean_inv_sq_alignment=float(np.mean(1.0 / q2)),
            ))
            y1.append(rows[-1].inv_mean_sq_orientation)
            y2.append(rows[-1].inv_mean_sq_alignment)
        if len(Nr_list) >= 3:
            f1 = linear_fit(Nr_list, y1)
            f2 = linear_fit(Nr_list, y2)
            a1[T], r1[T] = f1.slope, f1.r_squared
            a2[T], r2[T] = f2.slope, f2.r_squared
    tf1 = tf2 = None
    if len(T_list) >= 3 and len(a1) == len(T_list) and all(v > 0 for v in a1.values()):
        tf1 = loglog_fit(T_list, [a1[t] for t in T_list])
    if len(T_list) >= 3 and len(a2) == len(T_list) and all(v > 0 for v in a2.values()):
        tf2 = loglog_fit(T_list, [a2[t] for t in T_list])
    return StaticErrorScan(rows, a1, a2, r1, r2, tf1, tf2)
