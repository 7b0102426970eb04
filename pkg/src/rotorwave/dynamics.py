"""THz pulse, propagation engine and ensemble runners.

States are stored per K-parity sector in a padded array ``X[slot, J, col]``
holding eigenbasis amplitudes, where ``slot`` enumerates the K values of
one parity and each column is a state of fixed M >= 0. Negative-M blocks
are mapped onto +M with the Wang signs (the reflection that sends M to -M
commutes with both H0 and cos(theta)), which halves the work.

The default integrator is a Strang splitting: exact H0 phases in the
eigenbasis and an exact interaction kick exp(i a cos(theta)) applied in
the symmetric-top basis, where cos(theta) is tridiagonal in J at fixed
(K, M) and the kick reduces to precomputed chain eigendecompositions.
Outside the pulse window the evolution is field-free and observables are
evaluated analytically from eigenpair amplitudes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .analysis import ObservableTrace
from .angular import dcos_zero, rotor_levels
from .constants import TWO_PI_C, coupling_strength, intensity_to_field  # noqa: F401  (re-exported)
from .rpwf import phase_matrix

DEFAULT_SIGMA = 1.0 / (2.0 * math.sqrt(math.log(2.0)))
WINDOW_SIGMAS = 10.0
KICK_SKIP = 1e-18
METHODS = ("split", "rk4")
METHOD_ALIASES = {"split-step-order2": "split", "split": "split", "rk4": "rk4"}


class PropagationError(RuntimeError):
    """Numerical abort: norm drift or top-shell leakage over tolerance."""

    def __init__(self, message, kind, column=None, realization=None):
        super().__init__(message)
        self.kind = kind
        self.column = column
        self.realization = realization


class GuardError(ValueError):
    """Requested exact propagation exceeds the configured state count."""


@dataclass(frozen=True)
class PulseSpec:
    """Single-cycle pulse E0 exp(-((t - t_center)/sigma)^2) sin(2 pi f (t - t_center))."""

    E0: float = 1.2
    carrier: float = 0.5
    sigma: float = DEFAULT_SIGMA
    t_center: float = -7.0

    def __post_init__(self):
        if not self.E0 >= 0:
            raise ValueError("E0 must be non-negative")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.carrier >= 0:
            raise ValueError("carrier must be non-negative")

    @classmethod
    def from_fwhm(cls, E0, carrier=0.5, fwhm=1.0, t_center=-7.0):
        return cls(E0=E0, carrier=carrier, sigma=fwhm / (2.0 * math.sqrt(math.log(2.0))), t_center=t_center)

    @property
    def fwhm(self):
        return 2.0 * math.sqrt(math.log(2.0)) * self.sigma

    @property
    def window(self):
        return self.t_center - WINDOW_SIGMAS * self.sigma, self.t_center + WINDOW_SIGMAS * self.sigma

    def realized_peak(self, n=20001):
        """Largest |E(t)| on a fine grid (below E0 for a single-cycle pulse)."""
        lo, hi = self.window
        return float(np.max(np.abs(field_amplitude(np.linspace(lo, hi, n), self))))


def field_amplitude(t, p):
    """E(t) in MV/cm, zero outside +-10 sigma of the centre."""
    t = np.asarray(t, dtype=float)
    s = t - p.t_center
    e = p.E0 * np.exp(-((s / p.sigma) ** 2)) * np.sin(2.0 * np.pi * p.carrier * s)
    e = np.where(np.abs(s) <= WINDOW_SIGMAS * p.sigma, e, 0.0)
    return e if e.ndim else float(e)


@dataclass(frozen=True)
class PropagationConfig:
    dt: float = 0.002
    t_start: float = -15.0
    t_end: float = 125.0
    method: str = "split"
    norm_drift_tolerance: float = 1e-8
    sample_every: float = 0.05
    j_buffer: int = 20
    leakage_tolerance: float = 1e-6
    max_exact_states: int = 2000

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_end > self.t_start:
            raise ValueError("t_end must exceed t_start")
        if self.method not in METHOD_ALIASES:
            raise ValueError(f"method must be one of {sorted(METHOD_ALIASES)}")
        if not self.sample_every > 0:
            raise ValueError("sample_every must be positive")
        r = self.sample_every / self.dt
        if abs(r - round(r)) > 1e-9 or round(r) < 1:
            raise ValueError("sample_every must be an integer multiple of dt")
        if self.j_buffer < 0:
            raise ValueError("j_buffer must be non-negative")

    @property
    def integrator(self):
        return METHOD_ALIASES[self.method]

    @property
    def sample_times(self):
        n = int(math.floor((self.t_end - self.t_start) / self.sample_every + 1e-9))
        # rounded so grid points print as the decimals they stand for
        return np.round(self.t_start + self.sample_every * np.arange(n + 1), 12)


# ---------------------------------------------------------------------------
# engine


class _Sector:
    """Static data of one K-parity sector up to Jmax, for M = 0..M_max."""

    def __init__(self, rc, Jmax, M_max, p):
        lv = rotor_levels(rc, Jmax)
        self.p = p
        self.Jmax = Jmax
        self.Ks = np.array([K for K in range(-Jmax, Jmax + 1) if K % 2 == p])
        self.nK = self.Ks.size
        self.nJ = Jmax + 1
        self.lo = np.zeros(self.nJ, dtype=int)
        self.n = np.zeros(self.nJ, dtype=int)
        self.U, self.E, self.tau, self.wang = [], [], [], []
        self.Egrid = np.zeros((self.nK, self.nJ))
        for J in range(self.nJ):
            ks = self.Ks[np.abs(self.Ks) <= J]
            cols = np.nonzero(lv.parity[J] == p)[0]
            if ks.size != cols.size:
                raise AssertionError("parity classes do not match K counts")
            lo = int(np.searchsorted(self.Ks, ks[0])) if ks.size else 0
            self.lo[J], self.n[J] = lo, ks.size
            self.U.append(np.ascontiguousarray(lv.vectors[J][ks + J][:, cols]))
            self.E.append(lv.energies[J][cols])
            self.tau.append(cols + 1)
            self.wang.append(lv.wang[J][cols])
            self.Egrid[lo:lo + ks.size, J] = lv.energies[J][cols]
        self.chains = {M: self._chains(M) for M in range(M_max + 1)}

    def _chains(self, M):
        nJm = self.nJ - M
        Js = np.arange(M, self.nJ)
        d1 = np.zeros((self.nK, nJm))
        o1 = np.zeros((self.nK, max(nJm - 1, 0)))
        d2 = np.zeros((self.nK, nJm))
        o21 = np.zeros((self.nK, max(nJm - 1, 0)))
        o22 = np.zeros((self.nK, max(nJm - 2, 0)))
        for s, K in enumerate(self.Ks.tolist()):
            for r, J in enumerate(Js.tolist()):
                if abs(K) > J:
                    continue
                d1[s, r] = dcos_zero(1, J, J, K, M)
                d2[s, r] = dcos_zero(2, J, J, K, M)
                if r + 1 < nJm:
                    o1[s, r] = dcos_zero(1, J + 1, J, K, M)
                    o21[s, r] = dcos_zero(2, J + 1, J, K, M)
                if r + 2 < nJm:
                    o22[s, r] = dcos_zero(2, J + 2, J, K, M)
        lam = np.zeros((self.nK, nJm))
        V = np.zeros((self.nK, nJm, nJm))
        for s in range(self.nK):
            if nJm == 1:
                lam[s], V[s] = d1[s], 1.0
            else:
                lam[s], V[s] = eigh_tridiagonal(d1[s], o1[s])
        return {"d1": d1, "o1": o1, "d2": d2, "o21": o21, "o22": o22,
                "lam": lam, "V": V, "VT": np.ascontiguousarray(V.transpose(0, 2, 1))}

    # -- basis changes -----------------------------------------------------

    def transform(self, X, cend, inverse=False):
        """In place eigen -> symtop (or back) on every J shell."""
        Xf = X.view(float)
        for J in range(self.nJ):
            n, c = self.n[J], cend[J]
            if n == 0 or c == 0:
                continue
            lo = self.lo[J]
            U = self.U[J].T if inverse else self.U[J]
            Xf[lo:lo + n, J, :2 * c] = U @ Xf[lo:lo + n, J, :2 * c]

    def kick(self, X, groups, a):
        Xf = X.view(float)
        for M, c0, c1 in groups:
            ch = self.chains[M]
            Y = Xf[:, M:, 2 * c0:2 * c1]
            Z = np.matmul(ch["VT"], Y)
            Zc = Z.view(complex)
            Zc *= np.exp(1j * a * ch["lam"])[:, :, None]
            Xf[:, M:, 2 * c0:2 * c1] = np.matmul(ch["V"], Z)

    def apply_cos(self, Y, M):
        ch = self.chains[M]
        out = ch["d1"][:, :, None] * Y
        if Y.shape[1] > 1:
            o = ch["o1"][:, :, None]
            out[:, :-1] += o * Y[:, 1:]
            out[:, 1:] += o * Y[:, :-1]
        return out

    def apply_cos2(self, Y, M):
        ch = self.chains[M]
        out = (1.0 / 3.0 + (2.0 / 3.0) * ch["d2"])[:, :, None] * Y
        if Y.shape[1] > 1:
            o = (2.0 / 3.0) * ch["o21"][:, :, None]
            out[:, :-1] += o * Y[:, 1:]
            out[:, 1:] += o * Y[:, :-1]
        if Y.shape[1] > 2:
            o = (2.0 / 3.0) * ch["o22"][:, :, None]
            out[:, :-2] += o * Y[:, 2:]
            out[:, 2:] += o * Y[:, :-2]
        return out

    def eigen_operator(self, M, J, Jp, which):
        """<J' tau'| O |J tau> block (n_J' x n_J) for O = cos or cos^2 at fixed M."""
        ch = self.chains[M]
        dJ = Jp - J
        nJ, nJp = self.n[J], self.n[Jp]
        if nJ == 0 or nJp == 0:
            return np.zeros((nJp, nJ))
        # common K slots are those of the smaller shell
        Jc = min(J, Jp)
        lo, n = self.lo[Jc], self.n[Jc]
        r = J - M
        if which == "cos":
            vals = ch["d1"][lo:lo + n, r] if dJ == 0 else ch["o1"][lo:lo + n, r]
        else:
            if dJ == 0:
                vals = 1.0 / 3.0 + (2.0 / 3.0) * ch["d2"][lo:lo + n, r]
            elif dJ == 1:
                vals = (2.0 / 3.0) * ch["o21"][lo:lo + n, r]
            else:
                vals = (2.0 / 3.0) * ch["o22"][lo:lo + n, r]
        Ua = self.U[J][lo - self.lo[J]:lo - self.lo[J] + n]
        Ub = self.U[Jp][lo - self.lo[Jp]:lo - self.lo[Jp] + n]
        return Ub.T @ (vals[:, None] * Ua)


@dataclass
class SectorColumns:
    """Initial columns of one parity sector, sorted by M."""

    X: np.ndarray
    col_M: np.ndarray
    diag_weights: np.ndarray  # (n_diag, ncol)
    block_weights: list | None = None  # per group: (n_block, n_g, n_g)
    monitor: np.ndarray | None = None  # (ncol,) population weights for leakage

    def __post_init__(self):
        self.col_M = np.asarray(self.col_M, dtype=int)
        self.groups = []
        for M in np.unique(self.col_M).tolist():
            idx = np.nonzero(self.col_M == M)[0]
            self.groups.append((int(M), int(idx[0]), int(idx[-1]) + 1))


@dataclass
class EngineResult:
    times: np.ndarray
    cos: np.ndarray  # (n_traces, n_times)
    cos2: np.ndarray
    final: dict
    norm_drift: float
    leakage: float
    window: tuple
    block_norms: dict = field(default_factory=dict)


class Propagator:
    """Reusable propagation engine for a rotor up to Jmax and M <= M_max."""

    def __init__(self, rc, Jmax, M_max=None):
        if rc.mu < 0:
            raise ValueError("dipole must be non-negative")
        self.rc = rc
        self.Jmax = int(Jmax)
        self.M_max = self.Jmax if M_max is None else int(M_max)
        self.sectors = {p: _Sector(rc, self.Jmax, self.M_max, p) for p in (0, 1)}

    # -- helpers -------------------------------------------------------------

    def _cend(self, sec, col_M):
        # columns are sorted by M; shell J only touches columns with M <= J
        return np.searchsorted(col_M, np.arange(sec.nJ), side="right")

    @staticmethod
    def _kicks(pulse, cfg, mu):
        n_steps = int(round((cfg.t_end - cfg.t_start) / cfg.dt))
        tm = cfg.t_start + (np.arange(n_steps) + 0.5) * cfg.dt
        a = TWO_PI_C * coupling_strength(mu, 1.0) * field_amplitude(tm, pulse) * cfg.dt
        active = np.nonzero(np.abs(a) > KICK_SKIP)[0]
        if active.size == 0:
            return n_steps, a, None
        return n_steps, a, (int(active[0]), int(active[-1]) + 1)

    def _sample_values(self, sec, Xs, cols):
        """Per-column expectations and group Gram matrices from symtop amplitudes."""
        ncol = Xs.shape[2]
        e1 = np.zeros(ncol)
        e2 = np.zeros(ncol)
        G = []
        for M, c0, c1 in cols.groups:
            Y = Xs[:, M:, c0:c1]
            A1 = sec.apply_cos(Y, M)
            A2 = sec.apply_cos2(Y, M)
            if cols.block_weights is not None:
                Yr = Y.reshape(-1, c1 - c0)
                g1 = Yr.conj().T @ A1.reshape(-1, c1 - c0)
                g2 = Yr.conj().T @ A2.reshape(-1, c1 - c0)
                e1[c0:c1] = np.diagonal(g1).real
                e2[c0:c1] = np.diagonal(g2).real
                G.append((g1, g2))
            else:
                e1[c0:c1] = np.einsum("kjn,kjn->n", Y.conj(), A1).real
                e2[c0:c1] = np.einsum("kjn,kjn->n", Y.conj(), A2).real
        return e1, e2, G

    def _reduce(self, cols, e1, e2, G):
        v1 = cols.diag_weights @ e1
        v2 = cols.diag_weights @ e2
        if cols.block_weights is not None:
            b1 = np.zeros(cols.block_weights[0].shape[0])
            b2 = np.zeros_like(b1)
            for (g1, g2), R in zip(G, cols.block_weights):
                # Tr(G R) for every weight matrix R
                b1 += np.einsum("ij,rji->r", g1, R).real
                b2 += np.einsum("ij,rji->r", g2, R).real
            v1 = np.concatenate([v1, b1])
            v2 = np.concatenate([v2, b2])
        return v1, v2

    def _pair_amplitudes(self, sec, X, cols):
        """Eigenpair amplitudes A[r, pair] and frequencies (rad/ps) of cos and cos^2."""
        amps1, amps2, freqs = [], [], []
        n_tr = cols.diag_weights.shape[0] + (0 if cols.block_weights is None else cols.block_weights[0].shape[0])
        for J in range(sec.nJ):
            if sec.n[J] == 0:
                continue
            for Jp in range(J, min(J + 2, sec.Jmax) + 1):
                if sec.n[Jp] == 0:
                    continue
                A1 = np.zeros((n_tr, sec.n[J], sec.n[Jp]), dtype=complex)
                A2 = np.zeros_like(A1)
                for gi, (M, c0, c1) in enumerate(cols.groups):
                    if M > J:
                        continue
                    xa = X[sec.lo[J]:sec.lo[J] + sec.n[J], J, c0:c1]
                    xb = X[sec.lo[Jp]:sec.lo[Jp] + sec.n[Jp], Jp, c0:c1]
                    if not (xa.any() and xb.any()):
                        continue
                    rho = [np.einsum("ic,rc,jc->rij", xa, cols.diag_weights[:, c0:c1], xb.conj())]
                    if cols.block_weights is not None:
                        R = cols.block_weights[gi]
                        rho.append(np.einsum("ic,rcd,jd->rij", xa, R, xb.conj()))
                    rho = np.concatenate(rho)
                    if Jp - J <= 1:
                        A1 += sec.eigen_operator(M, J, Jp, "cos").T[None] * rho
                    A2 += sec.eigen_operator(M, J, Jp, "cos2").T[None] * rho
                f = 1.0 if Jp == J else 2.0
                w = TWO_PI_C * (sec.E[Jp][None, :] - sec.E[J][:, None])
                amps1.append(f * A1.reshape(n_tr, -1))
                amps2.append(f * A2.reshape(n_tr, -1))
                freqs.append(w.ravel())
        if not freqs:
            return np.zeros((n_tr, 0), complex), np.zeros((n_tr, 0), complex), np.zeros(0)
        return np.concatenate(amps1, axis=1), np.concatenate(amps2, axis=1), np.concatenate(freqs)

    @staticmethod
    def _evaluate_pairs(A, w, taus, chunk=64):
        """Re sum_pairs A exp(i w tau) for each tau, using a chunked phase recurrence."""
        out = np.zeros((A.shape[0], taus.size))
        keep = np.any(A != 0, axis=0)
        A, w = A[:, keep], w[keep]
        if w.size == 0 or taus.size == 0:
            return out
        uniform = taus.size > 1 and np.allclose(np.diff(taus), taus[1] - taus[0], rtol=0, atol=1e-12)
        if not uniform:
            return (A @ np.exp(1j * np.outer(w, taus))).real
        step = taus[1] - taus[0]
        base = np.exp(1j * np.outer(w, step * np.arange(chunk)))
        for s in range(0, taus.size, chunk):
            n = min(chunk, taus.size - s)
            ph = base[:, :n] * np.exp(1j * w * taus[s])[:, None]
            out[:, s:s + n] = (A @ ph).real
        return out

    def _analytic(self, sectors, Xref, t_ref, times):
        n_tr = None
        v1 = v2 = 0.0
        for p, cols in sectors.items():
            sec = self.sectors[p]
            A1, A2, w = self._pair_amplitudes(sec, Xref[p], cols)
            n_tr = A1.shape[0]
            v1 = v1 + self._evaluate_pairs(A1, w, times - t_ref)
            v2 = v2 + self._evaluate_pairs(A2, w, times - t_ref)
        if n_tr is None:
            raise ValueError("no columns to propagate")
        return v1, v2

    def _monitor(self, sec, X, cols):
        top = np.sum(np.abs(X[:, sec.Jmax, :]) ** 2, axis=0)
        w = cols.monitor if cols.monitor is not None else np.ones(X.shape[2])
        return float(np.dot(w, top))

    # -- main entry ------------------------------------------------------------

    def run(self, sectors, pulse, cfg):
        """Propagate the columns of every sector and return the weighted traces."""
        for p, cols in sectors.items():
            if cols.col_M.size and cols.col_M.max() > self.M_max:
                raise ValueError("column M exceeds the engine's M_max")
            if np.any(np.diff(cols.col_M) < 0):
                raise ValueError("columns must be sorted by M")
        times = cfg.sample_times
        n_steps, a, win = self._kicks(pulse, cfg, self.rc.mu)
        X0 = {p: c.X for p, c in sectors.items()}
        norms0 = {p: np.sum(np.abs(X) ** 2, axis=(0, 1)) for p, X in X0.items()}

        if win is None:
            t_w0 = t_w1 = cfg.t_end
        else:
            t_w0 = cfg.t_start + win[0] * cfg.dt
            t_w1 = cfg.t_start + win[1] * cfg.dt
        pre = times <= t_w0 + 1e-9
        post = (times >= t_w1 - 1e-9) & ~pre
        inside = ~(pre | post)

        out1 = np.zeros((self._n_traces(sectors), times.size))
        out2 = np.zeros_like(out1)
        if pre.any():
            v1, v2 = self._analytic(sectors, X0, cfg.t_start, times[pre])
            out1[:, pre], out2[:, pre] = v1, v2

        leakage = 0.0
        X = {}
        for p, X0p in X0.items():
            sec = self.sectors[p]
            phase = np.exp(-1j * TWO_PI_C * sec.Egrid * (t_w0 - cfg.t_start))
            X[p] = X0p * phase[:, :, None]

        if win is not None:
            sample_steps = {}
            for i in np.nonzero(inside)[0].tolist():
                sample_steps[int(round((times[i] - cfg.t_start) / cfg.dt))] = i
            if cfg.integrator == "split":
                leakage = self._split_window(sectors, X, a, win, cfg, sample_steps, out1, out2)
            else:
                leakage = self._rk4_window(sectors, X, pulse, win, cfg, sample_steps, out1, out2)

        drift = 0.0
        for p, Xp in X.items():
            n1 = np.sum(np.abs(Xp) ** 2, axis=(0, 1))
            ref = np.maximum(norms0[p], 1e-300)
            d = np.abs(n1 - norms0[p]) / ref
            d[norms0[p] == 0] = 0.0
            if d.size:
                worst = int(np.argmax(d))
                drift = max(drift, float(d[worst]))
                if d[worst] > cfg.norm_drift_tolerance:
                    raise PropagationError(
                        f"norm drift {d[worst]:.3e} exceeds tolerance {cfg.norm_drift_tolerance:.1e}",
                        "norm", column=(p, worst))
        for p in X:
            leakage = max(leakage, self._monitor(self.sectors[p], X[p], sectors[p]))
        if leakage > cfg.leakage_tolerance:
            raise PropagationError(
                f"top-shell population {leakage:.3e} exceeds {cfg.leakage_tolerance:.1e}; increase j_buffer",
                "leakage")

        if post.any():
            v1, v2 = self._analytic(sectors, X, t_w1, times[post])
            out1[:, post], out2[:, post] = v1, v2

        final = {}
        for p, Xp in X.items():
            phase = np.exp(-1j * TWO_PI_C * self.sectors[p].Egrid * (cfg.t_end - t_w1))
            final[p] = Xp * phase[:, :, None]
        block_norms = {}
        for p, Xp in final.items():
            cols = sectors[p]
            n0 = norms0[p]
            n1 = np.sum(np.abs(Xp) ** 2, axis=(0, 1))
            for M, c0, c1 in cols.groups:
                b = block_norms.setdefault(M, [0.0, 0.0])
                b[0] += float(n0[c0:c1].sum())
                b[1] += float(n1[c0:c1].sum())
        return EngineResult(times=times, cos=out1, cos2=out2, final=final, norm_drift=drift,
                            leakage=leakage, window=(t_w0, t_w1), block_norms=block_norms)

    @staticmethod
    def _n_traces(sectors):
        c = next(iter(sectors.values()))
        return c.diag_weights.shape[0] + (0 if c.block_weights is None else c.block_weights[0].shape[0])

    def _record(self, sectors, X, idx, out1, out2, phase=None):
        v1 = v2 = 0.0
        for p, Xp in X.items():
            sec = self.sectors[p]
            cols = sectors[p]
            Xs = Xp * phase[p][:, :, None] if phase is not None else Xp.copy()
            sec.transform(Xs, self._cend(sec, cols.col_M))
            e1, e2, G = self._sample_values(sec, Xs, cols)
            r1, r2 = self._reduce(cols, e1, e2, G)
            v1 = v1 + r1
            v2 = v2 + r2
        out1[:, idx], out2[:, idx] = v1, v2

    def _split_window(self, sectors, X, a, win, cfg, sample_steps, out1, out2):
        half = {p: np.exp(-1j * TWO_PI_C * self.sectors[p].Egrid * cfg.dt / 2)[:, :, None] for p in X}
        half2 = {p: h[:, :, 0] for p, h in half.items()}
        full = {p: h * h for p, h in half.items()}
        cend = {p: self._cend(self.sectors[p], sectors[p].col_M) for p in X}
        leakage = 0.0
        for p in X:
            X[p] *= half[p]
        n0, n1 = win
        for n in range(n0, n1):
            for p, Xp in X.items():
                sec = self.sectors[p]
                sec.transform(Xp, cend[p])
                sec.kick(Xp, sectors[p].groups, a[n])
                sec.transform(Xp, cend[p], inverse=True)
            if n + 1 < n1:
                idx = sample_steps.get(n + 1)
                if idx is not None:
                    self._record(sectors, X, idx, out1, out2, phase=half2)
                    for p, Xp in X.items():
                        leakage = max(leakage, self._monitor(self.sectors[p], Xp, sectors[p]))
                for p in X:
                    X[p] *= full[p]
        for p in X:
            X[p] *= half[p]
        return leakage

    def _rk4_window(self, sectors, X, pulse, win, cfg, sample_steps, out1, out2):
        # interaction picture y = exp(i H0 s) x with s measured from the window start
        n0, n1 = win
        mu_b = TWO_PI_C * coupling_strength(self.rc.mu, 1.0)
        t0 = cfg.t_start + n0 * cfg.dt
        cend = {p: self._cend(self.sectors[p], sectors[p].col_M) for p in X}
        egrid = {p: TWO_PI_C * self.sectors[p].Egrid[:, :, None] for p in X}

        def rhs(p, s, y, e):
            sec = self.sectors[p]
            ph = np.exp(-1j * egrid[p] * s)
            x = y * ph
            sec.transform(x, cend[p])
            out = np.zeros_like(x)
            for M, c0, c1 in sectors[p].groups:
                out[:, M:, c0:c1] = sec.apply_cos(x[:, M:, c0:c1], M)
            sec.transform(out, cend[p], inverse=True)
            return 1j * mu_b * e * out * ph.conj()

        leakage = 0.0
        Y = {p: Xp.copy() for p, Xp in X.items()}
        for n in range(n0, n1):
            s = (n - n0) * cfg.dt
            tn = t0 + s
            ea, em, eb = field_amplitude(np.array([tn, tn + cfg.dt / 2, tn + cfg.dt]), pulse)
            for p in Y:
                y = Y[p]
                k1 = rhs(p, s, y, ea)
                k2 = rhs(p, s + cfg.dt / 2, y + 0.5 * cfg.dt * k1, em)
                k3 = rhs(p, s + cfg.dt / 2, y + 0.5 * cfg.dt * k2, em)
                k4 = rhs(p, s + cfg.dt, y + cfg.dt * k3, eb)
                Y[p] = y + (cfg.dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            idx = sample_steps.get(n + 1)
            if idx is not None and n + 1 < n1:
                Xs = {p: Y[p] * np.exp(-1j * egrid[p] * (s + cfg.dt)) for p in Y}
                self._record(sectors, Xs, idx, out1, out2)
                for p, Xp in Xs.items():
                    leakage = max(leakage, self._monitor(self.sectors[p], Xp, sectors[p]))
        s_end = (n1 - n0) * cfg.dt
        for p in X:
            X[p] = Y[p] * np.exp(-1j * egrid[p] * s_end)
        return leakage


# ---------------------------------------------------------------------------
# general states


@dataclass
class StateVector:
    """Eigenbasis amplitudes per M block; block M is ordered (J, tau) for J = |M|..Jmax."""

    rc: object
    Jmax: int
    blocks: dict

    def __post_init__(self):
        for M, v in self.blocks.items():
            size = (self.Jmax + 1) ** 2 - abs(M) ** 2
            if v.shape != (size,):
                raise ValueError(f"block M={M} must have {size} amplitudes")
            self.blocks[M] = np.asarray(v, dtype=complex)

    @classmethod
    def eigenstate(cls, rc, Jmax, J, M, tau):
        v = np.zeros((Jmax + 1) ** 2 - M * M, dtype=complex)
        v[J * J - M * M + tau - 1] = 1.0
        return cls(rc, Jmax, {M: v})

    def norm(self):
        return float(sum(np.vdot(v, v).real for v in self.blocks.values()))

    def block_norms(self):
        return {M: float(np.vdot(v, v).real) for M, v in self.blocks.items()}

    def energy(self):
        lv = rotor_levels(self.rc, self.Jmax)
        tot = 0.0
        for M, v in self.blocks.items():
            E = np.concatenate(lv.energies[abs(M):self.Jmax + 1])
            tot += float(np.dot(np.abs(v) ** 2, E))
        return tot


def _state_columns(engine, state):
    """Split a StateVector into sector columns (one per M block and parity)."""
    per_p = {0: [], 1: []}
    for M in sorted(state.blocks, key=lambda m: (abs(m), m)):
        v = state.blocks[M]
        off = 0
        cols = {0: [], 1: []}
        for J in range(abs(M), state.Jmax + 1):
            chunk = v[off:off + 2 * J + 1]
            off += 2 * J + 1
            for p, sec in engine.sectors.items():
                taus = sec.tau[J] - 1
                amp = chunk[taus]
                if M < 0:
                    amp = amp * sec.wang[J]
                cols[p].append((J, amp))
        for p in (0, 1):
            per_p[p].append((M, cols[p]))
    sectors = {}
    for p, sec in engine.sectors.items():
        items = per_p[p]
        X = np.zeros((sec.nK, sec.nJ, len(items)), dtype=complex)
        col_M = np.array([abs(M) for M, _ in items], dtype=int)
        for c, (M, entries) in enumerate(items):
            for J, amp in entries:
                X[sec.lo[J]:sec.lo[J] + sec.n[J], J, c] = amp
        sectors[p] = SectorColumns(X=X, col_M=col_M, diag_weights=np.ones((1, len(items))),
                                   monitor=np.ones(len(items)))
    return sectors, per_p


def propagate(state, pulse, cfg, engine=None):
    """Propagate a StateVector; returns (ObservableTrace, final StateVector).

    The state must be normalized and its Jmax must leave room for the
    excitation (the top shell is monitored for leakage).
    """
    if abs(state.norm() - 1.0) > 1e-10:
        raise ValueError("state must be normalized")
    M_max = max(abs(M) for M in state.blocks)
    engine = engine or Propagator(state.rc, state.Jmax, M_max)
    if engine.Jmax != state.Jmax:
        raise ValueError("engine Jmax differs from the state's Jmax")
    sectors, per_p = _state_columns(engine, state)
    res = engine.run(sectors, pulse, cfg)
    blocks = {}
    for p, sec in engine.sectors.items():
        Xf = res.final[p]
        for c, (M, entries) in enumerate(per_p[p]):
            v = blocks.setdefault(M, np.zeros_like(state.blocks[M]))
            off = 0
            for J in range(abs(M), state.Jmax + 1):
                amp = Xf[sec.lo[J]:sec.lo[J] + sec.n[J], J, c]
                if M < 0:
                    amp = amp * sec.wang[J]
                v[off + sec.tau[J] - 1] = amp
                off += 2 * J + 1
    trace = ObservableTrace(res.times, res.cos[0], res.cos2[0], {
        "method": "state", "pulse": pulse.__dict__, "dt": cfg.dt, "integrator": cfg.integrator,
        "norm_drift": res.norm_drift, "leakage": res.leakage,
    })
    return trace, StateVector(state.rc, state.Jmax, blocks)


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class _Levels:
    """Ensemble states folded onto M >= 0 columns."""

    J: np.ndarray
    tau: np.ndarray
    M: np.ndarray  # |M|
    weight: np.ndarray  # weight of one signed state
    mult: np.ndarray  # 1 for M = 0, 2 otherwise


def _fold(ensemble):
    keep = ensemble.M >= 0
    J = ensemble.J[keep]
    tau = ensemble.tau[keep]
    M = ensemble.M[keep]
    w = ensemble.weight[keep]
    order = np.lexsort((tau, J, M))
    J, tau, M, w = J[order], tau[order], M[order], w[order]
    return _Levels(J, tau, M, w, np.where(M == 0, 1, 2))


def propagation_jmax(ensemble, cfg):
    return ensemble.Jmax_populated + cfg.j_buffer


@dataclass
class RpwfSet:
    """Realizations ``ks`` of ``master_seed`` averaged into one trace."""

    master_seed: int
    ks: np.ndarray

    @property
    def N_r(self):
        return int(len(self.ks))


@dataclass
class EnsembleDynamics:
    exact: ObservableTrace
    rpwf: list
    diagnostics: dict


def _check_guard(n_states, cfg, what="exact"):
    if n_states > cfg.max_exact_states:
        raise GuardError(
            f"{what} propagation of {n_states} states exceeds max_exact_states={cfg.max_exact_states}; "
            "use the RPWF direct mode or raise the guard")


def _meta(ensemble, pulse, cfg, **extra):
    d = {"temperature": ensemble.temperature, "n_states": ensemble.n_states, "pulse": dict(pulse.__dict__),
         "peak_field_realized": pulse.realized_peak(), "dt": cfg.dt, "integrator": cfg.integrator,
         "j_buffer": cfg.j_buffer, "cutoff": ensemble.cutoff}
    d.update(extra)
    return d


def ensemble_dynamics(ensemble, pulse, cfg, rpwf_sets=(), engine=None):
    """Exact ensemble trace plus RPWF traces by superposition of propagated eigenstates.

    Every ensemble eigenstate is propagated once. A realization is the
    linear combination sum_a sqrt(w_a) exp(i theta_a) |a(t)>, so its average
    over a realization set is Tr(O(t) R) with R the realization-averaged
    coefficient outer product, evaluated per (M, parity) block.
    """
    _check_guard(ensemble.n_states, cfg)
    lv = _fold(ensemble)
    Jmax = propagation_jmax(ensemble, cfg)
    engine = engine or Propagator(ensemble.rc, Jmax, int(lv.M.max()))
    if engine.Jmax < Jmax:
        raise ValueError("engine Jmax too small for the ensemble")
    # row index of each signed ensemble state
    pos = {(J, M, t): i for i, (J, M, t) in enumerate(zip(ensemble.J.tolist(), ensemble.M.tolist(), ensemble.tau.tolist()))}
    sets = list(rpwf_sets)
    phases = [phase_matrix(s.master_seed, s.ks, ensemble.n_states) for s in sets]
    sw = np.sqrt(ensemble.weight)

    parity = rotor_levels(ensemble.rc, Jmax).parity
    sectors = {}
    for p, sec in engine.sectors.items():
        par = np.array([parity[j][t - 1] == p for j, t in zip(lv.J.tolist(), lv.tau.tolist())], dtype=bool)
        J, tau, M, w, mult = lv.J[par], lv.tau[par], lv.M[par], lv.weight[par], lv.mult[par]
        local = np.array([int(np.searchsorted(sec.tau[j], t)) for j, t in zip(J.tolist(), tau.tolist())], dtype=int)
        eps = np.array([sec.wang[j][i] for j, i in zip(J.tolist(), local.tolist())], dtype=float)
        ncol = J.size
        X = np.zeros((sec.nK, sec.nJ, ncol), dtype=complex)
        X[sec.lo[J] + local, J, np.arange(ncol)] = 1.0
        blocks = None
        if sets:
            blocks = []
            for Mg in np.unique(M).tolist():
                idx = np.nonzero(M == Mg)[0]
                rows = [pos[(int(J[c]), Mg, int(tau[c]))] for c in idx]
                Rs = []
                for th in phases:
                    # R_ab = mean_k beta_a beta_b^*, beta = realization coefficients
                    beta = sw[rows] * np.exp(1j * th[:, rows])
                    R = beta.T @ beta.conj()
                    if Mg > 0:
                        rows_m = [pos[(int(J[c]), -Mg, int(tau[c]))] for c in idx]
                        beta = sw[rows_m] * np.exp(1j * th[:, rows_m]) * eps[idx]
                        R = R + beta.T @ beta.conj()
                    Rs.append(R / th.shape[0])
                blocks.append(np.stack(Rs))
        sectors[p] = SectorColumns(X=X, col_M=M.astype(int), diag_weights=(w * mult)[None, :],
                                   block_weights=blocks, monitor=w * mult)
    res = engine.run(sectors, pulse, cfg)
    exact = ObservableTrace(res.times, res.cos[0], res.cos2[0],
                            _meta(ensemble, pulse, cfg, method="exact", norm_drift=res.norm_drift,
                                  leakage=res.leakage, Jmax=engine.Jmax))
    traces = []
    for i, s in enumerate(sets):
        traces.append(ObservableTrace(res.times, res.cos[1 + i], res.cos2[1 + i],
                                      _meta(ensemble, pulse, cfg, method="rpwf", mode="superposition",
                                            N_r=s.N_r, seed=s.master_seed, Jmax=engine.Jmax)))
    diag = {"norm_drift": res.norm_drift, "leakage": res.leakage, "window": res.window,
            "block_norms": res.block_norms, "Jmax": engine.Jmax}
    return EnsembleDynamics(exact=exact, rpwf=traces, diagnostics=diag)


def exact_ensemble_run(ensemble, pulse, cfg, engine=None):
    """Thermally weighted sum of independently propagated eigenstates."""
    return ensemble_dynamics(ensemble, pulse, cfg, engine=engine).exact


@dataclass
class RpwfRun:
    trace: ObservableTrace
    realizations: list
    diagnostics: dict


def rpwf_direct(ensemble, pulse, cfg, master_seed, ks, keep_realizations=False, engine=None, chunk=None):
    """Propagate each realization as its own wavefunction.

    Columns are the (M, parity) pieces of the realizations; the -M pieces
    are folded onto +M with the Wang signs. Realizations are processed in
    chunks; results do not depend on the chunk size.
    """
    ks = np.asarray(ks)
    if ks.size < 1:
        raise ValueError("N_r must be at least 1")
    lv = _fold(ensemble)
    Jmax = propagation_jmax(ensemble, cfg)
    engine = engine or Propagator(ensemble.rc, Jmax, int(lv.M.max()))
    pos = {(J, M, t): i for i, (J, M, t) in enumerate(zip(ensemble.J.tolist(), ensemble.M.tolist(), ensemble.tau.tolist()))}
    sw = np.sqrt(ensemble.weight)
    Ms = np.unique(lv.M).tolist()
    chunk = chunk or max(1, int(4096 // (2 * len(Ms))))
    cos_sum = None
    cos2_sum = None
    per_real = []
    drift = leak = 0.0
    # static layout per sector: for each (|M|, sign) the ensemble rows and target slots
    layout = {}
    for p, sec in engine.sectors.items():
        entries = []
        for Mg in Ms:
            for sign in ((1,) if Mg == 0 else (1, -1)):
                rows, slots, Js, eps = [], [], [], []
                for J in range(Mg, ensemble.Jmax_populated + 1):
                    for i, t in enumerate(sec.tau[J].tolist()):
                        r = pos.get((J, sign * Mg, t))
                        if r is None:
                            continue
                        rows.append(r)
                        slots.append(sec.lo[J] + i)
                        Js.append(J)
                        eps.append(sec.wang[J][i] if sign < 0 else 1)
                if rows:
                    entries.append((Mg, np.array(rows), np.array(slots), np.array(Js), np.array(eps, dtype=float)))
        layout[p] = entries
    for s in range(0, ks.size, chunk):
        kk = ks[s:s + chunk]
        th = phase_matrix(master_seed, kk, ensemble.n_states)
        amps = sw * np.exp(1j * th)  # (nk, n_states)
        sectors = {}
        for p, sec in engine.sectors.items():
            ent = layout[p]
            ncol = len(ent) * kk.size
            X = np.zeros((sec.nK, sec.nJ, ncol), dtype=complex)
            col_M = np.zeros(ncol, dtype=int)
            owner = np.zeros(ncol, dtype=int)
            c = 0
            for Mg, rows, slots, Js, eps in ent:
                X[slots, Js, c:c + kk.size] = (amps[:, rows] * eps).T
                col_M[c:c + kk.size] = Mg
                owner[c:c + kk.size] = np.arange(kk.size)
                c += kk.size
            W = np.zeros((kk.size, ncol))
            W[owner, np.arange(ncol)] = 1.0
            mon = np.full(ncol, 1.0 / kk.size)
            sectors[p] = SectorColumns(X=X, col_M=col_M, diag_weights=W, monitor=mon)
        try:
            res = engine.run(sectors, pulse, cfg)
        except PropagationError as err:
            if err.column is not None:
                p, col = err.column
                W = sectors[p].diag_weights
                err.realization = int(kk[int(np.argmax(W[:, col]))])
                err.args = (f"{err.args[0]} (realization {err.realization})",)
            raise
        drift = max(drift, res.norm_drift)
        leak = max(leak, res.leakage)
        c1 = res.cos.sum(axis=0)
        c2 = res.cos2.sum(axis=0)
        cos_sum = c1 if cos_sum is None else cos_sum + c1
        cos2_sum = c2 if cos2_sum is None else cos2_sum + c2
        if keep_realizations:
            for i, k in enumerate(kk.tolist()):
                per_real.append(ObservableTrace(res.times, res.cos[i], res.cos2[i],
                                                {"method": "rpwf-realization", "k": k, "seed": master_seed}))
    trace = ObservableTrace(res.times, cos_sum / ks.size, cos2_sum / ks.size,
                            _meta(ensemble, pulse, cfg, method="rpwf", mode="direct", N_r=int(ks.size),
                                  seed=int(master_seed), Jmax=engine.Jmax))
    return RpwfRun(trace=trace, realizations=per_real,
                   diagnostics={"norm_drift": drift, "leakage": leak, "Jmax": engine.Jmax})


def rpwf_ensemble_run(ensemble, pulse, cfg, master_seed, N_r, mode="auto", keep_realizations=False, engine=None):
    """RPWF average over realizations k = 0..N_r-1 of ``master_seed``.

    ``mode="superposition"`` reuses exact eigenstate propagations (cheap
    when N_r is large), ``mode="direct"`` propagates each realization (cheap
    when the ensemble is large and N_r small). ``"auto"`` picks the
    smaller column count.
    """
    if N_r < 1:
        raise ValueError("N_r must be at least 1")
    ks = np.arange(N_r)
    n_levels = int(np.sum(ensemble.M >= 0))
    n_direct = N_r * (2 * ensemble.Jmax_populated + 1) * 2
    if mode == "auto":
        mode = "superposition" if (n_levels <= n_direct and n_levels <= cfg.max_exact_states) else "direct"
    if mode == "superposition":
        if keep_realizations:
            sets = [RpwfSet(master_seed, ks)] + [RpwfSet(master_seed, np.array([k])) for k in ks]
        else:
            sets = [RpwfSet(master_seed, ks)]
        dyn = ensemble_dynamics(ensemble, pulse, cfg, sets, engine=engine)
        reals = []
        for k, tr in zip(ks.tolist(), dyn.rpwf[1:]):
            tr.metadata.update(method="rpwf-realization", k=k)
            reals.append(tr)
        run = RpwfRun(trace=dyn.rpwf[0], realizations=reals, diagnostics=dict(dyn.diagnostics))
        run.diagnostics["exact"] = dyn.exact
        return run
    if mode != "direct":
        raise ValueError("mode must be 'auto', 'superposition' or 'direct'")
    return rpwf_direct(ensemble, pulse, cfg, master_seed, ks, keep_realizations, engine=engine)
