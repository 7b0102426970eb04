"""Random Phase Wave Functions: sampling, averaging and static observables.

A realization carries amplitudes sqrt(w) * exp(i theta) over the ensemble
states, with phases drawn from a Philox stream keyed by (master_seed, k).
The stream of realization k therefore does not depend on which other
realizations are drawn or in what order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .angular import dcos_zero, rotor_levels

COMPLETENESS_MAX_DIM = 500
SEED_MASK = (1 << 64) - 1


@dataclass
class RpwfState:
    amplitudes: np.ndarray
    k: int
    seed: int

    @property
    def phases(self):
        return np.mod(np.angle(self.amplitudes), 2 * np.pi)

    @property
    def norm(self):
        return float(np.vdot(self.amplitudes, self.amplitudes).real)


@dataclass
class RealizationBatch:
    """Per-realization values, first axis indexing realizations in k order."""

    master_seed: int
    values: np.ndarray
    ks: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.ks is None:
            self.ks = np.arange(self.values.shape[0]) if self.values.ndim else np.arange(0)

    @property
    def N_r(self):
        return int(self.values.shape[0]) if self.values.ndim else 0


def _check_seed(master_seed):
    if not 0 <= int(master_seed) <= SEED_MASK:
        raise ValueError(f"master_seed must be an unsigned 64-bit integer, got {master_seed}")
    return int(master_seed)


def phase_stream(master_seed, k, n):
    """``n`` phases in [0, 2 pi) for realization ``k``."""
    key = (_check_seed(master_seed) << 64) | (int(k) & SEED_MASK)
    gen = np.random.Generator(np.random.Philox(key=key))
    return 2.0 * np.pi * gen.random(n)


def phase_matrix(master_seed, ks, n):
    """Stacked phase streams, shape (len(ks), n)."""
    out = np.empty((len(ks), n))
    for i, k in enumerate(ks):
        out[i] = phase_stream(master_seed, k, n)
    return out


def sample_rpwf(ensemble, master_seed, k):
    theta = phase_stream(master_seed, k, ensemble.n_states)
    amps = np.sqrt(ensemble.weight) * np.exp(1j * theta)
    return RpwfState(amplitudes=amps, k=int(k), seed=int(master_seed))


def average_observable(batch):
    """Mean over realizations, summed in k order."""
    if batch.N_r < 1:
        raise ValueError("cannot average an empty realization batch")
    vals = batch.values
    acc = np.zeros(vals.shape[1:])
    for v in vals:
        acc = acc + v
    return acc / batch.N_r


def average_projector(ensemble, master_seed, N_r):
    n = ensemble.n_states
    if n > COMPLETENESS_MAX_DIM:
        raise ValueError(f"ensemble dimension {n} exceeds the completeness guard {COMPLETENESS_MAX_DIM}")
    if N_r < 1:
        raise ValueError("N_r must be at least 1")
    amps = np.sqrt(ensemble.weight) * np.exp(1j * phase_matrix(master_seed, range(N_r), n))
    return amps.T @ amps.conj() / N_r


def completeness_deviation(ensemble, master_seed, N_r):
    """Frobenius distance of the averaged projector from diag(weights)."""
    P = average_projector(ensemble, master_seed, N_r)
    return float(np.linalg.norm(P - np.diag(ensemble.weight)))


# ---------------------------------------------------------------------------
# static expectation values


class EigenBlocks:
    """cos(theta) and cos^2(theta) blocks between J shells in the eigenbasis.

    Blocks are restricted to the ensemble's (J, tau) levels and built for
    M >= 0 only; the -M blocks follow from the Wang signs. Used for the
    exact thermal values and the single-realization variance.
    """

    def __init__(self, ensemble):
        self.ensemble = ensemble
        lv = rotor_levels(ensemble.rc, ensemble.Jmax_populated)
        self.taus = _level_taus(ensemble)
        self.wang = {J: lv.wang[J][t] for J, t in self.taus.items()}
        self.index = _row_index(ensemble, self.taus)
        self.blocks = {}
        for M in range(ensemble.Jmax_populated + 1):
            for J in (J for J in self.taus if J >= M):
                for Jp in (J, J + 1, J + 2):
                    if Jp not in self.taus:
                        continue
                    b1 = self._block(lv, 1, Jp, J, M) if Jp - J <= 1 else None
                    b2 = (2.0 / 3.0) * self._block(lv, 2, Jp, J, M)
                    if Jp == J:
                        b2 += np.eye(b2.shape[0]) / 3.0
                    self.blocks[(M, J, Jp)] = (b1, b2)

    def _block(self, lv, l, Jp, J, M):
        Ks = np.arange(-min(J, Jp), min(J, Jp) + 1)
        d = np.array([dcos_zero(l, Jp, J, int(K), M) for K in Ks])
        Ua = lv.vectors[J][Ks + J][:, self.taus[J]]
        Ub = lv.vectors[Jp][Ks + Jp][:, self.taus[Jp]]
        return Ub.T @ (d[:, None] * Ua)

    def _pairs(self):
        """(J, J', rows of J, rows of J', cos block, cos^2 block) for every signed M."""
        for (M, J, Jp), (b1, b2) in self.blocks.items():
            ia = self.index[J][:, J + M]
            ib = self.index[Jp][:, Jp + M]
            yield J, Jp, ia, ib, b1, b2
            if M:
                s = np.outer(self.wang[Jp], self.wang[J])
                ia = self.index[J][:, J - M]
                ib = self.index[Jp][:, Jp - M]
                yield J, Jp, ia, ib, None if b1 is None else s * b1, s * b2

    def thermal(self):
        """Exact thermal values (diagonal weighted trace)."""
        w = self.ensemble.weight
        out1 = out2 = 0.0
        for J, Jp, ia, ib, b1, b2 in self._pairs():
            if Jp != J:
                continue
            if b1 is not None:
                out1 += float(np.dot(w[ia], np.diag(b1)))
            out2 += float(np.dot(w[ia], np.diag(b2)))
        return out1, out2

    def variance(self):
        """Single-realization variances sum_{a != b} w_a w_b O_ab^2 of both observables."""
        w = self.ensemble.weight
        v1 = v2 = 0.0
        for J, Jp, ia, ib, b1, b2 in self._pairs():
            ww = np.outer(w[ib], w[ia])
            f = 1.0 if Jp == J else 2.0
            if b1 is not None:
                m1 = b1**2 * ww
                v1 += f * (m1.sum() - (np.trace(m1) if Jp == J else 0.0))
            m2 = b2**2 * ww
            v2 += f * (m2.sum() - (np.trace(m2) if Jp == J else 0.0))
        return float(v1), float(v2)


def _level_taus(ensemble):
    taus = {}
    for J, t in zip(ensemble.J.tolist(), ensemble.tau.tolist()):
        taus.setdefault(J, set()).add(t - 1)
    return {J: np.array(sorted(v)) for J, v in sorted(taus.items())}


def _row_index(ensemble, taus):
    """index[J][i, M + J]: ensemble row of (J, taus[J][i], M)."""
    index = {J: np.full((t.size, 2 * J + 1), -1) for J, t in taus.items()}
    pos = {J: {int(t): i for i, t in enumerate(ts)} for J, ts in taus.items()}
    for row, (J, M, t) in enumerate(zip(ensemble.J.tolist(), ensemble.M.tolist(), ensemble.tau.tolist())):
        index[J][pos[J][t - 1], M + J] = row
    return index


class StaticOperators:
    """Fast static <cos> and <cos^2> for many amplitude vectors at once.

    Amplitudes are rotated to the symmetric-top basis one J shell at a
    time (all M and realizations in a single product) where both
    operators are short chains in J at fixed (K, M).
    """

    def __init__(self, ensemble):
        self.ensemble = ensemble
        lv = rotor_levels(ensemble.rc, ensemble.Jmax_populated)
        self.taus = _level_taus(ensemble)
        self.index = _row_index(ensemble, self.taus)
        self.U = {J: np.ascontiguousarray(lv.vectors[J][:, t]) for J, t in self.taus.items()}
        self.coef = {}
        for J in self.taus:
            for l, dJ in ((1, 0), (1, 1), (2, 0), (2, 1), (2, 2)):
                Jp = J + dJ
                if Jp not in self.taus:
                    continue
                grid = np.array([[dcos_zero(l, Jp, J, K, M) for M in range(-J, J + 1)] for K in range(-J, J + 1)])
                if l == 2:
                    grid *= 2.0 / 3.0
                    if dJ == 0:
                        grid += 1.0 / 3.0
                self.coef[(l, J, dJ)] = grid

    def _symtop(self, amps, J):
        C = amps[self.index[J]]  # (n_tau, 2J+1, N)
        n_tau, nM, N = C.shape
        X = self.U[J] @ C.view(float).reshape(n_tau, nM * 2 * N)
        return X.reshape(2 * J + 1, nM, 2 * N).view(complex)

    def expectations(self, amps):
        """<cos>, <cos^2> for amplitude columns ``amps`` of shape (n_states, N)."""
        amps = np.ascontiguousarray(amps, dtype=complex)
        N = amps.shape[1]
        e1 = np.zeros(N)
        e2 = np.zeros(N)
        Js = list(self.taus)
        X = {}
        for J in reversed(Js):
            X[J] = self._symtop(amps, J)
            for l, dJ, acc in ((1, 0, e1), (1, 1, e1), (2, 0, e2), (2, 1, e2), (2, 2, e2)):
                c = self.coef.get((l, J, dJ))
                if c is None:
                    continue
                Xa = X[J].view(float)
                if dJ == 0:
                    prod = np.einsum("km,kmn->n", c, Xa * Xa)
                else:
                    Xb = X[J + dJ][dJ:-dJ, dJ:-dJ].view(float)
                    prod = 2.0 * np.einsum("km,kmn->n", c, Xb * Xa)
                # Re(conj(b) a) = b.re a.re + b.im a.im
                acc += prod.reshape(N, 2).sum(axis=1)
            X.pop(J + 2, None)
        return e1, e2


def static_thermal(ensemble):
    """Exact thermal <cos> and <cos^2> of the ensemble."""
    return EigenBlocks(ensemble).thermal()


def static_variance(ensemble):
    """Variance of single-realization <cos> and <cos^2> around the thermal value."""
    return EigenBlocks(ensemble).variance()


def rpwf_amplitudes(ensemble, master_seed, ks):
    """Amplitude columns sqrt(w) exp(i theta_k), shape (n_states, len(ks))."""
    theta = phase_matrix(master_seed, ks, ensemble.n_states).T
    sw = np.sqrt(ensemble.weight)[:, None]
    amps = np.empty(theta.shape, dtype=complex)
    amps.real = sw * np.cos(theta)
    amps.imag = sw * np.sin(theta)
    return amps


def static_realizations(ensemble, master_seed, ks, ops=None, chunk=512):
    """Per-realization static <cos>, <cos^2> and <H0> for realizations ``ks``."""
    ops = StaticOperators(ensemble) if ops is None else ops
    ks = np.asarray(ks)
    e1 = np.empty(ks.size)
    e2 = np.empty(ks.size)
    en = np.empty(ks.size)
    for s in range(0, ks.size, chunk):
        kk = ks[s:s + chunk]
        amps = rpwf_amplitudes(ensemble, master_seed, kk)
        e1[s:s + kk.size], e2[s:s + kk.size] = ops.expectations(amps)
        en[s:s + kk.size] = ensemble.energy @ (amps.real**2 + amps.imag**2)
    return e1, e2, en
