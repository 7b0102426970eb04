"""Symmetric-top basis, Wigner 3j symbols and asymmetric-top operators.

The symmetric-top kets |J K M> are quantized along the molecular a-axis,
so the field-free Hamiltonian couples only dK = 0, +-2 inside a J block and
the a-axis direction cosine couples dK = 0. Everything here is pure and
M-blocked: a Z-polarized field never mixes different M.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

HERMITIAN_TOL = 1e-12


@dataclass(frozen=True)
class RotorConstants:
    """Rotational constants (cm^-1) and a-axis dipole (Debye)."""

    A: float
    B: float
    C: float
    mu: float = 0.0

    def __post_init__(self):
        if not (self.A >= self.B >= self.C > 0):
            raise ValueError(f"rotational constants must satisfy A >= B >= C > 0, got {self.A}, {self.B}, {self.C}")
        if self.mu < 0:
            raise ValueError(f"dipole moment must be non-negative, got {self.mu}")


SO2 = RotorConstants(A=2.028, B=0.3442, C=0.2935, mu=1.62)


@dataclass(frozen=True)
class SymTopKet:
    J: int
    K: int
    M: int

    def __post_init__(self):
        if self.J < 0:
            raise ValueError("J must be non-negative")
        if abs(self.K) > self.J or abs(self.M) > self.J:
            raise ValueError(f"|K| and |M| must not exceed J: {self}")


@dataclass(frozen=True)
class MBlockBasis:
    """Ordered (J, K) pairs of one M block, ascending J then K."""

    M: int
    Jmax: int
    entries: tuple

    @property
    def size(self):
        return len(self.entries)

    @property
    def J_values(self):
        return range(abs(self.M), self.Jmax + 1)

    def offset(self, J):
        """Position of (J, -J) in the ordering."""
        Jmin = abs(self.M)
        return J * J - Jmin * Jmin

    def index(self, J, K):
        if not (abs(self.M) <= J <= self.Jmax and abs(K) <= J):
            raise KeyError((J, K))
        return self.offset(J) + K + J


@dataclass
class AsymEigenstate:
    """Eigenstate |J M tau> = sum_K coeffs[K + J] |J K M>."""

    J: int
    M: int
    tau: int
    energy: float
    coeffs: np.ndarray
    wang: int = 0

    @property
    def parity(self):
        """Parity of the K values this state is built from (0 even, 1 odd)."""
        k = int(np.argmax(np.abs(self.coeffs))) - self.J
        return k % 2


@dataclass
class SparseOperator:
    """Real symmetric operator on one M block.

    ``basis`` is ``"symtop"`` (labels are (J, K)) or ``"eigen"`` (labels are
    (J, tau)).
    """

    M: int
    matrix: sp.csr_array
    basis: str
    labels: tuple
    block: MBlockBasis | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.basis not in ("symtop", "eigen"):
            raise ValueError(f"unknown basis tag {self.basis!r}")
        self.matrix = sp.csr_array(self.matrix)

    @property
    def shape(self):
        return self.matrix.shape

    def entries(self):
        coo = self.matrix.tocoo()
        return [(int(r), int(c), float(v)) for r, c, v in zip(coo.row, coo.col, coo.data)]

    def toarray(self):
        return self.matrix.toarray()

    def is_hermitian(self, tol=HERMITIAN_TOL):
        diff = self.matrix - self.matrix.T
        if diff.nnz == 0:
            return True
        scale = max(1.0, float(np.max(np.abs(self.matrix.data))) if self.matrix.nnz else 1.0)
        return float(np.max(np.abs(diff.data))) <= tol * scale


# ---------------------------------------------------------------------------
# Wigner 3j


@lru_cache(maxsize=None)
def _wigner3j(j1, j2, j3, m1, m2, m3):
    if m1 + m2 + m3 != 0:
        return 0.0
    if j3 > j1 + j2 or j3 < abs(j1 - j2):
        return 0.0
    if abs(m1) > j1 or abs(m2) > j2 or abs(m3) > j3:
        return 0.0
    f = math.factorial
    tmin = max(0, j2 - j3 - m1, j1 - j3 + m2)
    tmax = min(j1 + j2 - j3, j1 - m1, j2 + m2)
    s = Fraction(0)
    for t in range(tmin, tmax + 1):
        den = f(t) * f(j3 - j2 + t + m1) * f(j3 - j1 + t - m2) * f(j1 + j2 - j3 - t) * f(j1 - t - m1) * f(j2 - t + m2)
        s += Fraction(-1 if t % 2 else 1, den)
    if s == 0:
        return 0.0
    num = (
        f(j1 + j2 - j3) * f(j1 - j2 + j3) * f(-j1 + j2 + j3)
        * f(j1 + m1) * f(j1 - m1) * f(j2 + m2) * f(j2 - m2) * f(j3 + m3) * f(j3 - m3)
    )
    square = Fraction(num, f(j1 + j2 + j3 + 1)) * s * s
    sign = -1.0 if (j1 - j2 - m3) % 2 else 1.0
    if s < 0:
        sign = -sign
    return sign * math.sqrt(square)


def wigner3j(j1, j2, j3, m1, m2, m3):
    """Wigner 3j symbol for integer arguments (exact rational Racah sum)."""
    args = (j1, j2, j3, m1, m2, m3)
    if any(int(a) != a for a in args):
        raise ValueError(f"integer arguments required, got {args}")
    j1, j2, j3, m1, m2, m3 = (int(a) for a in args)
    if min(j1, j2, j3) < 0:
        raise ValueError(f"angular momenta must be non-negative, got {(j1, j2, j3)}")
    return _wigner3j(j1, j2, j3, m1, m2, m3)


# ---------------------------------------------------------------------------
# basis and Hamiltonian


def build_mblock_basis(Jmax, M):
    if Jmax < abs(M):
        raise ValueError(f"Jmax={Jmax} is smaller than |M|={abs(M)}")
    entries = tuple((J, K) for J in range(abs(M), Jmax + 1) for K in range(-J, J + 1))
    return MBlockBasis(M=M, Jmax=Jmax, entries=entries)


def hamiltonian_j_block(rc, J):
    """Dense (2J+1)x(2J+1) field-free Hamiltonian of one J, rows K = -J..J."""
    Ks = np.arange(-J, J + 1)
    jj = J * (J + 1)
    h = np.diag(0.5 * (rc.B + rc.C) * (jj - Ks**2) + rc.A * Ks**2).astype(float)
    pref = 0.25 * (rc.B - rc.C)
    for i in range(2 * J - 1):
        K = int(Ks[i])
        v = pref * math.sqrt((jj - K * (K + 1)) * (jj - (K + 1) * (K + 2)))
        h[i, i + 2] = h[i + 2, i] = v
    return h


def asym_hamiltonian(basis, rc):
    rows, cols, vals = [], [], []
    for J in basis.J_values:
        h = hamiltonian_j_block(rc, J)
        off = basis.offset(J)
        nz = np.nonzero(h)
        rows.extend(off + nz[0])
        cols.extend(off + nz[1])
        vals.extend(h[nz])
    n = basis.size
    mat = sp.csr_array((vals, (rows, cols)), shape=(n, n))
    return SparseOperator(M=basis.M, matrix=mat, basis="symtop", labels=basis.entries, block=basis)


def _wang_transform(J):
    """Orthogonal map from Wang combinations to |K>, plus (K parity, symmetry) class per column."""
    n = 2 * J + 1
    W = np.zeros((n, n))
    classes = []
    W[J, 0] = 1.0
    classes.append((0, 1))
    col = 1
    s = 1.0 / math.sqrt(2.0)
    for K in range(1, J + 1):
        for eps in (1, -1):
            W[J + K, col] = s
            W[J - K, col] = eps * s
            classes.append((K % 2, eps))
            col += 1
    return W, classes


def _fix_sign(v):
    a = np.abs(v)
    i = int(np.argmax(a >= a.max() - 1e-10))
    if v[i] < 0:
        v = -v
    return v, i


def diagonalize_j(h, J, tol=1e-12):
    """Eigen-decomposition of one J block in tau order.

    Returns (energies, vectors, wang) where vectors[:, tau-1] holds A_K over
    K = -J..J and wang is +-1 when the state is even/odd under K -> -K (0 if
    the block had no such symmetry).
    """
    n = 2 * J + 1
    W, classes = _wang_transform(J)
    hw = W.T @ h @ W
    labels = np.array([2 * p + (0 if e > 0 else 1) for p, e in classes])
    mask = labels[:, None] != labels[None, :]
    scale = max(1.0, float(np.max(np.abs(h))))
    energies, vectors, wang = [], [], []
    if np.all(np.abs(hw[mask]) <= tol * scale):
        for lab in range(4):
            idx = np.nonzero(labels == lab)[0]
            if idx.size == 0:
                continue
            e, v = np.linalg.eigh(hw[np.ix_(idx, idx)])
            energies.append(e)
            vectors.append(W[:, idx] @ v)
            wang.append(np.full(idx.size, 1 if lab % 2 == 0 else -1))
        energies = np.concatenate(energies)
        vectors = np.concatenate(vectors, axis=1)
        wang = np.concatenate(wang)
    else:
        energies, vectors = np.linalg.eigh(h)
        wang = np.zeros(n, dtype=int)

    dominant = np.empty(n, dtype=int)
    for i in range(n):
        vectors[:, i], dominant[i] = _fix_sign(vectors[:, i])

    order = np.argsort(energies, kind="stable")
    e_sorted = energies[order]
    cluster = np.zeros(n, dtype=int)
    for i in range(1, n):
        same = abs(e_sorted[i] - e_sorted[i - 1]) <= tol * max(1.0, abs(e_sorted[i]))
        cluster[i] = cluster[i - 1] + (0 if same else 1)
    cl = np.empty(n, dtype=int)
    cl[order] = cluster
    order = np.lexsort((-wang, dominant, cl))
    return energies[order], vectors[:, order], wang[order]


def _group_rows_by_J(op):
    groups = {}
    for i, (J, _) in enumerate(op.labels):
        groups.setdefault(J, []).append(i)
    return groups


def diagonalize_block(H):
    if H.basis != "symtop":
        raise ValueError("diagonalize_block expects an operator in the symmetric-top basis")
    if not H.is_hermitian():
        raise ValueError("operator is not Hermitian")
    groups = _group_rows_by_J(H)
    Jof = np.array([J for J, _ in H.labels])
    coo = H.matrix.tocoo()
    if np.any(Jof[coo.row] != Jof[coo.col]):
        raise ValueError("operator couples different J; not a field-free rotor block")
    dense = H.matrix.toarray()
    states = []
    for J, rows in sorted(groups.items()):
        if len(rows) != 2 * J + 1:
            raise ValueError(f"incomplete J={J} block in operator basis")
        h = dense[np.ix_(rows, rows)]
        e, v, w = diagonalize_j(h, J)
        for t in range(2 * J + 1):
            states.append(AsymEigenstate(J=J, M=H.M, tau=t + 1, energy=float(e[t]), coeffs=v[:, t].copy(), wang=int(w[t])))
    return states


class RotorLevels:
    """Field-free spectrum of a rotor for J = 0..Jmax (independent of M).

    ``energies[J][tau-1]``, ``vectors[J][:, tau-1]`` (K = -J..J) and
    ``wang[J][tau-1]`` mirror :func:`diagonalize_j`. ``parity[J]`` is the K
    parity of each state.
    """

    def __init__(self, rc, Jmax=0):
        self.rc = rc
        self.energies = []
        self.vectors = []
        self.wang = []
        self.parity = []
        self.extend(Jmax)

    @property
    def Jmax(self):
        return len(self.energies) - 1

    def extend(self, Jmax):
        for J in range(len(self.energies), Jmax + 1):
            e, v, w = diagonalize_j(hamiltonian_j_block(self.rc, J), J)
            self.energies.append(e)
            self.vectors.append(v)
            self.wang.append(w)
            k = np.argmax(np.abs(v), axis=0) - J
            self.parity.append((k % 2).astype(int))
        return self

    def eigenstates(self, M, Jmax=None):
        Jmax = self.Jmax if Jmax is None else Jmax
        self.extend(Jmax)
        return [
            AsymEigenstate(J=J, M=M, tau=t + 1, energy=float(self.energies[J][t]),
                           coeffs=self.vectors[J][:, t].copy(), wang=int(self.wang[J][t]))
            for J in range(abs(M), Jmax + 1)
            for t in range(2 * J + 1)
        ]


_LEVEL_CACHE = {}


def rotor_levels(rc, Jmax):
    """Shared, lazily extended :class:`RotorLevels` for ``rc``."""
    lv = _LEVEL_CACHE.get(rc)
    if lv is None:
        lv = _LEVEL_CACHE[rc] = RotorLevels(rc, Jmax)
    return lv.extend(Jmax)


# ---------------------------------------------------------------------------
# direction cosines


def direction_cosine_element(bra, l, m, k, ket):
    """<J' K' M'| D^l_{mk} |J K M> for l in {1, 2}."""
    if l not in (1, 2):
        raise ValueError(f"only l = 1, 2 are supported, got {l}")
    if abs(m) > l or abs(k) > l:
        raise ValueError(f"|m|, |k| must not exceed l={l}")
    if bra.M != ket.M + m or bra.K != ket.K + k:
        return 0.0
    if abs(bra.J - ket.J) > l:
        return 0.0
    a = _wigner3j(ket.J, l, bra.J, ket.M, m, -bra.M)
    if a == 0.0:
        return 0.0
    b = _wigner3j(ket.J, l, bra.J, ket.K, k, -bra.K)
    phase = -1.0 if (bra.M - bra.K) % 2 else 1.0
    return math.sqrt((2 * ket.J + 1) * (2 * bra.J + 1)) * phase * a * b


def dcos_zero(l, Jp, J, K, M):
    """<J' K M| D^l_{00} |J K M>, the only kind the propagator needs."""
    if abs(Jp - J) > l or abs(K) > min(J, Jp) or abs(M) > min(J, Jp):
        return 0.0
    a = _wigner3j(J, l, Jp, M, 0, -M)
    if a == 0.0:
        return 0.0
    b = _wigner3j(J, l, Jp, K, 0, -K)
    phase = -1.0 if (M - K) % 2 else 1.0
    return math.sqrt((2 * J + 1) * (2 * Jp + 1)) * phase * a * b


def direction_cosine_matrix(basis, l):
    """D^l_{00} in the symmetric-top basis of one M block."""
    rows, cols, vals = [], [], []
    M = basis.M
    for i, (J, K) in enumerate(basis.entries):
        for Jp in range(max(abs(M), abs(K), J - l), min(basis.Jmax, J + l) + 1):
            v = dcos_zero(l, Jp, J, K, M)
            if v != 0.0:
                rows.append(basis.index(Jp, K))
                cols.append(i)
                vals.append(v)
    n = basis.size
    return sp.csr_array((vals, (rows, cols)), shape=(n, n))


def _eigen_transform(basis, eig):
    expected = [(J, t) for J in basis.J_values for t in range(1, 2 * J + 2)]
    got = [(s.J, s.tau) for s in eig]
    if sorted(got) != expected or any(s.M != basis.M for s in eig):
        raise ValueError("eigenstates do not span the basis block")
    eig = sorted(eig, key=lambda s: (s.J, s.tau))
    rows, cols, vals = [], [], []
    for c, s in enumerate(eig):
        off = basis.offset(s.J)
        nz = np.nonzero(s.coeffs)[0]
        rows.extend(off + nz)
        cols.extend([c] * nz.size)
        vals.extend(s.coeffs[nz])
    n = basis.size
    U = sp.csr_array((vals, (rows, cols)), shape=(n, n))
    return U, tuple(sorted(got))


def _to_eigen(basis, eig, D):
    U, labels = _eigen_transform(basis, eig)
    mat = (U.T @ D @ U).tocsr()
    mat = 0.5 * (mat + mat.T)
    mat.eliminate_zeros()
    return SparseOperator(M=basis.M, matrix=mat, basis="eigen", labels=labels, block=basis)


def build_costheta_operator(basis, eig):
    """cos(theta) = D^1_00 in the asymmetric eigenbasis of one M block."""
    return _to_eigen(basis, eig, direction_cosine_matrix(basis, 1))


def build_cos2theta_operator(basis, eig):
    """cos^2(theta) = 1/3 + (2/3) D^2_00 in the asymmetric eigenbasis."""
    n = basis.size
    D = sp.identity(n, format="csr") / 3.0 + (2.0 / 3.0) * direction_cosine_matrix(basis, 2)
    return _to_eigen(basis, eig, D)
