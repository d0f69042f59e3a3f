"""Harmonic analysis on the CR sphere S^{2n+1} with its standard contact form.

The sphere sits in C^{n+1}.  Real-valued functions are stored as coefficient
vectors over an orthonormal basis of bigraded spherical harmonics: for each
bidegree (p, q) the space H_{p,q} is the restriction to the sphere of
harmonic polynomials of degree p in x and q in conj(x).  These spaces are
joint eigenspaces of the sub-Laplacian, which this module applies
diagonally with

    lambda(p, q) = p*q + (n/2)*(p + q).

Only the two anchor values lambda(0,0)=0 and lambda(1,0)=n/2 are taken as
given; the full law is validated against a geometric second-derivative
oracle along the horizontal distribution (see ``horizontal_laplacian``).

Quadrature uses Hopf-type coordinates: uniform periodic grids in the
angular variables and Gauss-Legendre nodes in the latitude variables,
sized so that every product of three basis functions (total polynomial
degree 3N) integrates exactly.  The volume normalization is the literal
contact volume form theta ^ (dtheta)^n, whose total mass (4*pi)^{n+1} is
recomputed independently by ``contact_volume_oracle``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.linalg import null_space

from .errors import (
    ArgumentError,
    BasisConstructionError,
    IntegrityError,
    ResourceLimitError,
)

FIXTURE_FORMAT_VERSION = 1

# Default memory budget for the basis-at-nodes matrix and transforms.
DEFAULT_MEMORY_BUDGET = int(2.0e9)


def sublaplacian_eigenvalue(n: int, p: int, q: int) -> float:
    return p * q + 0.5 * n * (p + q)


def bigraded_dimension(n: int, p: int, q: int) -> int:
    """Dimension of H_{p,q} on S^{2n+1} (complex dimension)."""
    def full(a, b):
        return math.comb(n + a, n) * math.comb(n + b, n)

    if p == 0 or q == 0:
        return full(p, q)
    return full(p, q) - full(p - 1, q - 1)


@dataclass(frozen=True, order=True)
class BasisIndex:
    """Label (p, q, m) of one real basis function.

    p and q are the holomorphic/antiholomorphic degrees; m enumerates the
    functions carrying that label (m < dim H_{p,q}).
    """

    p: int
    q: int
    m: int


def _multiindices(nvars: int, degree: int) -> list[tuple[int, ...]]:
    if nvars == 1:
        return [(degree,)]
    out = []
    for k in range(degree, -1, -1):
        for rest in _multiindices(nvars - 1, degree - k):
            out.append((k,) + rest)
    return out


# ---------------------------------------------------------------------------
# quadrature grids
# ---------------------------------------------------------------------------


def _gauss01(npts: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = leggauss(npts)
    return 0.5 * (x + 1.0), 0.5 * w


def _build_grid(n: int, N: int) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature nodes (ambient complex coordinates) and weights for dV_theta0.

    Exact for ambient polynomials of total degree <= 3N.  The contact volume
    form equals 2*4^n*n! times the round measure; in the Hopf variables the
    density below is that constant folded into the latitude substitutions
    s = cos^2(eta).
    """
    M = 3 * N + 1                      # Fourier modes up to 3N need M >= 3N+1
    G = (3 * N) // 4 + 2               # Legendre degree 3N/2 needs (deg+1)/2 nodes
    xi = 2.0 * np.pi * np.arange(M) / M
    wxi = 2.0 * np.pi / M

    if n == 1:
        s, ws = _gauss01(G)
        S, X1, X2 = np.meshgrid(s, xi, xi, indexing="ij")
        WS = np.repeat(ws, M * M)
        c = np.sqrt(S.ravel())
        r = np.sqrt(1.0 - S.ravel())
        nodes = np.stack(
            [c * np.exp(1j * X1.ravel()), r * np.exp(1j * X2.ravel())], axis=1
        )
        weights = 4.0 * WS * wxi * wxi
        return nodes, weights

    if n == 2:
        t, wt = _gauss01(G + 1)        # +1: the (1-t) density raises the degree
        s, ws = _gauss01(G)
        T, S, X1, X2, X3 = np.meshgrid(t, s, xi, xi, xi, indexing="ij")
        T = T.ravel()
        S = S.ravel()
        c1 = np.sqrt(T)
        c2 = np.sqrt((1.0 - T) * S)
        c3 = np.sqrt((1.0 - T) * (1.0 - S))
        nodes = np.stack(
            [
                c1 * np.exp(1j * X1.ravel()),
                c2 * np.exp(1j * X2.ravel()),
                c3 * np.exp(1j * X3.ravel()),
            ],
            axis=1,
        )
        WT = np.einsum("i,j->ij", wt, ws).ravel()
        WT = np.repeat(WT, M * M * M)
        weights = 16.0 * (1.0 - T) * WT * wxi**3
        return nodes, weights

    raise ArgumentError(f"CR dimension n={n} not supported (only n=1 and n=2)")


# ---------------------------------------------------------------------------
# independent volume oracle: pull theta ^ (dtheta)^n back through Hopf coords
# ---------------------------------------------------------------------------


def _theta0(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    # theta0 = 2 * sum(a db - b da) on R^{2n+2} = C^{n+1}
    return 2.0 * np.sum(x.real * v.imag - x.imag * v.real, axis=-1)


def _dtheta0(v: np.ndarray, w: np.ndarray) -> np.ndarray:
    # dtheta0 = 4 * sum(da ^ db)
    return 4.0 * np.sum(v.real * w.imag - v.imag * w.real, axis=-1)


_VOL_ORACLE_CACHE: dict[int, float] = {}


def contact_volume_oracle(n: int, tol: float = 1e-11, max_level: int = 8) -> float:
    """Total contact volume of S^{2n+1} by direct pullback of theta^(dtheta)^n.

    Independent of the quadrature construction: the form is evaluated on the
    coordinate tangent vectors of the Hopf parametrization and integrated
    with tensor Gauss-Legendre panels, doubling resolution until stable.
    """
    if n in _VOL_ORACLE_CACHE:
        return _VOL_ORACLE_CACHE[n]

    def integrand_n1(eta, x1, x2):
        ce, se = np.cos(eta), np.sin(eta)
        e1, e2 = np.exp(1j * x1), np.exp(1j * x2)
        x = np.stack([ce * e1, se * e2], axis=-1)
        d_eta = np.stack([-se * e1, ce * e2], axis=-1)
        d_x1 = np.stack([1j * ce * e1, np.zeros_like(e2)], axis=-1)
        d_x2 = np.stack([np.zeros_like(e1), 1j * se * e2], axis=-1)
        a, b, c = d_eta, d_x1, d_x2
        return (
            _theta0(x, a) * _dtheta0(b, c)
            - _theta0(x, b) * _dtheta0(a, c)
            + _theta0(x, c) * _dtheta0(a, b)
        )

    def integrand_n2(e1a, e2a, x1, x2, x3):
        c1, s1 = np.cos(e1a), np.sin(e1a)
        c2, s2 = np.cos(e2a), np.sin(e2a)
        f1, f2, f3 = np.exp(1j * x1), np.exp(1j * x2), np.exp(1j * x3)
        zeros = np.zeros_like(f1)
        x = np.stack([c1 * f1, s1 * c2 * f2, s1 * s2 * f3], axis=-1)
        vs = [
            np.stack([-s1 * f1, c1 * c2 * f2, c1 * s2 * f3], axis=-1),
            np.stack([zeros, -s1 * s2 * f2, s1 * c2 * f3], axis=-1),
            np.stack([1j * c1 * f1, zeros, zeros], axis=-1),
            np.stack([zeros, 1j * s1 * c2 * f2, zeros], axis=-1),
            np.stack([zeros, zeros, 1j * s1 * s2 * f3], axis=-1),
        ]

        def w2(a, b, c, d):
            return 2.0 * (
                _dtheta0(vs[a], vs[b]) * _dtheta0(vs[c], vs[d])
                - _dtheta0(vs[a], vs[c]) * _dtheta0(vs[b], vs[d])
                + _dtheta0(vs[a], vs[d]) * _dtheta0(vs[b], vs[c])
            )

        total = np.zeros_like(x1)
        rest = [0, 1, 2, 3, 4]
        for i in range(5):
            others = rest[:i] + rest[i + 1 :]
            total += (-1.0) ** i * _theta0(x, vs[i]) * w2(*others)
        return total

    prev = None
    for level in range(1, max_level + 1):
        g = 6 + 4 * (level - 1)
        xg, wg = leggauss(g)
        if n == 1:
            eta = 0.25 * np.pi * (xg + 1.0)
            we = 0.25 * np.pi * wg
            xi = np.pi * (xg + 1.0)
            wx = np.pi * wg
            E, A, B = np.meshgrid(eta, xi, xi, indexing="ij")
            vals = integrand_n1(E, A, B)
            W = np.einsum("i,j,k->ijk", we, wx, wx)
            total = float(np.sum(np.abs(vals) * W))
        elif n == 2:
            eta = 0.25 * np.pi * (xg + 1.0)
            we = 0.25 * np.pi * wg
            xi = np.pi * (xg + 1.0)
            wx = np.pi * wg
            E1, E2, A, B, C = np.meshgrid(eta, eta, xi, xi, xi, indexing="ij")
            vals = integrand_n2(E1, E2, A, B, C)
            W = np.einsum("i,j,k,l,m->ijklm", we, we, wx, wx, wx)
            total = float(np.sum(np.abs(vals) * W))
        else:
            raise ArgumentError(f"n={n} not supported")
        if prev is not None and abs(total - prev) <= tol * max(1.0, abs(total)):
            _VOL_ORACLE_CACHE[n] = total
            return total
        prev = total
    _VOL_ORACLE_CACHE[n] = total
    return total


# ---------------------------------------------------------------------------
# harmonic polynomial construction
# ---------------------------------------------------------------------------


def _harmonic_kernel(n: int, p: int, q: int) -> tuple[list, list, np.ndarray]:
    """Complex coefficient basis of H_{p,q} over bidegree-(p,q) monomials.

    Returns (alphas, betas, KER) where KER has one kernel vector per column
    of the ambient Laplacian 4 * sum_j d^2/(dx_j dxbar_j) acting on
    monomials x^alpha * xbar^beta.
    """
    alphas = _multiindices(n + 1, p)
    betas = _multiindices(n + 1, q)
    na, nb = len(alphas), len(betas)
    if p == 0 or q == 0:
        return alphas, betas, np.eye(na * nb)

    tgt_a = {a: i for i, a in enumerate(_multiindices(n + 1, p - 1))}
    tgt_b = {b: i for i, b in enumerate(_multiindices(n + 1, q - 1))}
    L = np.zeros((len(tgt_a) * len(tgt_b), na * nb))
    for ia, a in enumerate(alphas):
        for ib, b in enumerate(betas):
            col = ia * nb + ib
            for j in range(n + 1):
                if a[j] > 0 and b[j] > 0:
                    a2 = tuple(a[k] - (k == j) for k in range(n + 1))
                    b2 = tuple(b[k] - (k == j) for k in range(n + 1))
                    row = tgt_a[a2] * len(tgt_b) + tgt_b[b2]
                    L[row, col] += 4.0 * a[j] * b[j]
    ker = null_space(L)
    expected = bigraded_dimension(n, p, q)
    if ker.shape[1] != expected:
        raise BasisConstructionError(
            "harmonic kernel dimension",
            f"(p,q)=({p},{q}): got {ker.shape[1]}, expected {expected}",
        )
    return alphas, betas, ker


def _monomial_values(nodes: np.ndarray, alphas, betas) -> np.ndarray:
    """Values of x^alpha * conj(x)^beta at nodes; shape (len(alphas)*len(betas), K)."""
    K, nv = nodes.shape
    deg = max((max(a) for a in alphas), default=0)
    degb = max((max(b) for b in betas), default=0)
    pw = [np.ones((max(deg, degb) + 1, K), dtype=complex) for _ in range(nv)]
    for j in range(nv):
        for k in range(1, max(deg, degb) + 1):
            pw[j][k] = pw[j][k - 1] * nodes[:, j]
    out = np.empty((len(alphas) * len(betas), K), dtype=complex)
    for ia, a in enumerate(alphas):
        va = np.ones(K, dtype=complex)
        for j in range(nv):
            if a[j]:
                va = va * pw[j][a[j]]
        for ib, b in enumerate(betas):
            vb = va.copy()
            for j in range(nv):
                if b[j]:
                    vb = vb * np.conj(pw[j][b[j]])
            out[ia * len(betas) + ib] = vb
    return out


def _mgs(vectors: np.ndarray, weights: np.ndarray, coeffs: np.ndarray,
         drop_tol: float | None = None):
    """Two-pass modified Gram-Schmidt under the weighted inner product.

    vectors: (m, K) rows; coeffs: (m, M) rows transformed in lockstep so the
    polynomial representation stays in sync with the node values.  With
    drop_tol set, near-dependent rows are dropped (rank-revealing mode).
    """
    out_v, out_c = [], []
    norms0 = np.sqrt(np.abs(np.einsum("ik,k,ik->i", np.conj(vectors), weights, vectors)))
    scale = norms0.max() if len(norms0) else 1.0
    for i in range(vectors.shape[0]):
        v = vectors[i].copy()
        c = coeffs[i].copy()
        for _ in range(2):
            for u, cu in zip(out_v, out_c):
                proj = np.sum(weights * v * np.conj(u))
                v -= proj * u
                c -= proj * cu
        nrm = math.sqrt(abs(np.sum(weights * v * np.conj(v)).real))
        if drop_tol is not None and nrm < drop_tol * scale:
            continue
        if nrm == 0.0:
            raise BasisConstructionError("Gram-Schmidt", "zero vector encountered")
        out_v.append(v / nrm)
        out_c.append(c / nrm)
    if not out_v:
        return np.empty((0, vectors.shape[1]), dtype=vectors.dtype), np.empty((0, coeffs.shape[1]), dtype=coeffs.dtype)
    return np.array(out_v), np.array(out_c)


# ---------------------------------------------------------------------------
# the basis table
# ---------------------------------------------------------------------------


class BasisTable:
    """Immutable bundle: basis indices, eigenvalues, quadrature, transforms.

    Construct with :func:`build_basis` or :func:`load_fixture`.  All heavy
    arrays are read-only; the table is safe to share across threads.
    """

    def __init__(self, n, N, indices, eigenvalues, nodes, weights,
                 basis_at_nodes, mono_alphas, mono_betas, mono_coeffs,
                 volume_fixture):
        self.n = int(n)
        self.N = int(N)
        self.indices: list[BasisIndex] = list(indices)
        self.eigenvalues = np.asarray(eigenvalues, dtype=float)
        self.nodes = np.asarray(nodes)
        self.weights = np.asarray(weights, dtype=float)
        self.basis_at_nodes = np.asarray(basis_at_nodes, dtype=float)
        self.mono_alphas = [tuple(a) for a in mono_alphas]
        self.mono_betas = [tuple(b) for b in mono_betas]
        self.mono_coeffs = np.asarray(mono_coeffs, dtype=complex)
        self.volume_fixture = float(volume_fixture)
        for arr in (self.eigenvalues, self.nodes, self.weights,
                    self.basis_at_nodes, self.mono_coeffs):
            arr.setflags(write=False)
        self.block_dims = {}
        for idx in self.indices:
            key = (idx.p, idx.q)
            self.block_dims[key] = max(self.block_dims.get(key, 0), idx.m + 1)

    # -- sizes -------------------------------------------------------------

    @property
    def size(self) -> int:
        return len(self.indices)

    @property
    def node_count(self) -> int:
        return len(self.weights)

    @property
    def volume(self) -> float:
        """Total contact volume, as carried by the quadrature weights."""
        return float(np.sum(self.weights))

    @cached_property
    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps({"format": FIXTURE_FORMAT_VERSION, "n": self.n, "N": self.N}).encode())
        for arr in (self.eigenvalues, self.nodes, self.weights, self.basis_at_nodes):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    @cached_property
    def spectral_gap_value(self) -> float:
        """First distinct eigenvalue above n/2 (lambda_{2n+3} in sorted order)."""
        distinct = np.unique(np.round(self.eigenvalues, 12))
        above = distinct[distinct > 0.5 * self.n + 1e-12]
        return float(above.min())

    # -- transforms ----------------------------------------------------------

    def synthesize(self, coeffs: np.ndarray) -> np.ndarray:
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (self.size,):
            raise ArgumentError(f"coefficient vector has shape {coeffs.shape}, expected ({self.size},)")
        return coeffs @ self.basis_at_nodes

    def analyze(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape != (self.node_count,):
            raise ArgumentError(f"value vector has shape {values.shape}, expected ({self.node_count},)")
        return self.basis_at_nodes @ (self.weights * values)

    def integrate(self, values: np.ndarray) -> float:
        values = np.asarray(values, dtype=float)
        if values.shape != (self.node_count,):
            raise ArgumentError(f"value vector has shape {values.shape}, expected ({self.node_count},)")
        return float(self.weights @ values)

    # -- fields ---------------------------------------------------------------

    def field(self, coeffs) -> "SpectralField":
        return SpectralField(self, np.array(coeffs, dtype=float))

    def field_from_grid(self, values) -> "SpectralField":
        return SpectralField(self, self.analyze(np.asarray(values, dtype=float)))

    def constant_field(self, value: float) -> "SpectralField":
        c = np.zeros(self.size)
        # basis function 0 is the normalized constant 1/sqrt(Vol)
        c[0] = value * math.sqrt(self.volume)
        return self.field(c)

    def coordinate_field(self, j: int, part: str = "re") -> "SpectralField":
        if not (0 <= j <= self.n):
            raise ArgumentError(f"coordinate index {j} out of range for n={self.n}")
        vals = self.nodes[:, j].real if part == "re" else self.nodes[:, j].imag
        return self.field_from_grid(vals)

    def evaluate_monomials(self, points: np.ndarray) -> np.ndarray:
        """Values of the global (paired) monomial list at points; shape (M, K)."""
        pts = np.atleast_2d(points)
        K, nv = pts.shape
        top = self.N + 1
        pw = np.empty((nv, top, K), dtype=complex)
        pw[:, 0] = 1.0
        for j in range(nv):
            for k in range(1, top):
                pw[j, k] = pw[j, k - 1] * pts[:, j]
        out = np.empty((len(self.mono_alphas), K), dtype=complex)
        for i, (a, b) in enumerate(zip(self.mono_alphas, self.mono_betas)):
            v = np.ones(K, dtype=complex)
            for j in range(nv):
                if a[j]:
                    v = v * pw[j, a[j]]
                if b[j]:
                    v = v * np.conj(pw[j, b[j]])
            out[i] = v
        return out

    def evaluate_field(self, coeffs: np.ndarray, points: np.ndarray,
                       chunk: int = 4096) -> np.ndarray:
        """Evaluate a coefficient vector at arbitrary sphere points.

        Points are processed in chunks to bound the size of the transient
        monomial Vandermonde matrix.
        """
        pts = np.atleast_2d(points)
        mono = np.asarray(coeffs, dtype=float) @ self.mono_coeffs
        out = np.empty(pts.shape[0])
        for lo in range(0, pts.shape[0], chunk):
            V = self.evaluate_monomials(pts[lo : lo + chunk])
            out[lo : lo + chunk] = np.real(mono @ V)
        return out

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> None:
        header = json.dumps({
            "format_version": FIXTURE_FORMAT_VERSION,
            "n": self.n,
            "N": self.N,
            "node_count": self.node_count,
            "volume_fixture": self.volume_fixture,
            "indices": [(i.p, i.q, i.m) for i in self.indices],
            "mono_alphas": [list(a) for a in self.mono_alphas],
            "mono_betas": [list(b) for b in self.mono_betas],
            "checksum": self.content_hash,
        })
        np.savez_compressed(
            path,
            header=np.frombuffer(header.encode(), dtype=np.uint8),
            eigenvalues=self.eigenvalues,
            nodes=self.nodes,
            weights=self.weights,
            basis_at_nodes=self.basis_at_nodes,
            mono_coeffs=self.mono_coeffs,
        )


def load_fixture(path) -> BasisTable:
    """Load a persisted basis table, verifying its embedded checksum."""
    try:
        with np.load(path) as data:
            header = json.loads(bytes(data["header"]).decode())
            if header.get("format_version") != FIXTURE_FORMAT_VERSION:
                raise IntegrityError(f"unsupported fixture format {header.get('format_version')}")
            table = BasisTable(
                n=header["n"],
                N=header["N"],
                indices=[BasisIndex(*t) for t in header["indices"]],
                eigenvalues=data["eigenvalues"],
                nodes=data["nodes"],
                weights=data["weights"],
                basis_at_nodes=data["basis_at_nodes"],
                mono_alphas=[tuple(a) for a in header["mono_alphas"]],
                mono_betas=[tuple(b) for b in header["mono_betas"]],
                mono_coeffs=data["mono_coeffs"],
                volume_fixture=header["volume_fixture"],
            )
    except IntegrityError:
        raise
    except Exception as exc:
        raise IntegrityError(f"unreadable basis fixture {path}: {exc}") from exc
    if table.content_hash != header["checksum"]:
        raise IntegrityError("basis fixture checksum mismatch")
    return table


@dataclass(frozen=True)
class SpectralField:
    """Real function on the sphere stored as basis coefficients."""

    basis: BasisTable
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (self.basis.size,):
            raise ArgumentError(f"coefficients shape {c.shape}, expected ({self.basis.size},)")
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @cached_property
    def grid(self) -> np.ndarray:
        return self.basis.synthesize(self.coeffs)

    def __add__(self, other: "SpectralField") -> "SpectralField":
        _same_basis(self, other)
        return SpectralField(self.basis, self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        _same_basis(self, other)
        return SpectralField(self.basis, self.coeffs - other.coeffs)

    def __mul__(self, scalar: float) -> "SpectralField":
        return SpectralField(self.basis, self.coeffs * float(scalar))

    __rmul__ = __mul__

    def at(self, points: np.ndarray) -> np.ndarray:
        return self.basis.evaluate_field(self.coeffs, points)


def _same_basis(a, b):
    if a.basis is not b.basis:
        raise ArgumentError("fields live on different basis tables")


# ---------------------------------------------------------------------------
# module-level operation wrappers
# ---------------------------------------------------------------------------


def synthesize(f: SpectralField) -> np.ndarray:
    return f.basis.synthesize(f.coeffs)


def analyze(values: np.ndarray, basis: BasisTable) -> SpectralField:
    return basis.field_from_grid(values)


def integrate(values: np.ndarray, basis: BasisTable) -> float:
    return basis.integrate(values)


def apply_sublaplacian(f: SpectralField) -> SpectralField:
    """Delta_theta0 f, the negative-semidefinite sub-Laplacian."""
    return SpectralField(f.basis, -f.basis.eigenvalues * f.coeffs)


def levi_product(a: SpectralField, b: SpectralField) -> np.ndarray:
    """Pointwise Levi-form product <grad a, grad b> at the quadrature nodes.

    Polarization: (Delta(ab) - a Delta b - b Delta a) / 2 with the product
    formed on the grid and re-analyzed.  Exact when deg a + deg b <= N; for
    full-band inputs the truncation of ab is the caller's resolution margin.
    """
    _same_basis(a, b)
    basis = a.basis
    va, vb = a.grid, b.grid
    prod = basis.analyze(va * vb)
    lap_ab = basis.synthesize(-basis.eigenvalues * prod)
    lap_a = basis.synthesize(-basis.eigenvalues * a.coeffs)
    lap_b = basis.synthesize(-basis.eigenvalues * b.coeffs)
    return 0.5 * (lap_ab - va * lap_b - vb * lap_a)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def build_basis(n: int, N: int, *, memory_budget: int = DEFAULT_MEMORY_BUDGET,
                validate: bool = True) -> BasisTable:
    """Construct the full bigraded basis with quadrature for S^{2n+1}.

    Raises ResourceLimitError before allocating anything large, and
    BasisConstructionError if a self-check (Gram identity, eigen anchors,
    weight sum vs. the volume oracle) fails.
    """
    if n < 1:
        raise ArgumentError("n must be >= 1")
    if N < 2:
        raise ArgumentError("N must be >= 2")
    if n not in (1, 2):
        raise ArgumentError("only n=1 and n=2 are supported at desk scale")

    nodes, weights = _build_grid(n, N)
    K = len(weights)
    B = sum(
        bigraded_dimension(n, p, q)
        for d in range(N + 1)
        for p in range(d + 1)
        for q in [d - p]
    )
    projected = 8 * B * K * 3  # basis matrix + two transform temporaries
    if projected > memory_budget:
        raise ResourceLimitError(
            f"basis (n={n}, N={N}) needs ~{projected/1e9:.2f} GB > budget {memory_budget/1e9:.2f} GB"
        )

    # global monomial list: all bidegrees with p+q <= N
    mono_alphas, mono_betas, mono_pos = [], [], {}
    for d in range(N + 1):
        for p in range(d + 1):
            q = d - p
            for a in _multiindices(n + 1, p):
                for b in _multiindices(n + 1, q):
                    mono_pos[(a, b)] = len(mono_alphas)
                    mono_alphas.append(a)
                    mono_betas.append(b)
    M_mono = len(mono_alphas)

    indices: list[BasisIndex] = []
    eigvals: list[float] = []
    rows_values: list[np.ndarray] = []
    rows_coeffs: list[np.ndarray] = []

    def emit(p, q, values, coeffs):
        for m in range(values.shape[0]):
            indices.append(BasisIndex(p, q, m))
            eigvals.append(sublaplacian_eigenvalue(n, p, q))
            rows_values.append(values[m])
            rows_coeffs.append(coeffs[m])

    for d in range(N + 1):
        for p in range(d, (d - 1) // 2, -1):
            q = d - p
            alphas, betas, ker = _harmonic_kernel(n, p, q)
            monos = _monomial_values(nodes, alphas, betas)
            kvals = ker.T @ monos                      # kernel functions at nodes
            # embed kernel coefficient vectors into the global monomial list
            kcoef = np.zeros((ker.shape[1], M_mono), dtype=complex)
            cols = [mono_pos[(a, b)] for a in alphas for b in betas]
            kcoef[:, cols] = ker.T

            if p == q:
                conj_cols = [mono_pos[(b, a)] for a in alphas for b in betas]
                csw = np.zeros_like(kcoef)
                csw[:, conj_cols] = np.conj(kcoef[:, cols])
                cand_v = np.concatenate([kvals.real, kvals.imag], axis=0)
                cand_c = np.concatenate(
                    [0.5 * (kcoef + csw), (kcoef - csw) / 2j], axis=0
                )
                vals, coefs = _mgs(cand_v.astype(complex), weights, cand_c, drop_tol=1e-8)
                if vals.shape[0] != bigraded_dimension(n, p, p):
                    raise BasisConstructionError(
                        "real form dimension",
                        f"(p,p)=({p},{p}): got {vals.shape[0]}",
                    )
                emit(p, p, vals.real, coefs)
            else:
                vals, coefs = _mgs(kvals, weights, kcoef)
                conj_cols = [mono_pos[(b, a)] for a in alphas for b in betas]
                csw = np.zeros_like(coefs)
                csw[:, conj_cols] = np.conj(coefs[:, cols])
                re_c = (coefs + csw) / math.sqrt(2.0)
                im_c = (coefs - csw) / (1j * math.sqrt(2.0))
                emit(p, q, math.sqrt(2.0) * vals.real, re_c)
                emit(q, p, math.sqrt(2.0) * vals.imag, im_c)

    basis_at_nodes = np.array(rows_values, dtype=float)
    mono_coeffs = np.array(rows_coeffs, dtype=complex)

    vol_oracle = contact_volume_oracle(n)
    table = BasisTable(
        n, N, indices, eigvals, nodes, weights, basis_at_nodes,
        mono_alphas, mono_betas, mono_coeffs, vol_oracle,
    )
    if validate:
        validate_basis(table)
    return table


def validate_basis(table: BasisTable, gram_tol: float = 1e-10) -> None:
    """Self-checks: Gram identity, eigen anchors, weight sum vs. oracle."""
    w = np.sum(table.weights)
    if abs(w - table.volume_fixture) > 1e-8 * table.volume_fixture:
        raise BasisConstructionError(
            "weight sum equals contact volume",
            f"sum={w!r}, oracle={table.volume_fixture!r}",
        )
    lam = {(i.p, i.q): table.eigenvalues[k] for k, i in enumerate(table.indices)}
    if abs(lam[(0, 0)]) > 1e-14:
        raise BasisConstructionError("lambda(0,0) = 0")
    for key in ((1, 0), (0, 1)):
        if key in lam and abs(lam[key] - 0.5 * table.n) > 1e-10:
            raise BasisConstructionError("lambda(1,0) = n/2", f"got {lam[key]!r}")
    G = table.basis_at_nodes @ (table.weights[:, None] * table.basis_at_nodes.T)
    err = np.max(np.abs(G - np.eye(table.size)))
    if err > gram_tol:
        raise BasisConstructionError("Gram matrix is the identity", f"max deviation {err:.3e}")


# ---------------------------------------------------------------------------
# geometric oracle for the eigenvalue law
# ---------------------------------------------------------------------------


def horizontal_frame(x: np.ndarray) -> np.ndarray:
    """Euclidean-orthonormal real frame of the horizontal space at x.

    The horizontal space is the complex orthogonal complement of x in
    C^{n+1}; the 2n real directions returned are unit vectors for the round
    metric.  The Levi form is 4x the round metric on this distribution, so
    the sub-Laplacian is 1/4 of the sum of great-circle second derivatives
    along these directions.
    """
    x = np.asarray(x, dtype=complex)
    nv = x.shape[0]
    basis = []
    for j in range(nv):
        e = np.zeros(nv, dtype=complex)
        e[j] = 1.0
        v = e - np.vdot(x, e) * x
        for u in basis:
            v = v - np.vdot(u, v) * u
        nrm = math.sqrt(np.vdot(v, v).real)
        if nrm > 1e-8:
            basis.append(v / nrm)
        if len(basis) == nv - 1:
            break
    frame = []
    for u in basis:
        frame.append(u)
        frame.append(1j * u)
    return np.array(frame)


def horizontal_laplacian(func: Callable[[np.ndarray], np.ndarray],
                         x: np.ndarray, samples: int = 64) -> float:
    """Sub-Laplacian of ``func`` at x from horizontal great-circle samples.

    Each horizontal direction contributes the exact second derivative of the
    trigonometric polynomial s -> func(cos(s) x + sin(s) w), recovered by
    uniform sampling of the full circle; ``samples`` must exceed twice the
    polynomial degree.  Independent of the spectral eigenvalue table.
    """
    x = np.asarray(x, dtype=complex)
    frame = horizontal_frame(x)
    s = 2.0 * np.pi * np.arange(samples) / samples
    cs, sn = np.cos(s), np.sin(s)
    total = 0.0
    k = np.fft.fftfreq(samples, d=1.0 / samples)
    for w in frame:
        pts = cs[:, None] * x[None, :] + sn[:, None] * w[None, :]
        vals = func(pts)
        coef = np.fft.fft(vals) / samples
        total += float(np.sum((-(k**2)) * coef).real)
    return 0.25 * total


def oracle_eigenvalue(table: BasisTable, p: int, q: int, npoints: int = 8,
                      seed: int = 7) -> float:
    """Eigenvalue of the (p,q) block measured by the geometric oracle."""
    target = BasisIndex(p, q, 0)
    try:
        row = next(k for k, i in enumerate(table.indices) if i == target)
    except StopIteration:
        raise ArgumentError(f"no basis function with index {(p, q, 0)}")
    coeffs = np.zeros(table.size)
    coeffs[row] = 1.0

    def f(points):
        return table.evaluate_field(coeffs, points)

    rng = np.random.default_rng(seed)
    num = 0.0
    den = 0.0
    for _ in range(npoints):
        z = rng.normal(size=table.n + 1) + 1j * rng.normal(size=table.n + 1)
        x = z / np.linalg.norm(z)
        fx = float(f(x[None, :])[0])
        lap = horizontal_laplacian(f, x, samples=2 * table.N + 8)
        num += -lap * fx
        den += fx * fx
    return num / den
