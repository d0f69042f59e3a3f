"""Conformal normalization machinery: Cayley transform, Heisenberg group
actions, Moebius maps phi_{p,r}, pullbacks, center of mass, balancing,
bubble profiles, and concentration diagnostics.

Conventions.  The Cayley transform pi maps the sphere minus the pole
S = (0, ..., 0, -1) to the Heisenberg group H^n:

    pi(x) = ( x' / (1 + x_{n+1}),  Re( i (1 - x_{n+1}) / (1 + x_{n+1}) ) )

with inverse Psi(z, tau) = (2z/D, (1 - |z|^2 + i tau)/D), D = 1 + |z|^2 - i tau.
The Moebius family is phi_{p,r} = Psi o T_p o D_r o pi.  Its volume
distortion against the contact volume form has the closed form

    |det d phi|(x) = [ rho(y) r^2 / rho(pi(x)) ]^{n+1},   y = T_p D_r pi(x),

with rho(z, tau) = 4 / ((1 + |z|^2)^2 + tau^2); the convention is fixed by
the change-of-variables identity int |det d phi| dV = Vol, which the test
suite checks by quadrature.  rho^{n/2} is the Jerison-Lee bubble profile.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .basis import BasisTable, SpectralField
from .conformal import (
    ConformalState,
    _check_positive,
    _power,
    energy,
    renormalize_volume,
    yamabe_invariant,
)
from .errors import (
    ArgumentError,
    BalanceStagnationError,
    DegenerateBalanceError,
    PositivityError,
    ResolutionError,
    SingularityError,
)

POLE_TOLERANCE = 1e-12


@dataclass(frozen=True)
class HeisenbergPoint:
    """Point (z, tau) of the Heisenberg group H^n."""

    z: np.ndarray  # complex, shape (n,)
    tau: float

    def __post_init__(self):
        z = np.atleast_1d(np.asarray(self.z, dtype=complex))
        if not np.all(np.isfinite(z)) or not math.isfinite(self.tau):
            raise ArgumentError("HeisenbergPoint entries must be finite")
        z.setflags(write=False)
        object.__setattr__(self, "z", z)


@dataclass(frozen=True)
class MoebiusParams:
    """Translation point p and dilation scale r of phi_{p,r}."""

    p: HeisenbergPoint
    r: float

    def __post_init__(self):
        if not (self.r > 0.0 and math.isfinite(self.r)):
            raise ArgumentError(f"dilation scale must be positive, got {self.r!r}")

    @staticmethod
    def identity(n: int) -> "MoebiusParams":
        return MoebiusParams(HeisenbergPoint(np.zeros(n, dtype=complex), 0.0), 1.0)

    def inverse(self) -> "MoebiusParams":
        # phi_{p,r}^{-1} = phi_{D_{1/r}(-p), 1/r}
        q = HeisenbergPoint(-self.p.z / self.r, -self.p.tau / self.r**2)
        return MoebiusParams(q, 1.0 / self.r)

    def to_json(self) -> dict:
        return {
            "z": [[float(c.real), float(c.imag)] for c in self.p.z],
            "tau": float(self.p.tau),
            "r": float(self.r),
        }

    @staticmethod
    def from_json(obj: dict) -> "MoebiusParams":
        z = np.array([complex(re, im) for re, im in obj["z"]], dtype=complex)
        return MoebiusParams(HeisenbergPoint(z, float(obj["tau"])), float(obj["r"]))


@dataclass(frozen=True)
class CenterOfMass:
    """P = int x u^{2+2/n} dV and its unit direction (zero if P = 0)."""

    P: np.ndarray
    P_hat: np.ndarray

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.P))


# ---------------------------------------------------------------------------
# Cayley transform and group operations
# ---------------------------------------------------------------------------


def _cayley_batch(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = np.sqrt(np.sum(np.abs(x[..., :-1]) ** 2, axis=-1) + np.abs(x[..., -1] + 1.0) ** 2)
    if np.min(d) <= POLE_TOLERANCE:
        raise SingularityError(f"point within {POLE_TOLERANCE} of the Cayley pole")
    denom = 1.0 + x[..., -1]
    z = x[..., :-1] / denom[..., None]
    w = (1.0 - x[..., -1]) / denom
    tau = np.real(1j * w)
    return z, tau


def cayley(x: np.ndarray) -> HeisenbergPoint:
    x = np.asarray(x, dtype=complex)
    z, tau = _cayley_batch(x[None, :])
    return HeisenbergPoint(z[0], float(tau[0]))


def _inverse_cayley_batch(z: np.ndarray, tau: np.ndarray) -> np.ndarray:
    zsq = np.sum(np.abs(z) ** 2, axis=-1)
    D = 1.0 + zsq - 1j * tau
    x = np.empty(z.shape[:-1] + (z.shape[-1] + 1,), dtype=complex)
    x[..., :-1] = 2.0 * z / D[..., None]
    x[..., -1] = (1.0 - zsq + 1j * tau) / D
    return x

def inverse_cayley(h: HeisenbergPoint) -> np.ndarray:
    return _inverse_cayley_batch(h.z[None, :], np.array([h.tau]))[0]


def dilate(h: HeisenbergPoint, lam: float) -> HeisenbergPoint:
    """D_lam(z, tau) = (lam z, lam^2 tau)."""
    if not lam > 0.0:
        raise ArgumentError(f"dilation factor must be positive, got {lam!r}")
    return HeisenbergPoint(lam * h.z, lam**2 * h.tau)


def translate(h: HeisenbergPoint, p: HeisenbergPoint) -> HeisenbergPoint:
    """T_p(z, tau) = (z + p_z, tau + p_tau + 2 Im(p_z . conj(z)))."""
    tau = h.tau + p.tau + 2.0 * float(np.sum(p.z * np.conj(h.z)).imag)
    return HeisenbergPoint(h.z + p.z, tau)


def group_product(p: HeisenbergPoint, q: HeisenbergPoint) -> HeisenbergPoint:
    """Heisenberg product with T_p o T_q = T_{p*q}."""
    tau = p.tau + q.tau + 2.0 * float(np.sum(p.z * np.conj(q.z)).imag)
    return HeisenbergPoint(p.z + q.z, tau)


def _rho(z: np.ndarray, tau: np.ndarray) -> np.ndarray:
    return 4.0 / ((1.0 + np.sum(np.abs(z) ** 2, axis=-1)) ** 2 + tau**2)


def jerison_lee_profile(n: int, z: np.ndarray, tau: float) -> float:
    """omega(z, tau) = (4 / (tau^2 + (1+|z|^2)^2))^{n/2}."""
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    return float(_rho(z[None, :], np.array([tau]))[0] ** (0.5 * n))


def _phi_batch(params: MoebiusParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Apply phi_{p,r}; returns (image points, rho before, rho after)."""
    z, tau = _cayley_batch(x)
    rho_before = _rho(z, tau)
    z, tau = params.r * z, params.r**2 * tau
    pz = params.p.z
    tau = tau + params.p.tau + 2.0 * np.imag(np.conj(z) @ pz)
    z = z + pz[None, :]
    rho_after = _rho(z, tau)
    return _inverse_cayley_batch(z, tau), rho_before, rho_after


def moebius_apply(params: MoebiusParams, x: np.ndarray) -> np.ndarray:
    """phi_{p,r}(x) = Psi(T_p(D_r(pi(x)))) for a single sphere point."""
    x = np.asarray(x, dtype=complex)
    img, _, _ = _phi_batch(params, x[None, :])
    return img[0]


def jacobian_factor(params: MoebiusParams, x: np.ndarray) -> float:
    """|det d phi|^{n/(2n+2)} at a single point."""
    x = np.asarray(x, dtype=complex)
    n = x.shape[0] - 1
    _, rb, ra = _phi_batch(params, x[None, :])
    return float((ra[0] * params.r**2 / rb[0]) ** (0.5 * n))


def _jacobian_factor_nodes(params: MoebiusParams, basis: BasisTable) -> tuple[np.ndarray, np.ndarray]:
    img, rb, ra = _phi_batch(params, basis.nodes)
    return img, (ra * params.r**2 / rb) ** (0.5 * basis.n)


# ---------------------------------------------------------------------------
# pullback and bubbles
# ---------------------------------------------------------------------------


def pullback(
    u: SpectralField,
    params: MoebiusParams,
    *,
    resolution_threshold: float = 0.01,
    tol_volume: float = 1e-6,
    tol_energy: float = 1e-5,
    check_invariances: bool = True,
) -> SpectralField:
    """Normalized pullback v = (u o phi) |det d phi|^{n/(2n+2)}.

    Raises ResolutionError when the pulled-back values are not band-limited
    to within ``resolution_threshold`` (fraction of L2 mass lost), and
    checks the conformal invariances of theta-volume and energy.
    """
    basis = u.basis
    img, jf = _jacobian_factor_nodes(params, basis)
    vals = u.at(img) * jf
    if np.min(u.grid) > 0.0 and np.min(vals) <= 0.0:
        raise PositivityError(int(np.argmin(vals)), float(np.min(vals)))
    v = basis.field_from_grid(vals)
    resid = basis.integrate((v.grid - vals) ** 2)
    total = basis.integrate(vals**2)
    if resid > resolution_threshold * total:
        raise ResolutionError(resid / total, resolution_threshold, basis.N)
    if check_invariances:
        n = basis.n
        vol_u = basis.integrate(_power(u.grid, 2.0 + 2.0 / n))
        vol_v = basis.integrate(_power(np.abs(v.grid), 2.0 + 2.0 / n))
        if abs(vol_v - vol_u) > tol_volume * abs(vol_u):
            raise ResolutionError(abs(vol_v - vol_u) / abs(vol_u), tol_volume, basis.N)
        e_u = energy(ConformalState(u))
        e_v = energy(ConformalState(v))
        if abs(e_v - e_u) > tol_energy * abs(e_u):
            raise ResolutionError(abs(e_v - e_u) / abs(e_u), tol_energy, basis.N)
    return v


def bubble(params: MoebiusParams, basis: BasisTable, *,
           resolution_threshold: float = 0.01) -> SpectralField:
    """Volume-normalized conformal factor of the pullback of 1 by phi_{p,r}.

    On the Heisenberg side this is the Jerison-Lee profile family; the
    dilation scale controls how concentrated the factor is.  Scales beyond
    ~N/4 exceed the band limit and trigger a warning before the resolution
    check decides.
    """
    scale = max(params.r, 1.0 / params.r)
    if scale > basis.N / 4.0:
        warnings.warn(
            f"bubble scale r={params.r:g} beyond band-limit heuristic N/4={basis.N / 4:.1f}",
            stacklevel=2,
        )
    _, jf = _jacobian_factor_nodes(params, basis)
    v = basis.field_from_grid(jf)
    resid = basis.integrate((v.grid - jf) ** 2)
    total = basis.integrate(jf**2)
    if resid > resolution_threshold * total:
        raise ResolutionError(resid / total, resolution_threshold, basis.N)
    return renormalize_volume(v)


# ---------------------------------------------------------------------------
# center of mass and balancing
# ---------------------------------------------------------------------------


def center_of_mass(s: ConformalState) -> CenterOfMass:
    basis = s.basis
    P = (basis.weights * s.volume_density) @ basis.nodes
    norm = np.linalg.norm(P)
    P_hat = P / norm if norm > 0.0 else P.copy()
    return CenterOfMass(P, P_hat)


def _field_center(u: SpectralField) -> tuple[np.ndarray, float]:
    basis = u.basis
    dens = _power(u.grid, 2.0 + 2.0 / basis.n)
    P = (basis.weights * dens) @ basis.nodes
    return P, float(basis.weights @ dens)


def _params_from_vector(n: int, xi: np.ndarray) -> MoebiusParams:
    z = xi[:n] + 1j * xi[n : 2 * n]
    return MoebiusParams(HeisenbergPoint(z, float(xi[2 * n])), float(math.exp(xi[2 * n + 1])))


def _vector_from_params(params: MoebiusParams) -> np.ndarray:
    n = len(params.p.z)
    return np.concatenate(
        [params.p.z.real, params.p.z.imag, [params.p.tau, math.log(params.r)]]
    )


def balance(
    u: SpectralField,
    *,
    tol: float = 1e-8,
    max_iter: int = 30,
    fd_step: float = 1e-6,
) -> tuple[MoebiusParams, SpectralField]:
    """Find phi_{p,r} whose normalized pullback has zero center of mass.

    Damped Newton on the 2n+2 real unknowns (p, log r) with a finite
    difference Jacobian.  The initial guess concentrates where the center
    of mass points: translation pi(P_hat) and scale 1 - |P|/Vol (the
    inverse of a bubble map needs a small dilation scale).
    """
    basis = u.basis
    n = basis.n
    _check_positive(u.grid)
    vol = basis.volume
    target = tol * vol

    def residual(xi: np.ndarray) -> tuple[np.ndarray, SpectralField]:
        params = _params_from_vector(n, xi)
        if not (1e-6 <= params.r <= 1e6):
            raise DegenerateBalanceError(params.r)
        v = pullback(u, params, check_invariances=False)
        P, _ = _field_center(v)
        return np.concatenate([P.real, P.imag]), v

    P0, volu = _field_center(u)
    if np.linalg.norm(P0) <= target:
        return MoebiusParams.identity(n), u

    starts = [np.zeros(2 * n + 2)]
    frac = np.linalg.norm(P0) / volu
    P_hat = P0 / np.linalg.norm(P0)
    if np.linalg.norm(P_hat - np.concatenate([np.zeros(n), [-1.0]])) > 1e-3:
        h = cayley(P_hat)
        base = np.concatenate([h.z.real, h.z.imag, [h.tau, 0.0]])
        for r0 in (max(1.0 - frac, 1e-3), 0.5, 0.25):
            xi = base.copy()
            xi[-1] = math.log(r0)
            starts.append(xi)

    best_res = math.inf
    for xi in starts:
        try:
            res, v = residual(xi)
        except (DegenerateBalanceError, ResolutionError, PositivityError):
            continue
        for _ in range(max_iter):
            rnorm = np.linalg.norm(res)
            best_res = min(best_res, rnorm)
            if rnorm <= target:
                params = _params_from_vector(n, xi)
                return params, pullback(u, params, check_invariances=False)
            J = np.empty((2 * n + 2, 2 * n + 2))
            for j in range(2 * n + 2):
                e = np.zeros(2 * n + 2)
                e[j] = fd_step
                rp, _ = residual(xi + e)
                rm, _ = residual(xi - e)
                J[:, j] = (rp - rm) / (2.0 * fd_step)
            dxi, *_ = np.linalg.lstsq(J, -res, rcond=None)
            step = 1.0
            improved = False
            for _ in range(8):
                try:
                    res_new, v_new = residual(xi + step * dxi)
                except (DegenerateBalanceError, ResolutionError, PositivityError):
                    step *= 0.5
                    continue
                if np.linalg.norm(res_new) < (1.0 - 1e-4 * step) * rnorm:
                    xi = xi + step * dxi
                    res = res_new
                    improved = True
                    break
                step *= 0.5
            if not improved:
                break
        else:
            continue
    raise BalanceStagnationError(best_res, max_iter)


# ---------------------------------------------------------------------------
# concentration diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConcentrationEntry:
    radius: float
    mass_fraction: float
    curvature_concentration: float


def concentration_profile(
    s: ConformalState, center: np.ndarray, radii,
) -> list[ConcentrationEntry]:
    """Mass fraction and curvature concentration in chordal balls.

    Chordal (ambient) balls stand in for Carnot-Caratheodory balls; at desk
    scale only the topology of concentration matters.
    """
    basis = s.basis
    center = np.asarray(center, dtype=complex)
    radii = [float(r) for r in radii]
    if any(r <= 0 for r in radii):
        raise ArgumentError("radii must be positive")
    dist = np.linalg.norm(basis.nodes - center[None, :], axis=1)
    dens = s.volume_density
    R = s.R_grid
    n = basis.n
    out = []
    for r in radii:
        mask = dist <= r
        mass = float(np.sum(basis.weights[mask] * dens[mask])) / s.vol
        curv = float(np.sum(basis.weights[mask] * np.abs(R[mask]) ** (n + 1) * dens[mask]))
        out.append(ConcentrationEntry(r, mass, curv ** (1.0 / (n + 1))))
    return out


def site_count(
    states, *, radius: float = 0.5, eps: float = 0.3, max_candidates: int = 40,
) -> int:
    """Number of disjoint chordal balls whose curvature concentration stays
    above (1 - eps) * Y across all supplied snapshots."""
    states = list(states)
    if not states:
        return 0
    basis = states[0].basis
    Y = yamabe_invariant(basis)
    order = np.argsort(states[-1].u_grid)[::-1]
    candidates: list[np.ndarray] = []
    for k in order:
        x = basis.nodes[k]
        if all(np.linalg.norm(x - c) > radius for c in candidates):
            candidates.append(x)
        if len(candidates) >= max_candidates:
            break
    persistent = []
    for c in candidates:
        worst = min(
            concentration_profile(s, c, [radius])[0].curvature_concentration
            for s in states
        )
        if worst >= (1.0 - eps) * Y:
            persistent.append((worst, c))
    persistent.sort(key=lambda t: -t[0])
    chosen: list[np.ndarray] = []
    for _, c in persistent:
        if all(np.linalg.norm(c - c2) > 2.0 * radius for c2 in chosen):
            chosen.append(c)
    return len(chosen)
