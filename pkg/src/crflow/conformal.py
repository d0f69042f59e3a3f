"""Conformal-change quantities of theta = u^{2/n} theta0.

Webster curvature, conformal sub-Laplacian, theta-volume, the curvature
energy E and its normalized Lyapunov form E_f, the nonlocal coupling
alpha, and the Yamabe quotient.  The background curvature is
R0 = n(n+1)/2 and the sharp quotient floor is Y = R0 * Vol^{1/(n+1)}.

Everything is pure; ConformalState is an immutable value with lazily
cached derived grids.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .basis import BasisTable, SpectralField, levi_product, _same_basis
from .errors import ArgumentError, NumericalHealthError, PositivityError

# Guard below which a conformal factor counts as nonpositive on the grid.
POSITIVITY_FLOOR = 1e-8


def background_curvature(n: int) -> float:
    return 0.5 * n * (n + 1)


def yamabe_invariant(basis: BasisTable) -> float:
    """Y(S^{2n+1}) = R0 * Vol^{1/(n+1)}, the sharp quotient floor."""
    return background_curvature(basis.n) * basis.volume ** (1.0 / (basis.n + 1))


def _check_positive(u_grid: np.ndarray, floor: float = POSITIVITY_FLOOR) -> None:
    k = int(np.argmin(u_grid))
    if u_grid[k] <= floor:
        raise PositivityError(k, float(u_grid[k]))


@dataclass(frozen=True)
class ConformalState:
    """Flow state: conformal factor u at time t, derived quantities cached."""

    u: SpectralField
    t: float = 0.0

    @property
    def basis(self) -> BasisTable:
        return self.u.basis

    @property
    def n(self) -> int:
        return self.u.basis.n

    @cached_property
    def u_grid(self) -> np.ndarray:
        return self.u.grid

    @cached_property
    def min_u(self) -> float:
        return float(np.min(self.u_grid))

    @cached_property
    def volume_density(self) -> np.ndarray:
        """u^{2+2/n} at the nodes (density of dV_theta against dV_theta0)."""
        return _power(self.u_grid, 2.0 + 2.0 / self.n)

    @cached_property
    def R_grid(self) -> np.ndarray:
        return webster_curvature(self)

    @cached_property
    def vol(self) -> float:
        return float(self.basis.weights @ self.volume_density)

    @cached_property
    def E(self) -> float:
        return energy(self)

    def with_u(self, u: SpectralField, t: float | None = None) -> "ConformalState":
        return ConformalState(u, self.t if t is None else t)


def _power(grid: np.ndarray, exponent: float) -> np.ndarray:
    # integer exponents for n in {1, 2}; exp/log only in the general case
    if exponent == int(exponent):
        return grid ** int(exponent)
    if np.min(grid) <= 0.0:
        raise PositivityError(int(np.argmin(grid)), float(np.min(grid)))
    return np.exp(exponent * np.log(grid))


def webster_curvature(s: ConformalState) -> np.ndarray:
    """R_theta = u^{-(1+2/n)} (-(2+2/n) Delta u + R0 u) at the nodes."""
    basis = s.basis
    _check_positive(s.u_grid)
    n = basis.n
    lap = basis.synthesize(-basis.eigenvalues * s.u.coeffs)
    numer = -(2.0 + 2.0 / n) * lap + background_curvature(n) * s.u_grid
    return numer * _power(s.u_grid, -(1.0 + 2.0 / n))


def conformal_sublaplacian(s: ConformalState, phi: SpectralField) -> np.ndarray:
    """Delta_theta phi = u^{-(1+2/n)} (u Delta phi + 2 <grad u, grad phi>)."""
    _same_basis(s.u, phi)
    basis = s.basis
    _check_positive(s.u_grid)
    lap_phi = basis.synthesize(-basis.eigenvalues * phi.coeffs)
    lp = levi_product(s.u, phi)
    return _power(s.u_grid, -(1.0 + 2.0 / basis.n)) * (s.u_grid * lap_phi + 2.0 * lp)


def volume_theta(s: ConformalState) -> float:
    return s.vol


def gradient_energy(u: SpectralField) -> float:
    """Integral of |grad u|^2 against dV_theta0 (spectral form)."""
    return float(np.sum(u.basis.eigenvalues * u.coeffs**2))


def energy(s: ConformalState, consistency_tol: float = 1e-8) -> float:
    """Total-curvature energy E(u), checked against its grid form.

    The coefficient form (2+2/n) sum(lambda c^2) + R0 sum(c^2) must agree
    with the quadrature of R_theta dV_theta; a mismatch means the curvature
    computation and the spectral inner product disagree.
    """
    basis = s.u.basis
    n = basis.n
    c = s.u.coeffs
    e_spectral = float(np.sum(((2.0 + 2.0 / n) * basis.eigenvalues + background_curvature(n)) * c**2))
    e_grid = float(basis.weights @ (s.R_grid * s.volume_density))
    if abs(e_spectral - e_grid) > consistency_tol * max(1.0, abs(e_spectral)):
        raise NumericalHealthError(
            f"energy forms disagree: spectral {e_spectral!r} vs grid {e_grid!r}"
        )
    return e_spectral


def f_weighted_volume(s: ConformalState, f: SpectralField) -> float:
    """Integral of f dV_theta."""
    _same_basis(s.u, f)
    return float(s.basis.weights @ (f.grid * s.volume_density))


def normalized_energy(s: ConformalState, f: SpectralField) -> float:
    """E_f(u) = E(u) / (int f u^{2+2/n} dV)^{n/(n+1)}; the Lyapunov functional."""
    denom = f_weighted_volume(s, f)
    if denom <= 0.0:
        raise ArgumentError(f"nonpositive weighted volume {denom!r}")
    n = s.n
    return s.E / denom ** (n / (n + 1.0))


def alpha(s: ConformalState, f: SpectralField, consistency_tol: float = 1e-8) -> float:
    """Nonlocal coupling alpha = E(u) / int f u^{2+2/n} dV.

    Equivalently alpha * int f dV_theta = int R_theta dV_theta; both forms
    are evaluated and must agree.
    """
    denom = f_weighted_volume(s, f)
    if denom <= 0.0:
        raise ArgumentError(f"nonpositive weighted volume {denom!r}")
    a = s.E / denom
    r_total = float(s.basis.weights @ (s.R_grid * s.volume_density))
    if abs(a * denom - r_total) > consistency_tol * max(1.0, abs(r_total)):
        raise NumericalHealthError(
            f"alpha identity violated: alpha*int f dV_theta = {a * denom!r}, "
            f"int R dV_theta = {r_total!r}"
        )
    return a


def renormalize_volume(u: SpectralField) -> SpectralField:
    """Scale u so that int u^{2+2/n} dV_theta0 equals the background volume."""
    basis = u.basis
    grid = u.grid
    _check_positive(grid)
    n = basis.n
    current = float(basis.weights @ _power(grid, 2.0 + 2.0 / n))
    c = (basis.volume / current) ** (n / (2.0 * n + 2.0))
    return u * c


def yamabe_quotient(u: SpectralField) -> float:
    """E(u) / (int u^{2+2/n} dV)^{n/(n+1)}; >= Y with equality at constants."""
    basis = u.basis
    n = basis.n
    if float(np.max(np.abs(u.coeffs))) == 0.0:
        raise ArgumentError("yamabe_quotient of the zero field")
    e = float(np.sum(((2.0 + 2.0 / n) * basis.eigenvalues + background_curvature(n)) * u.coeffs**2))
    denom = float(basis.weights @ _power(np.abs(u.grid), 2.0 + 2.0 / n))
    return e / denom ** (n / (n + 1.0))
