"""Time integration of the prescribed Webster curvature flow

    du/dt = (n/2) (alpha f - R_theta) u,
    alpha = E(u) / int f u^{2+2/n} dV,

with run-time monitors and the analytic guard constants.

The nonlocal coupling alpha is recomputed inside every Runge-Kutta stage,
which keeps the discrete analogues of volume conservation and Lyapunov
monotonicity accurate to the order of the scheme.  Steps that lose
positivity are rejected and retried with half the step size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .basis import BasisTable, SpectralField
from .conformal import (
    ConformalState,
    alpha as alpha_of,
    background_curvature,
    f_weighted_volume,
    normalized_energy,
    renormalize_volume,
)
from .basis import levi_product
from .errors import (
    ArgumentError,
    BalanceStagnationError,
    DegenerateBalanceError,
    ResolutionError,
    StepRejected,
)
from .mobius import MoebiusParams, balance, center_of_mass

DT_FLOOR = 1e-10


@dataclass(frozen=True)
class Tolerances:
    volume_drift: float = 1e-6          # relative, over a whole run
    ef_increase_slack: float = 1e-9     # relative, per accepted step
    positivity_floor: float = 1e-8
    convergence: float = 1e-6           # sup |alpha f - R| and sup |du/dt|
    guard_slack: float = 1e-6           # additive slack on the analytic guard bounds


@dataclass(frozen=True)
class FlowConfig:
    """Everything a run needs besides the basis table itself."""

    n: int = 1
    N: int = 8
    t_end: float = 10.0
    scheme: str = "rk4"                 # "rk4" | "imex"
    dt_init: float = 0.01
    dt_max: float = 0.05
    safety: float = 0.8
    monitor_ps: tuple[float, ...] | None = None
    snapshot_every: int = 10            # accepted steps per stored snapshot
    monitor_every: int = 1
    tolerances: Tolerances = field(default_factory=Tolerances)
    attach_normalizer: bool = False     # balance each snapshot, monitor min v
    max_steps: int = 100_000
    concentration_radius: float = 0.5
    concentration_mass_threshold: float = 0.5
    classify: bool = True

    def __post_init__(self):
        problems = []
        if self.t_end <= 0:
            problems.append(f"t_end must be positive, got {self.t_end!r}")
        if self.dt_init <= 0:
            problems.append(f"dt_init must be positive, got {self.dt_init!r}")
        if self.dt_max < self.dt_init:
            problems.append("dt_max must be >= dt_init")
        if self.scheme not in ("rk4", "imex"):
            problems.append(f"unknown scheme {self.scheme!r}")
        if self.monitor_ps is not None and any(p < 1 for p in self.monitor_ps):
            problems.append("monitor_ps entries must be >= 1")
        if problems:
            raise ArgumentError("; ".join(problems))

    @property
    def ps(self) -> tuple[float, ...]:
        if self.monitor_ps is not None:
            return self.monitor_ps
        return tuple(sorted({2.0, 3.0, float(self.n + 1), float(2 * self.n + 2)}))


@dataclass(frozen=True)
class GuardConstants:
    """Constants from the proofs of the alpha and curvature bounds.

    alpha_low  = R0 / max f
    alpha_high = E_f(u0) (max f * Vol)^{n/(n+1)} / (min f * Vol)
    alpha_prime_max = alpha_high^3 (max f)^2 Vol
                      / (4 n E_f(u0) (max f * Vol)^{n/(n+1)})
    gamma = min{ R0 - alpha_high*max f,
                 -(alpha_prime_max*max f + alpha_high^2 max f^2)/(alpha_low*min f) }
    energy_high = E_f(u0) (max f * Vol)^{n/(n+1)};  energy_low = R0 * Vol
    """

    alpha_low: float
    alpha_high: float
    alpha_prime_max: float
    gamma: float
    energy_low: float
    energy_high: float


def guard_constants(f: SpectralField, u0: SpectralField) -> GuardConstants:
    basis = f.basis
    n = basis.n
    vol = basis.volume
    R0 = background_curvature(n)
    m = float(np.min(f.grid))
    M = float(np.max(f.grid))
    if m <= 0:
        raise ArgumentError("prescribed function must be positive on the grid")
    ef0 = normalized_energy(ConformalState(u0), f)
    a1 = R0 / M
    a2 = ef0 * (M * vol) ** (n / (n + 1.0)) / (m * vol)
    a0 = a2**3 * M**2 * vol / (4.0 * n * ef0 * (M * vol) ** (n / (n + 1.0)))
    gamma = min(R0 - a2 * M, -(a0 * M + a2**2 * M**2) / (a1 * m))
    return GuardConstants(
        alpha_low=a1,
        alpha_high=a2,
        alpha_prime_max=a0,
        gamma=gamma,
        energy_low=R0 * vol,
        energy_high=ef0 * (M * vol) ** (n / (n + 1.0)),
    )


# ---------------------------------------------------------------------------
# right-hand side and stepping
# ---------------------------------------------------------------------------


def rhs(s: ConformalState, f: SpectralField) -> SpectralField:
    """(n/2)(alpha f - R_theta) u, analyzed back onto the basis."""
    basis = s.basis
    a = alpha_of(s, f)
    vals = 0.5 * basis.n * (a * f.grid - s.R_grid) * s.u_grid
    return basis.field_from_grid(vals)


def _positive_state(u: SpectralField, t: float, floor: float) -> ConformalState:
    s = ConformalState(u, t)
    if s.min_u <= floor:
        raise StepRejected(f"min u = {s.min_u:.3e} at t = {t:.6g}")
    return s


def step(s: ConformalState, f: SpectralField, dt: float, *,
         scheme: str = "rk4", positivity_floor: float = 1e-8) -> ConformalState:
    """One time step.  Raises StepRejected on positivity loss."""
    if dt <= 0:
        raise ArgumentError("dt must be positive")
    if scheme == "rk4":
        return _step_rk4(s, f, dt, positivity_floor)
    if scheme == "imex":
        return _step_imex(s, f, dt, positivity_floor)
    raise ArgumentError(f"unknown scheme {scheme!r}")


def _step_rk4(s, f, dt, floor):
    u0 = s.u
    k1 = rhs(s, f)
    k2 = rhs(_positive_state(u0 + (0.5 * dt) * k1, s.t + 0.5 * dt, floor), f)
    k3 = rhs(_positive_state(u0 + (0.5 * dt) * k2, s.t + 0.5 * dt, floor), f)
    k4 = rhs(_positive_state(u0 + dt * k3, s.t + dt, floor), f)
    u1 = u0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return _positive_state(u1, s.t + dt, floor)


def _step_imex(s, f, dt, floor):
    # frozen-coefficient splitting: treat c * Delta implicitly (diagonal),
    # the remainder explicitly; first order, unconditionally stable in the
    # stiff part
    basis = s.basis
    n = basis.n
    c = (n + 1.0) * float(np.max(s.u_grid ** (-2.0 / n)))
    expl = rhs(s, f).coeffs + c * basis.eigenvalues * s.u.coeffs
    new = (s.u.coeffs + dt * expl) / (1.0 + dt * c * basis.eigenvalues)
    return _positive_state(SpectralField(basis, new), s.t + dt, floor)


def stable_dt(s: ConformalState, safety: float = 0.8) -> float:
    """RK4 stability estimate for the quasilinear diffusive part."""
    basis = s.basis
    n = basis.n
    lam_max = float(np.max(basis.eigenvalues))
    stiff = (n + 1.0) * lam_max * float(np.max(s.u_grid ** (-2.0 / n)))
    return safety * 2.78 / stiff


# ---------------------------------------------------------------------------
# monitors
# ---------------------------------------------------------------------------


def F_p(s: ConformalState, f: SpectralField, p: float) -> float:
    """int |alpha f - R|^p dV_theta (monitor; no re-analysis of the power)."""
    if p < 1:
        raise ArgumentError("p must be >= 1")
    a = alpha_of(s, f)
    w = np.abs(a * f.grid - s.R_grid) ** p
    return float(s.basis.weights @ (w * s.volume_density))


def G_2(s: ConformalState, f: SpectralField) -> float:
    """int |grad_theta (alpha f - R)|^2 dV_theta via the change-of-form identity."""
    basis = s.basis
    a = alpha_of(s, f)
    w = basis.field_from_grid(a * f.grid - s.R_grid)
    return float(basis.weights @ (s.u_grid**2 * levi_product(w, w)))


def alpha_prime(s: ConformalState, f: SpectralField) -> float:
    """Closed-form d(alpha)/dt along the flow."""
    basis = s.basis
    a = alpha_of(s, f)
    dev = a * f.grid - s.R_grid
    dV = s.volume_density * basis.weights
    int_sq = float(dV @ dev**2)
    int_f = float(dV @ (a * f.grid * dev))
    return a / s.E * (-basis.n * int_sq - int_f)


def dissipation_check(s: ConformalState, f: SpectralField, dt: float = 1e-4) -> float:
    """Relative error between finite-difference dE_f/dt and the closed form.

    The closed form is -n F_2(t) / (int f u^{2+2/n} dV)^{n/(n+1)} with F_2
    measured against dV_theta0 density, i.e. the dissipation rate of the
    Lyapunov functional.
    """
    basis = s.basis
    n = basis.n
    a = alpha_of(s, f)
    dev = a * f.grid - s.R_grid
    num = float(basis.weights @ (dev**2 * s.volume_density))
    closed = -n * num / f_weighted_volume(s, f) ** (n / (n + 1.0))
    s1 = step(s, f, dt)
    s2 = step(s1, f, dt)
    e0 = normalized_energy(s, f)
    e1 = normalized_energy(s1, f)
    e2 = normalized_energy(s2, f)
    fd = (-3.0 * e0 + 4.0 * e1 - e2) / (2.0 * dt)   # one-sided second order
    return abs(fd - closed) / max(abs(closed), 1e-12)


@dataclass(frozen=True)
class MonitorRecord:
    t: float
    dt: float
    vol: float
    E: float
    E_f: float
    alpha: float
    alpha_prime: float
    Fp: dict[float, float]
    G2: float
    min_R_minus_alpha_f: float
    min_u: float
    norm_P: float
    min_v: float                     # nan unless a normalizer is attached
    flag: int                        # 0 running, 1 converged, 2 concentrating

    def validate(self) -> None:
        values = [self.t, self.dt, self.vol, self.E, self.E_f, self.alpha,
                  self.alpha_prime, self.G2, self.min_R_minus_alpha_f,
                  self.min_u, self.norm_P, *self.Fp.values()]
        if not all(math.isfinite(v) for v in values):
            raise ArgumentError(f"non-finite monitor entry at t={self.t!r}")


def sample_monitors(s: ConformalState, f: SpectralField, dt: float, *,
                    min_v: float = math.nan, flag: int = 0,
                    ps: tuple[float, ...] | None = None) -> MonitorRecord:
    basis = s.basis
    a = alpha_of(s, f)
    all_ps = {2.0, 3.0, float(basis.n + 1), float(2 * basis.n + 2)}
    if ps:
        all_ps.update(float(p) for p in ps)
    rec = MonitorRecord(
        t=s.t,
        dt=dt,
        vol=s.vol,
        E=s.E,
        E_f=normalized_energy(s, f),
        alpha=a,
        alpha_prime=alpha_prime(s, f),
        Fp={p: F_p(s, f, p) for p in sorted(all_ps)},
        G2=G_2(s, f),
        min_R_minus_alpha_f=float(np.min(s.R_grid - a * f.grid)),
        min_u=s.min_u,
        norm_P=center_of_mass(s).norm,
        min_v=min_v,
        flag=flag,
    )
    rec.validate()
    return rec


@dataclass(frozen=True)
class Snapshot:
    index: int
    t: float
    coeffs: np.ndarray
    moebius: MoebiusParams | None = None


@dataclass
class RunResult:
    config: FlowConfig
    f: SpectralField
    guards: GuardConstants
    monitors: list[MonitorRecord]
    snapshots: list[Snapshot]
    classification: str              # converged | concentrating | running | failed
    failure: str | None
    invariant_violations: list[str]
    final_state: ConformalState

    @property
    def trajectory(self) -> list[ConformalState]:
        basis = self.final_state.basis
        return [ConformalState(SpectralField(basis, s.coeffs), s.t) for s in self.snapshots]


def _check_guards(rec: MonitorRecord, g: GuardConstants, f: SpectralField,
                  tol: Tolerances, vol0: float, ef_prev: float, out: list[str]) -> None:
    slack = tol.guard_slack
    if not (g.alpha_low - slack <= rec.alpha <= g.alpha_high + slack):
        out.append(f"t={rec.t:.6g}: alpha={rec.alpha!r} outside [{g.alpha_low!r}, {g.alpha_high!r}]")
    if rec.alpha_prime > g.alpha_prime_max + slack:
        out.append(f"t={rec.t:.6g}: alpha'={rec.alpha_prime!r} > {g.alpha_prime_max!r}")
    if rec.min_R_minus_alpha_f < g.gamma - slack:
        out.append(f"t={rec.t:.6g}: min(R - alpha f)={rec.min_R_minus_alpha_f!r} < gamma={g.gamma!r}")
    if not (g.energy_low - slack <= rec.E <= g.energy_high + slack * abs(g.energy_high)):
        out.append(f"t={rec.t:.6g}: E={rec.E!r} outside [{g.energy_low!r}, {g.energy_high!r}]")
    if abs(rec.vol - vol0) > tol.volume_drift * vol0:
        out.append(f"t={rec.t:.6g}: volume drift {abs(rec.vol - vol0) / vol0:.3e}")
    if rec.E_f > ef_prev + tol.ef_increase_slack * abs(ef_prev):
        out.append(f"t={rec.t:.6g}: E_f increased {ef_prev!r} -> {rec.E_f!r}")


def spectral_gap_check(monitors: Sequence[MonitorRecord], n: int,
                       eps: float = 0.05, f2_gate: float = 1e-3) -> list[str]:
    """Discrete form of the F_2 decay inequality on tail samples.

    Checks d/dt F_2 <= (n+1+eps)(n F_2 - 2 G_2) + eps F_2 with the
    derivative measured by backward differences, wherever F_2 < f2_gate.
    The eps slack absorbs the vanishing error terms of the underlying estimate.
    """
    bad = []
    for prev, cur in zip(monitors, monitors[1:]):
        if cur.Fp[2.0] >= f2_gate or cur.t <= prev.t:
            continue
        dF2 = (cur.Fp[2.0] - prev.Fp[2.0]) / (cur.t - prev.t)
        bound = (n + 1 + eps) * (n * cur.Fp[2.0] - 2.0 * cur.G2) + eps * cur.Fp[2.0]
        if dF2 > bound + 1e-12:
            bad.append(f"t={cur.t:.6g}: dF2/dt={dF2:.6e} > bound={bound:.6e}")
    return bad


def run(config: FlowConfig, basis: BasisTable, f: SpectralField,
        u0: SpectralField) -> RunResult:
    """Integrate to t_end or until the trajectory classifier fires.

    u0 is volume-renormalized before the run starts.  Snapshots and
    monitors are recorded on the accepted-step cadence from the config.
    """
    if f.basis is not basis or u0.basis is not basis:
        raise ArgumentError("f and u0 must live on the supplied basis")
    if float(np.min(f.grid)) <= 0:
        raise ArgumentError("prescribed function must be positive on the grid")
    tol = config.tolerances

    u0 = renormalize_volume(u0)
    guards = guard_constants(f, u0)
    state = ConformalState(u0, 0.0)
    vol0 = state.vol

    monitors: list[MonitorRecord] = []
    snapshots: list[Snapshot] = []
    violations: list[str] = []
    classification = "running"
    failure = None

    def normalizer_min_v(s: ConformalState) -> tuple[float, MoebiusParams | None]:
        if not config.attach_normalizer:
            return math.nan, None
        try:
            params, v = balance(s.u)
            return float(np.min(v.grid)), params
        except (BalanceStagnationError, DegenerateBalanceError, ResolutionError):
            return math.nan, None

    frac_history: list[float] = []

    def classify(s: ConformalState, rec: MonitorRecord) -> str:
        if not config.classify:
            return "running"
        a = rec.alpha
        sup_dev = float(np.max(np.abs(a * f.grid - s.R_grid)))
        sup_rhs = 0.5 * basis.n * float(np.max(np.abs((a * f.grid - s.R_grid) * s.u_grid)))
        if sup_dev <= tol.convergence and sup_rhs <= tol.convergence:
            return "converged"
        # mass fraction in a shrinking-ball pair around the current peak
        k = int(np.argmax(s.u_grid))
        dist = np.linalg.norm(basis.nodes - basis.nodes[k][None, :], axis=1)
        r0 = config.concentration_radius
        mass = basis.weights * s.volume_density
        frac = float(np.sum(mass[dist <= r0])) / s.vol
        half = float(np.sum(mass[dist <= 0.5 * r0])) / s.vol
        frac_history.append(frac)
        if (
            frac >= config.concentration_mass_threshold
            and half >= 0.5 * config.concentration_mass_threshold
            and len(frac_history) >= 4
            and all(b >= a - 1e-9 for a, b in zip(frac_history[-4:], frac_history[-3:]))
        ):
            return "concentrating"
        return "running"

    min_v, params = normalizer_min_v(state)
    rec = sample_monitors(state, f, 0.0, min_v=min_v)
    cls = classify(state, rec)
    flag = {"running": 0, "converged": 1, "concentrating": 2}[cls]
    rec = replace(rec, flag=flag)
    monitors.append(rec)
    snapshots.append(Snapshot(0, 0.0, state.u.coeffs.copy(), params))
    ef_prev = rec.E_f

    if cls == "converged":
        return RunResult(config, f, guards, monitors, snapshots, "converged",
                         None, violations, state)

    dt = config.dt_init
    accepted = 0
    while state.t < config.t_end - 1e-14 and accepted < config.max_steps:
        dt = min(dt, config.dt_max, config.t_end - state.t,
                 stable_dt(state, config.safety))
        try:
            new_state = step(state, f, dt, scheme=config.scheme,
                             positivity_floor=tol.positivity_floor)
        except StepRejected:
            dt *= 0.5
            if dt < DT_FLOOR:
                failure = f"dt underflow at t={state.t:.6g}"
                classification = "failed"
                snapshots.append(Snapshot(len(snapshots), state.t, state.u.coeffs.copy()))
                break
            continue
        state = new_state
        accepted += 1
        if accepted % config.monitor_every == 0 or state.t >= config.t_end - 1e-14:
            take_snapshot = (accepted % config.snapshot_every == 0)
            min_v, params = (normalizer_min_v(state) if take_snapshot else (math.nan, None))
            rec = sample_monitors(state, f, dt, min_v=min_v)
            cls = classify(state, rec)
            flag = {"running": 0, "converged": 1, "concentrating": 2}[cls]
            rec = replace(rec, flag=flag)
            _check_guards(rec, guards, f, tol, vol0, ef_prev, violations)
            ef_prev = rec.E_f
            monitors.append(rec)
            if take_snapshot:
                snapshots.append(Snapshot(len(snapshots), state.t, state.u.coeffs.copy(), params))
            if cls in ("converged", "concentrating"):
                classification = cls
                break
        dt = min(dt * 1.25, config.dt_max)
    else:
        classification = "running"

    if snapshots[-1].t < state.t:
        snapshots.append(Snapshot(len(snapshots), state.t, state.u.coeffs.copy()))
    violations.extend(spectral_gap_check(monitors, basis.n))
    return RunResult(config, f, guards, monitors, snapshots, classification,
                     failure, violations, state)
