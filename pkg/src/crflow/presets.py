"""Named field specifications for prescribed functions and initial factors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import BasisTable, SpectralField
from .conformal import renormalize_volume
from .errors import ArgumentError
from .mobius import HeisenbergPoint, MoebiusParams, bubble


@dataclass(frozen=True)
class FieldSpec:
    """Declarative field recipe: kind + parameters.

    kinds: "constant" (value), "coordinate" (1 + amplitude * Re x_1),
    "bubble" (z, tau, r as in MoebiusParams).
    """

    kind: str
    value: float = 1.0
    amplitude: float = 0.1
    z: tuple = ()
    tau: float = 0.0
    r: float = 1.0

    def build(self, basis: BasisTable) -> SpectralField:
        if self.kind == "constant":
            return basis.constant_field(self.value)
        if self.kind == "coordinate":
            one = basis.constant_field(1.0)
            pert = basis.coordinate_field(0, "re")
            return basis.field(one.coeffs + self.amplitude * pert.coeffs)
        if self.kind == "bubble":
            z = np.array([complex(re, im) for re, im in self.z], dtype=complex)
            if z.shape != (basis.n,):
                raise ArgumentError(f"bubble spec needs {basis.n} complex entries, got {len(z)}")
            params = MoebiusParams(HeisenbergPoint(z, self.tau), self.r)
            return bubble(params, basis, resolution_threshold=0.05)
        raise ArgumentError(f"unknown field kind {self.kind!r}")


# Named presets: (f spec, u0 spec).  u0 is volume-renormalized by run().
PRESETS: dict[str, tuple[FieldSpec, FieldSpec]] = {
    # CR Yamabe flow from a smoothly perturbed round factor
    "yamabe-const": (
        FieldSpec("constant", value=1.0),
        FieldSpec("coordinate", amplitude=0.1),
    ),
    # prescribed curvature with a function satisfying the simple bubble condition
    "prescribed-sbc": (
        FieldSpec("coordinate", amplitude=0.1),
        FieldSpec("coordinate", amplitude=0.1),
    ),
    # concentration experiment: strong bubble start
    "bubble-start": (
        FieldSpec("coordinate", amplitude=0.1),
        FieldSpec("bubble", z=((0.2, 0.1),), tau=0.15, r=3.0),
    ),
}


def resolve_fields(f_spec: FieldSpec, u0_spec: FieldSpec,
                   basis: BasisTable) -> tuple[SpectralField, SpectralField]:
    f = f_spec.build(basis)
    if float(np.min(f.grid)) <= 0.0:
        raise ArgumentError("prescribed function is not positive on the grid")
    u0 = renormalize_volume(u0_spec.build(basis))
    return f, u0
