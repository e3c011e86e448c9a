"""Finite Borel measures on R as initial data, and their kernel smoothing.

A measure is a list of atoms plus an optional sampled density part. The
delta measure at the origin (the interesting initial condition) is exact:
atoms are never mollified. Smoothing by the transition kernel goes through
the Fourier side,

    (p_t * u0)(x) = (1/pi) int_0^inf e^{-t psi(xi)}
                    Re[ u0_hat(xi) e^{-i xi x} ] dxi,

which handles atoms and densities uniformly with one quadrature shared by
all evaluation points.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigInvalid
from .levy_kernel import (
    DEFAULT_SPEC,
    KernelModel,
    QuadratureSpec,
    _cutoff_for,
    _xi_rule,
    psi_eval,
)


@dataclass(frozen=True)
class FiniteMeasure:
    """Finite nonnegative Borel measure: atoms plus a sampled density.

    density_grid/density_values sample a nonnegative function whose integral
    is taken by the trapezoid rule. support_radius is stored, not inferred;
    the constructor checks everything actually lives inside [-K, K].
    """

    atoms: tuple[tuple[float, float], ...] = ()
    density_grid: np.ndarray | None = field(default=None, repr=False)
    density_values: np.ndarray | None = field(default=None, repr=False)
    support_radius: float = 0.0
    total_mass: float | None = None  # optional declared value, cross-checked

    def __post_init__(self):
        atoms = tuple((float(y), float(m)) for y, m in self.atoms)
        object.__setattr__(self, "atoms", atoms)
        if any(m <= 0 for _, m in atoms):
            raise ValueError("atom masses must be positive")
        if (self.density_grid is None) != (self.density_values is None):
            raise ValueError("density needs both a grid and values")
        if self.density_grid is not None:
            grid = np.asarray(self.density_grid, dtype=float)
            vals = np.asarray(self.density_values, dtype=float)
            if grid.ndim != 1 or grid.shape != vals.shape or grid.size < 2:
                raise ValueError("density grid/values must be matching 1-d arrays")
            if np.any(np.diff(grid) <= 0):
                raise ValueError("density grid must be strictly increasing")
            if np.any(vals < 0):
                raise ValueError("density values must be nonnegative")
            object.__setattr__(self, "density_grid", grid)
            object.__setattr__(self, "density_values", vals)
        computed = self._compute_mass()
        if computed <= 0:
            raise ValueError("measure must have positive total mass")
        if self.total_mass is not None and \
                abs(self.total_mass - computed) > 1e-10 * computed:
            raise ValueError(
                f"declared total mass {self.total_mass!r} disagrees with the "
                f"recomputed value {computed!r}"
            )
        object.__setattr__(self, "total_mass", computed)
        k = self.support_radius
        if math.isfinite(k):
            if any(abs(y) > k for y, _ in atoms):
                raise ValueError("atom outside the declared support radius")
            if self.density_grid is not None:
                outside = np.abs(self.density_grid) > k
                if np.any(self.density_values[outside] != 0.0):
                    raise ValueError("density nonzero outside the declared support radius")

    def _compute_mass(self) -> float:
        mass = sum(m for _, m in self.atoms)
        if self.density_grid is not None:
            mass += float(np.trapezoid(self.density_values, self.density_grid))
        return mass


def delta(mass: float = 1.0, at: float = 0.0) -> FiniteMeasure:
    """Point mass; the default is the unit delta at the origin."""
    return FiniteMeasure(atoms=((at, mass),), support_radius=abs(at))


def fourier_u0(u0: FiniteMeasure, xi):
    """u0_hat(xi) = int e^{i xi y} u0(dy); |u0_hat| <= total mass."""
    x = np.asarray(xi, dtype=float)
    out = np.zeros(x.shape, dtype=complex)
    for y, m in u0.atoms:
        out += m * np.exp(1j * x * y)
    if u0.density_grid is not None:
        g, v = u0.density_grid, u0.density_values
        w = np.empty_like(g)
        w[1:-1] = 0.5 * (g[2:] - g[:-2])
        w[0] = 0.5 * (g[1] - g[0])
        w[-1] = 0.5 * (g[-1] - g[-2])
        out += np.exp(1j * np.multiply.outer(x, g)) @ (w * v)
    return out if np.ndim(xi) else complex(out)


def heat_convolve_many(model: KernelModel, u0: FiniteMeasure, t: float, xs,
                       spec: QuadratureSpec = DEFAULT_SPEC) -> np.ndarray:
    """(p_t * u0)(x) for an array of x, one shared Fourier quadrature."""
    if not t > 0:
        raise ValueError("t must be positive")
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    cutoff = spec.cutoff_xi or _cutoff_for(model, t, spec.tol)
    k = u0.support_radius if math.isfinite(u0.support_radius) else \
        max((abs(y) for y, _ in u0.atoms), default=0.0)
    osc = float(np.abs(xs).max()) + k
    nodes, weights = _xi_rule(cutoff, osc, spec)
    damp = weights * np.exp(-t * psi_eval(model, nodes))
    u0_hat = fourier_u0(u0, nodes)
    phase = np.exp(-1j * np.multiply.outer(xs, nodes))
    return (phase @ (damp * u0_hat)).real / math.pi


def heat_convolve(model: KernelModel, u0: FiniteMeasure, t: float, x: float,
                  spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """(p_t * u0)(x) = int p_t(x - y) u0(dy)."""
    return float(heat_convolve_many(model, u0, t, [x], spec)[0])


def heat_convolve_rows(model: KernelModel, u0: FiniteMeasure, ts, xs,
                       spec: QuadratureSpec = DEFAULT_SPEC) -> np.ndarray:
    """(p_t * u0)(x) rows over an array of times, one shared xi rule.

    The rule is sized for the smallest time (largest cutoff), so later
    rows see spare resolution, and one phase matrix serves every row.
    Marching schemes that need hundreds of rows on a fixed lattice should
    use this instead of per-time heat_convolve_many calls; note the rule
    depends on min(ts), so splitting one batch into two does not
    reproduce the same floating-point values.
    """
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    if np.any(ts <= 0):
        raise ValueError("times must be positive")
    cutoff = spec.cutoff_xi or _cutoff_for(model, float(ts.min()), spec.tol)
    k = u0.support_radius if math.isfinite(u0.support_radius) else \
        max((abs(y) for y, _ in u0.atoms), default=0.0)
    osc = float(np.abs(xs).max()) + k
    nodes, weights = _xi_rule(cutoff, osc, spec)
    damp = np.exp(-np.multiply.outer(ts, psi_eval(model, nodes)))
    damp = damp * (weights * fourier_u0(u0, nodes))
    out = np.empty((ts.size, xs.size))
    block = max(1, 2_000_000 // nodes.size)
    for i in range(0, xs.size, block):
        phase = np.exp(-1j * np.multiply.outer(xs[i:i + block], nodes))
        out[:, i:i + block] = (damp @ phase.T).real
    return out / math.pi


def make_positive_definite_example(a: float) -> FiniteMeasure:
    """a * delta_0 plus a unit-mass standard Gaussian density.

    The Fourier transform is a + e^{-xi^2/2} >= a > 0, which is the
    positive-definiteness (with mass bounded below at infinity) needed for
    the small-time lower-bound tightness checks.
    """
    if not a > 0:
        raise ValueError("a must be positive")
    grid = np.arange(-10.0, 10.0 + 1e-12, 0.01)
    vals = np.exp(-0.5 * grid ** 2) / math.sqrt(2.0 * math.pi)
    vals = vals / np.trapezoid(vals, grid)  # unit mass exactly, in trapezoid arithmetic
    return FiniteMeasure(atoms=((0.0, a),), density_grid=grid,
                         density_values=vals, support_radius=10.0)


def measure_to_json(u0: FiniteMeasure) -> str:
    doc = {
        "atoms": [[y, m] for y, m in u0.atoms],
        "support_radius": u0.support_radius,
    }
    if u0.density_grid is not None:
        doc["density"] = {
            "grid": u0.density_grid.tolist(),
            "values": u0.density_values.tolist(),
        }
    return json.dumps(doc)


def measure_from_json(text_or_doc) -> FiniteMeasure:
    doc = json.loads(text_or_doc) if isinstance(text_or_doc, str) else text_or_doc
    if not isinstance(doc, dict):
        raise ConfigInvalid("measure document must be a JSON object")
    try:
        atoms = tuple((float(y), float(m)) for y, m in doc.get("atoms", []))
        radius = float(doc.get("support_radius", 0.0))
        grid = vals = None
        if "density" in doc:
            grid = np.asarray(doc["density"]["grid"], dtype=float)
            vals = np.asarray(doc["density"]["values"], dtype=float)
        return FiniteMeasure(atoms=atoms, density_grid=grid,
                             density_values=vals, support_radius=radius)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"bad measure document: {exc}") from exc
