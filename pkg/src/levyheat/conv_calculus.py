"""Space-time convolution and the convolution inequalities it certifies.

The convolution is (f (*) g)_t(x) = int_0^t ds int dy f_{t-s}(x-y) g_s(y).
Kernel-type arguments are endpoint-singular in s (p_s(0) ~ s^{-1/alpha}),
so the s-integral is evaluated after the substitution s = t sin^2(theta),
which absorbs square-root singularities at both endpoints exactly; an extra
power grading of theta handles the stronger stable-law singularities.

Rows narrower than the lattice spacing (the kernel squared at tiny times)
cannot be sampled pointwise; below the resolvable time they are replaced by
mass-correct lattice spikes, which is exact in the convolution limit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .errors import GridMismatch
from .levy_kernel import (
    DEFAULT_SPEC,
    KernelModel,
    QuadratureSpec,
    _gauss_rule,
    p0_eval,
    p0_integral,
    p_eval_many,
    theta_estimate,
)
from .measure_init import FiniteMeasure, heat_convolve_many


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Sampled nonnegative space-time function on (t_nodes) x (x_nodes)."""

    t_nodes: np.ndarray
    x_nodes: np.ndarray
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        t = np.asarray(self.t_nodes, dtype=float)
        x = np.asarray(self.x_nodes, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t[0] <= 0 or np.any(np.diff(t) <= 0):
            raise ValueError("t_nodes must be increasing and positive")
        dx = np.diff(x)
        if x.ndim != 1 or x.size < 2 or np.any(dx <= 0) or \
                not np.allclose(dx, dx[0], rtol=1e-9):
            raise ValueError("x_nodes must be a uniform increasing grid")
        if v.shape != (t.size, x.size):
            raise ValueError("values must have shape (len(t_nodes), len(x_nodes))")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid values must be finite")
        object.__setattr__(self, "t_nodes", t)
        object.__setattr__(self, "x_nodes", x)
        object.__setattr__(self, "values", v)

    @property
    def dx(self) -> float:
        return float(self.x_nodes[1] - self.x_nodes[0])

    def row_at(self, t: float) -> np.ndarray:
        """Row at time t by linear interpolation, clamped at the ends."""
        ts = self.t_nodes
        if t <= ts[0]:
            return self.values[0]
        if t >= ts[-1]:
            return self.values[-1]
        j = int(np.searchsorted(ts, t))
        w = (t - ts[j - 1]) / (ts[j] - ts[j - 1])
        return (1.0 - w) * self.values[j - 1] + w * self.values[j]


def graded_times(t_max: float, n: int = 96, grade: float = 4.0,
                 include=()) -> np.ndarray:
    """Power-graded time mesh on (0, t_max], unioned with required nodes."""
    base = t_max * (np.arange(1, n + 1) / n) ** grade
    ts = np.unique(np.concatenate([base, np.asarray(include, dtype=float)]))
    if ts.size and (ts[0] <= 0 or ts[-1] > t_max * (1 + 1e-12)):
        raise ValueError("required nodes must lie in (0, t_max]")
    return ts


def _theta_rule(n_half: int = 48):
    """Nodes/weights for int_0^t H(s) ds under s = t sin^2(theta).

    Returns (theta, w) with int_0^t H ds = t * sum w_i sin(2 theta_i)
    H(t sin^2 theta_i). Each half of [0, pi/2] is graded quadratically
    toward its endpoint so stable-law endpoint singularities stay mild.
    """
    z, w = _gauss_rule(n_half)
    v = 0.5 * (z + 1.0)
    wv = 0.5 * w
    th_lo = 0.25 * math.pi * v ** 2
    w_lo = wv * 0.5 * math.pi * v
    theta = np.concatenate([th_lo, math.pi / 2.0 - th_lo[::-1]])
    weights = np.concatenate([w_lo, w_lo[::-1]])
    return theta, weights


def _resolvable_time(model: KernelModel, dx: float) -> float:
    """Time below which the kernel is narrower than ~3 lattice cells."""
    width = 3.0 * dx
    if model.kind == "brownian":
        return width ** 2 / model.kappa
    if model.kind == "stable":
        return width ** model.alpha / model.kappa
    return width ** 2  # conservative default for tabulated exponents


def _lattice_spike(x_nodes: np.ndarray, mass: float) -> np.ndarray:
    """Unit-cell spike at the origin carrying the given integral."""
    row = np.zeros(x_nodes.size)
    j = int(np.argmin(np.abs(x_nodes)))
    row[j] = mass / (x_nodes[1] - x_nodes[0])
    return row


def kernel_squared_grid(model: KernelModel, t_nodes, x_nodes,
                        spec: QuadratureSpec = DEFAULT_SPEC) -> SpaceTimeGrid:
    """Rows of p_t(x)^2; sub-lattice times become mass p_{2t}(0) spikes."""
    t_nodes = np.asarray(t_nodes, dtype=float)
    x_nodes = np.asarray(x_nodes, dtype=float)
    u_r = _resolvable_time(model, float(x_nodes[1] - x_nodes[0]))
    rows = np.empty((t_nodes.size, x_nodes.size))
    for i, t in enumerate(t_nodes):
        if t < u_r:
            rows[i] = _lattice_spike(x_nodes, p0_eval(model, 2.0 * t, spec))
        else:
            rows[i] = p_eval_many(model, t, x_nodes, spec) ** 2
    return SpaceTimeGrid(t_nodes, x_nodes, rows)


def kernel_grid(model: KernelModel, t_nodes, x_nodes,
                spec: QuadratureSpec = DEFAULT_SPEC) -> SpaceTimeGrid:
    """Rows of p_t(x); sub-lattice times become unit-mass spikes."""
    t_nodes = np.asarray(t_nodes, dtype=float)
    x_nodes = np.asarray(x_nodes, dtype=float)
    u_r = _resolvable_time(model, float(x_nodes[1] - x_nodes[0]))
    rows = np.empty((t_nodes.size, x_nodes.size))
    for i, t in enumerate(t_nodes):
        if t < u_r:
            rows[i] = _lattice_spike(x_nodes, 1.0)
        else:
            rows[i] = np.maximum(p_eval_many(model, t, x_nodes, spec), 0.0)
    return SpaceTimeGrid(t_nodes, x_nodes, rows)


def smoothed_squared_grid(model: KernelModel, u0: FiniteMeasure, t_nodes,
                          x_nodes,
                          spec: QuadratureSpec = DEFAULT_SPEC) -> SpaceTimeGrid:
    """Rows of ((p_t * u0)(x))^2 with the same sub-lattice spike handling.

    Below the resolvable time the atom part concentrates: its square
    integrates to sum_i m_i^2 p_{2t}(0) (cross terms and the density part
    are bounded there and carry vanishing squared mass).
    """
    t_nodes = np.asarray(t_nodes, dtype=float)
    x_nodes = np.asarray(x_nodes, dtype=float)
    dx = float(x_nodes[1] - x_nodes[0])
    u_r = _resolvable_time(model, dx)
    rows = np.empty((t_nodes.size, x_nodes.size))
    frozen = None
    for i, t in enumerate(t_nodes):
        if t >= u_r:
            rows[i] = heat_convolve_many(model, u0, t, x_nodes, spec) ** 2
            continue
        if frozen is None:
            frozen = np.zeros(x_nodes.size)
            if u0.density_grid is not None:
                dens = FiniteMeasure(density_grid=u0.density_grid,
                                     density_values=u0.density_values,
                                     support_radius=u0.support_radius)
                frozen = heat_convolve_many(model, dens, u_r, x_nodes, spec) ** 2
        row = frozen.copy()
        p2 = p0_eval(model, 2.0 * t, spec)
        for y, m in u0.atoms:
            j = int(np.argmin(np.abs(x_nodes - y)))
            row[j] += m * m * p2 / dx
        rows[i] = row
    return SpaceTimeGrid(t_nodes, x_nodes, rows)


def st_convolve(f: SpaceTimeGrid, g: SpaceTimeGrid,
                n_theta_half: int = 48) -> SpaceTimeGrid:
    """Discretized (f (*) g) on the shared grid of f and g."""
    if not (np.array_equal(f.t_nodes, g.t_nodes)
            and np.array_equal(f.x_nodes, g.x_nodes)):
        raise GridMismatch("st_convolve needs f and g on the same grid")
    if np.any(f.values < 0) or np.any(g.values < 0):
        raise ValueError("st_convolve is defined for nonnegative inputs")
    theta, wq = _theta_rule(n_theta_half)
    sin2 = np.sin(theta) ** 2
    ds_w = wq * np.sin(2.0 * theta)
    out = np.empty_like(f.values)
    for i, t in enumerate(f.t_nodes):
        acc = np.zeros(f.x_nodes.size)
        for s_frac, w in zip(sin2, ds_w):
            s = t * s_frac
            row_f = f.row_at(t - s)
            row_g = g.row_at(s)
            acc += w * fftconvolve(row_f, row_g, mode="same")
        out[i] = acc * (t * f.dx)
    return SpaceTimeGrid(f.t_nodes, f.x_nodes, np.maximum(out, 0.0))


def time_convolve_at_origin(model: KernelModel, t: float,
                            n_theta_half: int = 64,
                            spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """int_0^t p_{t-s}(0) p_s(0) ds with exact density evaluations."""
    theta, wq = _theta_rule(n_theta_half)
    sin2 = np.sin(theta) ** 2
    vals = np.array([p0_eval(model, t * (1.0 - sf), spec)
                     * p0_eval(model, t * sf, spec) for sf in sin2])
    return float(t * np.sum(wq * np.sin(2.0 * theta) * vals))


def check_lemma_pp(model: KernelModel, t: float, theta: float | None = None,
                   spec: QuadratureSpec = DEFAULT_SPEC):
    """Ordered triple certifying the diagonal convolution bound.

    Returns (p_t(0) int_0^t p, int_0^t p_{t-s}(0) p_s(0) ds,
    2 theta p_t(0) int_0^t p); the contract is lower <= mid <= upper.
    """
    th = theta_estimate(model, spec=spec) if theta is None else theta
    lower = p0_eval(model, t, spec) * p0_integral(model, t, spec)
    mid = time_convolve_at_origin(model, t, spec=spec)
    return lower, mid, 2.0 * th * lower


def nfold_kernel_squared(model: KernelModel, n: int, t_targets, x_nodes,
                         t_table=None,
                         spec: QuadratureSpec = DEFAULT_SPEC) -> list[SpaceTimeGrid]:
    """Grids of the n-fold convolution power of p^2; returns levels 1..n."""
    if not 1 <= n <= 4:
        raise ValueError("nested convolutions are supported for n in 1..4")
    t_targets = np.atleast_1d(np.asarray(t_targets, dtype=float))
    if t_table is None:
        t_table = graded_times(float(t_targets.max()), include=t_targets)
    base = kernel_squared_grid(model, t_table, x_nodes, spec)
    levels = [base]
    for _ in range(n - 1):
        levels.append(st_convolve(base, levels[-1]))
    return levels


def check_lemma_star2_grid(model: KernelModel, u0: FiniteMeasure, n_levels: int,
                           t_values, x_values, theta: float | None = None,
                           x_halfwidth: float | None = None,
                           nx: int | None = None,
                           spec: QuadratureSpec = DEFAULT_SPEC):
    """(lhs, rhs) arrays of shape (n_levels, len(t_values), len(x_values)).

    Level n holds the n-fold (p^2 (*) ... (*) p^2 (*) (p_. * u0)^2)_t(x)
    and the bound u0(R) (2 theta int_0^t p_s(0) ds)^n p_t(0) (p_t*u0)(x).
    One shared graded table serves every requested (t, x) pair, so the
    cost is n_levels convolution passes regardless of how many pairs.
    The lattice spacing is sized so the smallest target time stays well
    above the resolvable time; otherwise output rows degenerate to spikes.
    """
    if not 1 <= n_levels <= 4:
        raise ValueError("nested convolutions are supported for n in 1..4")
    t_values = np.atleast_1d(np.asarray(t_values, dtype=float))
    x_values = np.atleast_1d(np.asarray(x_values, dtype=float))
    th = theta_estimate(model, spec=spec) if theta is None else theta
    t_max = float(t_values.max())
    alpha = model.alpha if model.kind == "stable" else 2.0
    if x_halfwidth is None:
        scale = (model.kappa * t_max) ** (1.0 / alpha)
        x_halfwidth = float(np.abs(x_values).max()) + u0.support_radius \
            + max(10.0, 24.0 * scale)
    if nx is None:
        t_min = float(t_values.min())
        dx_cap = (model.kappa * t_min / 4.0) ** (1.0 / alpha) / 3.0
        nx = 2 * max(512, math.ceil(x_halfwidth / dx_cap)) + 1
    x_nodes = np.linspace(-x_halfwidth, x_halfwidth, nx)
    t_table = graded_times(t_max, include=t_values)
    seed = smoothed_squared_grid(model, u0, t_table, x_nodes, spec)
    kern = kernel_squared_grid(model, t_table, x_nodes, spec)
    idx = np.searchsorted(t_table, t_values)
    lhs = np.empty((n_levels, t_values.size, x_values.size))
    rhs = np.empty_like(lhs)
    smooth = np.array([heat_convolve_many(model, u0, t, x_values, spec)
                       for t in t_values])
    p0s = np.array([p0_eval(model, t, spec) for t in t_values])
    ints = np.array([p0_integral(model, t, spec) for t in t_values])
    cur = seed
    for lev in range(n_levels):
        cur = st_convolve(kern, cur)
        for i, ti in enumerate(idx):
            lhs[lev, i] = np.interp(x_values, x_nodes, cur.values[ti])
            rhs[lev, i] = u0.total_mass * (2.0 * th * ints[i]) ** (lev + 1) \
                * p0s[i] * smooth[i]
    return lhs, rhs


def check_lemma_star2(model: KernelModel, u0: FiniteMeasure, n: int, t: float,
                      x: float, theta: float | None = None,
                      x_halfwidth: float | None = None, nx: int = 1025,
                      spec: QuadratureSpec = DEFAULT_SPEC):
    """(lhs, rhs) for the n-fold kernel-squared bound seeded by (p*u0)^2."""
    lhs, rhs = check_lemma_star2_grid(model, u0, n, [t], [x], theta,
                                      x_halfwidth, nx, spec)
    return float(lhs[n - 1, 0, 0]), float(rhs[n - 1, 0, 0])
