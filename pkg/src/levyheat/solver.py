"""Lattice solver for the mild equation du = Lu dt + sigma(u) dW.

Two routes to the same object:

* ``picard_iterate`` runs the fixed-horizon Picard scheme: stage n+1 is the
  deterministic part plus the stochastic convolution of sigma(stage n)
  against the frozen noise increments.
* ``evolve`` marches the per-step mild recursion
  u_{t+dt} = p_dt * u_t + int_t^{t+dt} p_{t+dt-s}(y-x) sigma(u) dW.

Both use band-limited kernel rows on the lattice, so the one-step
propagator is an exact lattice semigroup and the unrolled time-step weights
coincide with the Picard weights up to float roundoff and edge truncation
(see ``bandlimited_rows``).

Conventions shared by every marching routine here:

* the field lattice is cell-centered, x_m = -L + (m + 1/2) dx with
  L = nx dx / 2, co-located with the noise cells;
* the first step of any run from measure data is purely deterministic
  (sigma of a measure is not defined), so noise row 0 is reserved and never
  consumed; continuation runs consume shifted rows starting at 0;
* the deterministic part is never stepped: row i is (p_{i dt} * u0)(x)
  evaluated by exact Fourier quadrature, and only the noise part is
  propagated.  This keeps the mean identity exact for measure data and
  makes restarts bit-exact (the propagated noise part is stored on the
  returned lattice).
"""

from __future__ import annotations

import math
import os
import warnings
from collections import namedtuple
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import irfft, next_fast_len, rfft
from scipy.linalg import toeplitz
from scipy.signal import fftconvolve

from .conv_calculus import (SpaceTimeGrid, _theta_rule, graded_times,
                            kernel_squared_grid, smoothed_squared_grid,
                            st_convolve)
from .errors import (AllocationLimit, GridMismatch, HorizonExceeded,
                     QuadratureUnderresolved, TruncationTooSmall)
from .levy_kernel import (DEFAULT_SPEC, KernelModel, QuadratureSpec,
                          _upsilon_tail, _xi_rule, bandlimited_rows,
                          exterior_mass, frak_T, gamma_k, p0_eval, psi_eval,
                          upsilon_eval)
from .measure_init import (FiniteMeasure, heat_convolve_many,
                           heat_convolve_rows)
from .noise_field import MAX_CELLS, NoiseLattice, sample_noise

__all__ = [
    "SigmaSpec", "sigma_linear", "sigma_saturating", "sigma_custom",
    "FieldLattice", "MomentTable", "MomentRow", "StabilityRow",
    "picard_iterate", "evolve", "pam_second_moment_oracle",
    "stability_compare", "stability_bound", "positivity_scan", "mc_moments",
]

# Pinned slack exponent for the growth-bound column of MomentTable.
EPS_GROWTH = 0.5

TRUNCATION_TOL = 1e-8


# ---------------------------------------------------------------------------
# Multiplicative-noise coefficient.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SigmaSpec:
    """Noise coefficient sigma with its Lipschitz data.

    kind is one of "linear" (sigma(x) = lam x), "saturating_linear"
    (sigma(x) = lam c tanh(x/c), a smooth version of lam sign(x) min(|x|, c))
    or "custom" (tabulated, linearly interpolated, clamped outside the
    table).  lip is the Lipschitz constant, lower_lip = inf |sigma(x)/x|
    (zero is allowed and is what saturation produces).
    """

    kind: str
    lip: float
    lower_lip: float
    lam: float = 0.0
    cap: float = 0.0
    table_x: np.ndarray | None = field(default=None, repr=False)
    table_y: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("linear", "saturating_linear", "custom"):
            raise ValueError(f"unknown sigma kind {self.kind!r}")
        if self.lip < 0 or self.lower_lip < 0:
            raise ValueError("Lipschitz constants must be nonnegative")
        if self.lower_lip > self.lip * (1 + 1e-12):
            raise ValueError("lower_lip cannot exceed lip")
        if self.kind == "custom":
            tx = np.asarray(self.table_x, dtype=float)
            ty = np.asarray(self.table_y, dtype=float)
            if tx.ndim != 1 or tx.shape != ty.shape or tx.size < 2:
                raise ValueError("custom sigma needs matching 1-d tables")
            if np.any(np.diff(tx) <= 0):
                raise ValueError("custom sigma table_x must be increasing")
            object.__setattr__(self, "table_x", tx)
            object.__setattr__(self, "table_y", ty)
            if float(np.interp(0.0, tx, ty)) != 0.0:
                raise ValueError("sigma(0) = 0 must hold exactly")

    def apply(self, values: np.ndarray) -> np.ndarray:
        if self.kind == "linear":
            return self.lam * values
        if self.kind == "saturating_linear":
            return self.lam * self.cap * np.tanh(values / self.cap)
        return np.interp(values, self.table_x, self.table_y)


def sigma_linear(lam: float) -> SigmaSpec:
    """sigma(x) = lam x; lam = 0 gives the noiseless equation."""
    return SigmaSpec(kind="linear", lam=float(lam),
                     lip=abs(float(lam)), lower_lip=abs(float(lam)))


def sigma_saturating(lam: float, cap: float) -> SigmaSpec:
    if not cap > 0:
        raise ValueError("cap must be positive")
    return SigmaSpec(kind="saturating_linear", lam=float(lam),
                     cap=float(cap), lip=abs(float(lam)), lower_lip=0.0)


def sigma_custom(table_x, table_y, lower_lip: float | None = None) -> SigmaSpec:
    tx = np.asarray(table_x, dtype=float)
    ty = np.asarray(table_y, dtype=float)
    slopes = np.abs(np.diff(ty) / np.diff(tx))
    lip = float(slopes.max())
    if lower_lip is None:
        # outside the table sigma is clamped to a constant, so the infimum
        # of |sigma(x)/x| over all of R is 0 unless the caller knows better
        lower_lip = 0.0
    return SigmaSpec(kind="custom", table_x=tx, table_y=ty,
                     lip=lip, lower_lip=float(lower_lip))


# ---------------------------------------------------------------------------
# Result containers.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FieldLattice:
    """One realized field on a space-time lattice.

    scheme is "picard" (picard_order sweeps) or "timestep".  noise_part
    holds the propagated stochastic component for timestep runs (the full
    rows, aligned with grid.values); it is what makes restarts bit-exact,
    because the deterministic rows are recomputed analytically and float
    subtraction would not recover the noise part.  eps_num is ten times the
    measured drift of the deterministic rows under the lattice propagator,
    the scheme-error yardstick used by positivity_scan.
    """

    grid: SpaceTimeGrid
    scheme: str
    seed: int
    truncation_L: float
    dt: float
    picard_order: int | None = None
    noise_part: np.ndarray | None = field(default=None, repr=False)
    eps_num: float | None = None
    exterior_mass_frac: float = 0.0

    def __post_init__(self):
        if self.scheme not in ("picard", "timestep"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "picard":
            if self.picard_order is None or self.picard_order < 0:
                raise ValueError("picard scheme needs picard_order >= 0")
            if self.picard_order == 0 and np.any(self.grid.values != 0.0):
                raise ValueError("zeroth Picard stage must be identically 0")
        elif self.noise_part is not None and \
                self.noise_part.shape != self.grid.values.shape:
            raise ValueError("noise_part shape must match the field rows")


MomentRow = namedtuple("MomentRow", [
    "t", "x", "k", "estimate", "std_error",
    "bound_exist_unique", "bound_h1", "raw_moment", "raw_std_error",
])

StabilityRow = namedtuple("StabilityRow", [
    "eps", "distance", "std_error", "bound", "tail_bound",
])


@dataclass(frozen=True)
class MomentTable:
    """Empirical k-th moment norms with their theoretical ceilings.

    estimate is the L^k norm (E|u|^k)^{1/k} (for k = 1 the signed mean; the
    solution is nonnegative so the two agree up to scheme error), std_error
    its delta-method standard error, raw_moment/raw_std_error the plain
    E|u|^k pair used for 3-sigma comparisons.  bound_h1 is the short-horizon
    norm bound 4 sqrt(k) (1 v lip) sqrt(u0(R) p_t(0) (p_t*u0)(x)), valid for
    t <= frak_T_k.  bound_exist_unique is the growth-bound shape
    exp((1+eps) gamma(k') t / k') sqrt(1 + p_t(0) (p_t*u0)(x)) with
    k' = max(k, 2) and the pinned eps; it omits the calibration constant
    C_eps, which the analysis layer fits, and dominates the k-norm because
    norms are monotone in k.
    """

    t: np.ndarray
    x: np.ndarray
    k: np.ndarray
    estimate: np.ndarray
    std_error: np.ndarray
    bound_exist_unique: np.ndarray
    bound_h1: np.ndarray
    raw_moment: np.ndarray
    raw_std_error: np.ndarray
    replicas: int
    eps_growth: float = EPS_GROWTH

    def __post_init__(self):
        n = self.t.size
        for name in ("x", "k", "estimate", "std_error", "bound_exist_unique",
                     "bound_h1", "raw_moment", "raw_std_error"):
            if getattr(self, name).shape != (n,):
                raise ValueError("moment table columns must be aligned 1-d")
        if not (np.all(np.isfinite(self.bound_exist_unique))
                and np.all(np.isfinite(self.bound_h1))):
            raise ValueError("bounds must be finite")
        if np.any(self.std_error < 0) or np.any(self.raw_std_error < 0):
            raise ValueError("standard errors must be nonnegative")

    def rows(self) -> list[MomentRow]:
        return [MomentRow(*vals) for vals in zip(
            self.t, self.x, self.k, self.estimate, self.std_error,
            self.bound_exist_unique, self.bound_h1,
            self.raw_moment, self.raw_std_error)]


# ---------------------------------------------------------------------------
# Lattice operator assembly.
# ---------------------------------------------------------------------------

def _x_centers(nx: int, dx: float) -> np.ndarray:
    half = 0.5 * nx * dx
    return -half + (np.arange(nx) + 0.5) * dx


def _support_radius(u0: FiniteMeasure) -> float:
    if math.isfinite(u0.support_radius):
        return u0.support_radius
    return max((abs(y) for y, _ in u0.atoms), default=0.0)


def _check_truncation(model, u0, t_end, half_width, spec) -> float:
    k = _support_radius(u0)
    if half_width <= k:
        raise TruncationTooSmall(
            f"lattice half-width {half_width:g} does not cover the initial "
            f"support radius {k:g}")
    frac = exterior_mass(model, t_end, half_width - k, spec)
    if frac > TRUNCATION_TOL:
        raise TruncationTooSmall(
            f"kernel mass {frac:.3e} outside the lattice at t={t_end:g} "
            f"exceeds {TRUNCATION_TOL:g}; widen the window")
    return frac


def _det_rows(model, u0, times, x_nodes, spec) -> np.ndarray:
    """(p_t * u0)(x) rows, clamped at 0 against quadrature dust.

    Per-time quadrature rules, so a row's value never depends on which
    other rows were requested alongside it; evolve needs that for
    bit-exact restarts.  Statistical paths use _det_rows_shared instead.
    """
    rows = np.empty((len(times), x_nodes.size))
    for i, t in enumerate(times):
        rows[i] = np.maximum(heat_convolve_many(model, u0, t, x_nodes, spec),
                             0.0)
    return rows


def _det_rows_shared(model, u0, times, x_nodes, spec) -> np.ndarray:
    """Batched variant of _det_rows; one xi rule shared across the rows."""
    return np.maximum(heat_convolve_rows(model, u0, times, x_nodes, spec),
                      0.0)


def _propagators(model, dt, dx, nx):
    """One-step matrices: P for the field, K0 for the fresh noise shot.

    P[a, b] = dx * p_dt((a-b) dx) band-limited; K0[a, b] is the
    cell-averaged lag-0 row, i.e. the within-step weight
    (1/dt) int_0^dt p_r((a-b) dx) dr, band-limited.  Both are symmetric
    Toeplitz, and band-limiting makes P an exact lattice semigroup.
    """
    rows = bandlimited_rows(model, dx, nx, [0.0, dt], dt_average=None)
    avg0 = bandlimited_rows(model, dx, nx, [0.0], dt_average=dt)[0]
    p = dx * toeplitz(rows[1])
    k0 = toeplitz(avg0)
    return p, k0


def _scheme_drift(det, p) -> float:
    """Sup deviation between propagated and exact deterministic rows.

    det holds exact rows 1..m; the return value is the worst
    || det_1 P^{i-1} - det_i ||_inf, the sigma = 0 scheme error that
    calibrates eps_num.  A roundoff floor keeps the yardstick positive.
    """
    worst = 0.0
    d = det[0].copy()
    for i in range(1, det.shape[0]):
        d = d @ p
        worst = max(worst, float(np.abs(d - det[i]).max()))
    floor = 32.0 * np.finfo(float).eps * float(det.max(initial=0.0))
    return max(worst, floor)


def _steps_for(t_span: float, dt: float) -> int:
    m = int(round(t_span / dt))
    if m < 1 or abs(m * dt - t_span) > 1e-9 * max(dt, abs(t_span)):
        raise ValueError(
            f"time span {t_span:g} is not a positive multiple of dt={dt:g}")
    return m


# ---------------------------------------------------------------------------
# Time stepping.
# ---------------------------------------------------------------------------

def evolve(model: KernelModel, u0: FiniteMeasure, sigma: SigmaSpec,
           noise: NoiseLattice, t_end: float, *,
           from_field: FieldLattice | None = None,
           spec: QuadratureSpec = DEFAULT_SPEC,
           max_cells: int = MAX_CELLS) -> FieldLattice:
    """March the mild recursion to t_end on the noise lattice.

    Fresh runs start from the measure u0: row 1 is deterministic and noise
    rows 1..m-1 drive the later steps (row 0 stays idle).  Passing
    from_field continues a previous timestep run; the caller supplies the
    same model/u0/sigma and the noise shifted to the restart step
    (shift_noise), and the continuation consumes shifted rows from 0.
    Restart-equivalence then holds bit-exactly.
    """
    dt, dx, nx = noise.dt, noise.dx, noise.nx
    x_nodes = _x_centers(nx, dx)
    half = 0.5 * nx * dx

    if from_field is None:
        t_start = 0.0
        v = np.zeros(nx)
    else:
        if from_field.scheme != "timestep" or from_field.noise_part is None:
            raise ValueError("can only continue a timestep field that "
                             "carries its noise part")
        g = from_field.grid
        if not (np.allclose(g.x_nodes, x_nodes)
                and math.isclose(from_field.dt, dt, rel_tol=1e-12)):
            raise GridMismatch("continuation lattice must match the field")
        t_start = float(g.t_nodes[-1])
        v = from_field.noise_part[-1].copy()

    m = _steps_for(t_end - t_start, dt)
    if m > noise.nt:
        raise ValueError(f"noise lattice has {noise.nt} rows, need {m}")
    if 3 * (m + 1) * nx > max_cells:
        raise AllocationLimit(
            f"field of {m} x {nx} cells exceeds the allocation budget")

    if p0_eval(model, dt, spec) * dx > 0.5:
        warnings.warn(
            "refinement relation violated: p_dt(0) dx > 0.5; one-step "
            "variance amplification is no longer controlled", stacklevel=2)
    ext = _check_truncation(model, u0, t_end, half, spec)

    # rebuild times as global step multiples: t_start + dt*j rounds
    # differently from dt*(j0+j) at some steps, and a restart must
    # reproduce the fresh run's deterministic rows bit for bit
    j0 = int(round(t_start / dt))
    if abs(j0 * dt - t_start) <= 1e-9 * max(dt, abs(t_start)):
        times = dt * np.arange(j0, j0 + m + 1)
    else:
        times = t_start + dt * np.arange(0, m + 1)
    det = _det_rows(model, u0, times[1:], x_nodes, spec)  # rows at steps 1..m
    p, k0 = _propagators(model, dt, dx, nx)
    eps_num = 10.0 * _scheme_drift(det, p)

    w = noise.increments
    vals = np.empty((m, nx))
    vpart = np.empty((m, nx))
    if from_field is None:
        # first step deterministic; sigma(u0) is not defined for a measure
        vals[0] = det[0]
        vpart[0] = v
        u_prev = vals[0]
        row0 = 1  # global step index of the first consumed noise row
        start = 1
    else:
        u_prev = from_field.grid.values[-1]
        row0 = 0
        start = 0

    for j in range(start, m):
        shot = sigma.apply(u_prev) * w[row0 + j - start]
        v = v @ p + shot @ k0
        vpart[j] = v
        vals[j] = det[j] + v
        u_prev = vals[j]

    grid = SpaceTimeGrid(times[1:], x_nodes, vals)
    return FieldLattice(grid=grid, scheme="timestep", seed=noise.seed,
                        truncation_L=half, dt=dt, noise_part=vpart,
                        eps_num=eps_num, exterior_mass_frac=ext)


# ---------------------------------------------------------------------------
# Picard iteration.
# ---------------------------------------------------------------------------

def _circulant_spectra(rows: np.ndarray, m_fft: int) -> np.ndarray:
    """rfft of the circulant embedding of symmetric Toeplitz rows."""
    n_rows, nx = rows.shape
    cols = np.zeros((n_rows, m_fft))
    cols[:, :nx] = rows
    cols[:, m_fft - nx + 1:] = rows[:, 1:][:, ::-1]
    return rfft(cols, axis=1)


def _toeplitz_apply_many(spectra_sum: np.ndarray, m_fft: int,
                         nx: int) -> np.ndarray:
    return irfft(spectra_sum, n=m_fft)[..., :nx]


_FRAKT_CACHE: dict[tuple, float] = {}


def _cached_frak_T(model: KernelModel, k: float, lip: float,
                   spec: QuadratureSpec) -> float:
    if model.kind == "tabulated":
        return frak_T(model, k, lip, spec=spec)
    key = (model.kind, model.kappa, model.alpha, round(k, 12), round(lip, 12))
    if key not in _FRAKT_CACHE:
        _FRAKT_CACHE[key] = frak_T(model, k, lip, spec=spec)
    return _FRAKT_CACHE[key]


def picard_iterate(model: KernelModel, u0: FiniteMeasure, sigma: SigmaSpec,
                   noise: NoiseLattice, n: int, *, k: float = 2.0,
                   spec: QuadratureSpec = DEFAULT_SPEC,
                   max_cells: int = MAX_CELLS) -> FieldLattice:
    """n-th Picard stage on the frozen noise realization.

    Stage 0 is identically zero; stage n+1 puts the exact deterministic row
    plus the stochastic convolution of sigma(stage n) with cell-averaged
    band-limited kernel weights.  The lattice horizon nt*dt must stay
    within the order-k moment horizon frak_T_k.  Because the system is
    causal, n >= nt reproduces the timestep fixed point (up to roundoff
    and edge truncation).
    """
    if n < 0:
        raise ValueError("Picard stage must be >= 0")
    dt, dx, nx, nt = noise.dt, noise.dx, noise.nx, noise.nt
    horizon = nt * dt
    t_max = _cached_frak_T(model, k, sigma.lip, spec)
    if horizon > t_max * (1 + 1e-9):
        raise HorizonExceeded(
            f"lattice horizon {horizon:g} exceeds the order-{k:g} moment "
            f"horizon {t_max:g}")
    if 4 * (nt + 1) * nx > max_cells:
        raise AllocationLimit("Picard stage exceeds the allocation budget")

    x_nodes = _x_centers(nx, dx)
    half = 0.5 * nx * dx
    ext = _check_truncation(model, u0, horizon, half, spec)
    times = dt * np.arange(1, nt + 1)

    if n == 0:
        grid = SpaceTimeGrid(times, x_nodes, np.zeros((nt, nx)))
        return FieldLattice(grid=grid, scheme="picard", seed=noise.seed,
                            truncation_L=half, dt=dt, picard_order=0,
                            exterior_mass_frac=ext)

    det = _det_rows_shared(model, u0, times, x_nodes, spec)
    cur = np.zeros((nt, nx))
    if nt == 1:
        cur = det.copy()
    else:
        m_fft = next_fast_len(2 * nx)
        srows = bandlimited_rows(model, dx, nx, dt * np.arange(nt - 1),
                                 dt_average=dt)
        shat = _circulant_spectra(srows, m_fft)
        w = noise.increments
        for _ in range(n):
            shots = sigma.apply(cur[:nt - 1]) * w[1:nt]
            pad = np.zeros((nt - 1, m_fft))
            pad[:, :nx] = shots
            ghat = rfft(pad, axis=1)
            nxt = det.copy()
            for m in range(2, nt + 1):
                acc = np.sum(ghat[:m - 1] * shat[m - 2::-1], axis=0)
                nxt[m - 1] += _toeplitz_apply_many(acc, m_fft, nx)
            cur = nxt

    grid = SpaceTimeGrid(times, x_nodes, cur)
    return FieldLattice(grid=grid, scheme="picard", seed=noise.seed,
                        truncation_L=half, dt=dt, picard_order=n,
                        exterior_mass_frac=ext)


# ---------------------------------------------------------------------------
# Deterministic second-moment oracle for linear sigma.
# ---------------------------------------------------------------------------

def _oracle_lattice(model, u0, lam, t_nodes, x_nodes, spec) -> np.ndarray:
    """Exact second-moment recursion of the timestep scheme.

    For sigma(x) = lam x the independence of the noise cells makes
    E u_m(x)^2 = det_m(x)^2
               + lam^2 dt dx sum_{i<m} sum_y S_{m-1-i}(x-y)^2 E u_i(y)^2
    an identity (cross terms carry a zero-mean independent factor), so this
    march reproduces the scheme's second moment to roundoff.
    """
    nt, nx = t_nodes.size, x_nodes.size
    dt = float(t_nodes[0])
    dx = float(x_nodes[1] - x_nodes[0]) if nx > 1 else 1.0
    det = _det_rows_shared(model, u0, t_nodes, x_nodes, spec)
    f = det ** 2
    if nt == 1 or lam == 0.0:
        return f
    m_fft = next_fast_len(2 * nx)
    srows = bandlimited_rows(model, dx, nx, dt * np.arange(nt - 1),
                             dt_average=dt)
    s2hat = _circulant_spectra(srows ** 2, m_fft)
    fhat = np.empty((nt, s2hat.shape[1]), dtype=complex)
    scale = lam * lam * dt * dx

    def _row_hat(row):
        pad = np.zeros(m_fft)
        pad[:nx] = row
        return rfft(pad)

    fhat[0] = _row_hat(f[0])
    for m in range(2, nt + 1):
        acc = np.sum(fhat[:m - 1] * s2hat[m - 2::-1], axis=0)
        f[m - 1] += scale * _toeplitz_apply_many(acc, m_fft, nx)
        fhat[m - 1] = _row_hat(f[m - 1])
    return f


def _interp_rows(t_nodes: np.ndarray, rows: np.ndarray, s: float,
                 limit: int) -> np.ndarray:
    """Linear-in-t interpolation of rows[:limit], clamped at both ends."""
    if s <= t_nodes[0] or limit == 1:
        return rows[0]
    top = min(limit - 1, t_nodes.size - 1)
    if s >= t_nodes[top]:
        return rows[top]
    j = int(np.searchsorted(t_nodes[:top + 1], s)) - 1
    c = (s - t_nodes[j]) / (t_nodes[j + 1] - t_nodes[j])
    return (1.0 - c) * rows[j] + c * rows[j + 1]


def _oracle_continuum(model, u0, lam, t_targets, x_out, spec,
                      n_theta_half=48, n_table=88) -> np.ndarray:
    """Volterra march for f = det^2 + lam^2 (p^2 (*) f) on a graded mesh.

    The first interaction term lam^2 (p^2 (*) det^2) carries the whole
    initial-data singularity and is integrated by st_convolve with its
    sub-lattice spike handling; the remainder h = lam^2 (p^2 (*) (S1 + h))
    is tamer and is marched causally, clamping the not-yet-computed sliver
    of the current step (graded mesh keeps that sliver's kernel mass
    small).
    """
    t_targets = np.asarray(t_targets, dtype=float)
    x_out = np.asarray(x_out, dtype=float)
    t_max = float(t_targets[-1])
    t_min = float(t_targets[0])

    if model.kind == "stable":
        alpha = model.alpha
    else:
        alpha = 2.0
    scale = (model.kappa * t_max) ** (1.0 / alpha)
    # tail buffer: 24 diffusion lengths, with a wide floor for heavy tails
    # that relaxes when the horizon itself is tiny
    halfw = float(np.abs(x_out).max()) + _support_radius(u0) \
        + max(min(10.0, 100.0 * scale), 24.0 * scale)
    dx_cap = (model.kappa * t_min / 4.0) ** (1.0 / alpha) / 3.0
    nx_i = 2 * max(512, int(math.ceil(halfw / dx_cap))) + 1
    x_int = np.linspace(-halfw, halfw, nx_i)
    dx = float(x_int[1] - x_int[0])

    tbl = graded_times(t_max, n=n_table, include=t_targets)
    kern = kernel_squared_grid(model, tbl, x_int, spec)
    seed = smoothed_squared_grid(model, u0, tbl, x_int, spec)
    s1 = lam * lam * st_convolve(kern, seed, n_theta_half).values

    theta, wq = _theta_rule(n_theta_half)
    sin2 = np.sin(theta) ** 2
    ds_w = wq * np.sin(2.0 * theta)
    h = np.zeros_like(s1)
    if lam != 0.0:
        lam2 = lam * lam
        for i, t in enumerate(tbl):
            acc = np.zeros(nx_i)
            limit = max(i, 1)
            for s_frac, wgt in zip(sin2, ds_w):
                s = t * s_frac
                row_k = kern.row_at(t - s)
                row_g = _interp_rows(tbl, s1, s, tbl.size) \
                    + _interp_rows(tbl, h, s, limit)
                acc += wgt * fftconvolve(row_k, row_g, mode="same")
            h[i] = np.maximum(acc * (t * dx) * lam2, 0.0)

    out = np.empty((t_targets.size, x_out.size))
    for j, t in enumerate(t_targets):
        i = int(np.argmin(np.abs(tbl - t)))
        det = heat_convolve_many(model, u0, t, x_out, spec)
        out[j] = det ** 2 + np.interp(x_out, x_int, s1[i] + h[i])
    return out


def pam_second_moment_oracle(model: KernelModel, u0: FiniteMeasure,
                             lam: float, t_grid, x_grid, *,
                             mode: str = "continuum",
                             spec: QuadratureSpec = DEFAULT_SPEC
                             ) -> SpaceTimeGrid:
    """Deterministic fixed point of f = |p_t*u0|^2 + lam^2 (p^2 (*) f).

    For linear sigma this is the exact second moment, computed with no
    noise machinery at all, which is what makes it a useful check against
    the Monte Carlo paths.  mode "continuum" marches the integral equation
    on an internal graded mesh; mode "lattice" reproduces the timestep
    scheme's own second moment on the given uniform grid (t_grid must then
    be dt*{1..n}).
    """
    t_nodes = np.asarray(t_grid, dtype=float)
    x_nodes = np.asarray(x_grid, dtype=float)
    if t_nodes.ndim != 1 or t_nodes.size == 0 or np.any(t_nodes <= 0) \
            or np.any(np.diff(t_nodes) <= 0):
        raise GridMismatch("t_grid must be increasing positive times")
    if x_nodes.ndim != 1 or x_nodes.size < 2 \
            or not np.allclose(np.diff(x_nodes), x_nodes[1] - x_nodes[0],
                               rtol=1e-9, atol=0.0):
        raise GridMismatch("x_grid must be uniform")
    if mode == "lattice":
        dt = float(t_nodes[0])
        if not np.allclose(t_nodes, dt * np.arange(1, t_nodes.size + 1),
                           rtol=1e-9, atol=0.0):
            raise GridMismatch("lattice mode needs t_grid = dt * {1..n}")
        vals = _oracle_lattice(model, u0, lam, t_nodes, x_nodes, spec)
    elif mode == "continuum":
        vals = _oracle_continuum(model, u0, lam, t_nodes, x_nodes, spec)
    else:
        raise ValueError(f"unknown oracle mode {mode!r}")
    return SpaceTimeGrid(t_nodes, x_nodes, vals)


def _flat_second_moment(model: KernelModel, lam: float, t_values,
                        spec: QuadratureSpec = DEFAULT_SPEC,
                        n_theta_half: int = 64) -> np.ndarray:
    """f(t) = 1 + lam^2 int_0^t p_{2(t-s)}(0) f(s) ds for flat data u0 = 1.

    Space drops out by translation invariance, leaving a scalar Volterra
    equation; marched on a graded mesh with the theta substitution.  Used
    as an independent check of the moment quadratures against the
    Laplace-transform closed form.
    """
    t_values = np.asarray(t_values, dtype=float)
    tbl = graded_times(float(t_values[-1]), n=160, include=t_values)
    theta, wq = _theta_rule(n_theta_half)
    sin2 = np.sin(theta) ** 2
    ds_w = wq * np.sin(2.0 * theta)
    lam2 = lam * lam
    f = np.ones(tbl.size)
    for i, t in enumerate(tbl):
        if i == 0:
            f[i] = 1.0 + lam2 * p0_eval(model, 2.0 * t, spec) * t
            continue
        acc = 0.0
        for s_frac, wgt in zip(sin2, ds_w):
            s = t * s_frac
            fs = float(np.interp(s, tbl[:i + 1],
                                 np.concatenate([f[:i], [f[i - 1]]])))
            acc += wgt * p0_eval(model, 2.0 * (t - s), spec) * fs
        f[i] = 1.0 + lam2 * t * acc
    return np.interp(t_values, tbl, f)


# ---------------------------------------------------------------------------
# Monte Carlo ensembles.
# ---------------------------------------------------------------------------

def _worker_count(requested: int | None) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("LEVYHEAT_THREADS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def _thread_map(fn, chunks, threads):
    if threads <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        futures = [ex.submit(fn, c) for c in chunks]
        return [f.result() for f in futures]  # chunk order, not finish order


def _seed_chunks(seeds, batch):
    seeds = list(seeds)
    return [seeds[i:i + batch] for i in range(0, len(seeds), batch)]


def _probe_indices(values, step, name):
    out = []
    for v in np.atleast_1d(np.asarray(values, dtype=float)):
        i = int(round(v / step))
        if i < 1 or abs(i * step - v) > 1e-9 * max(step, abs(v)):
            raise ValueError(f"{name} {v:g} is not a positive multiple "
                             f"of {step:g}")
        out.append(i)
    return out


def mc_moments(model: KernelModel, u0: FiniteMeasure, sigma: SigmaSpec, *,
               dt: float, nx: int, half_width: float, t_end: float,
               n_seeds: int | None = None, t_probes, x_probes, ks=(1, 2),
               seed0: int = 0, seed_list=None, batch: int = 24,
               threads: int | None = None,
               spec: QuadratureSpec = DEFAULT_SPEC,
               max_cells: int = MAX_CELLS) -> MomentTable:
    """Ensemble moment estimates at probe points, with theory columns.

    Marches independent timestep paths, one per seed (contiguous
    seed0..seed0+n_seeds-1, or exactly the ints in seed_list), and
    accumulates power sums of |u| at every (t_probe, x_probe, k).
    x probes snap to the nearest cell center and the snapped coordinate is
    what lands in the table.  Replicas run in parallel over seed chunks;
    the reduction is in fixed chunk order, so results do not depend on
    the thread count.
    """
    if (n_seeds is None) == (seed_list is None):
        raise ValueError("give exactly one of n_seeds or seed_list")
    seeds = (list(range(seed0, seed0 + n_seeds)) if seed_list is None
             else [int(s) for s in seed_list])
    if not seeds:
        raise ValueError("need at least one seed")
    dx = 2.0 * half_width / nx
    steps = _steps_for(t_end, dt)
    x_nodes = _x_centers(nx, dx)
    t_idx = _probe_indices(t_probes, dt, "t probe")
    if max(t_idx) > steps:
        raise ValueError("t probe beyond t_end")
    cols = [int(np.argmin(np.abs(x_nodes - xp)))
            for xp in np.atleast_1d(np.asarray(x_probes, dtype=float))]
    ks = [float(kv) for kv in np.atleast_1d(ks)]
    if any(kv < 1 for kv in ks):
        raise ValueError("moment orders must be >= 1")
    if batch * steps * nx > max_cells:
        raise AllocationLimit("seed chunk exceeds the allocation budget")

    if p0_eval(model, dt, spec) * dx > 0.5:
        warnings.warn("refinement relation violated: p_dt(0) dx > 0.5",
                      stacklevel=2)
    _check_truncation(model, u0, t_end, half_width, spec)

    times = dt * np.arange(1, steps + 1)
    det = _det_rows_shared(model, u0, times, x_nodes, spec)
    p, k0 = _propagators(model, dt, dx, nx)
    probe_at = {i: slot for slot, i in enumerate(t_idx)}
    n_pt, n_px, n_k = len(t_idx), len(cols), len(ks)

    def run_chunk(seed_list):
        b = len(seed_list)
        w = np.empty((b, steps, nx))
        for i, s in enumerate(seed_list):
            w[i] = sample_noise(dt, dx, steps, nx, s,
                                max_cells=max_cells).increments
        s1 = np.zeros((n_pt, n_px, n_k))
        s2 = np.zeros((n_pt, n_px, n_k))
        v = np.zeros((b, nx))
        u = np.broadcast_to(det[0], (b, nx)).copy()

        def collect(step_i, u_now):
            slot = probe_at.get(step_i)
            if slot is None:
                return
            vals = u_now[:, cols]
            for kpos, kv in enumerate(ks):
                a = vals if kv == 1 else np.abs(vals) ** kv
                s1[slot, :, kpos] += a.sum(axis=0)
                s2[slot, :, kpos] += (a * a).sum(axis=0)

        collect(1, u)
        for j in range(1, steps):
            shot = sigma.apply(u) * w[:, j, :]
            v = v @ p + shot @ k0
            u = det[j] + v
            collect(j + 1, u)
        return s1, s2

    threads = _worker_count(threads)
    chunks = _seed_chunks(seeds, batch)
    parts = _thread_map(run_chunk, chunks, threads)
    s1 = np.sum(np.stack([p1 for p1, _ in parts]), axis=0)
    s2 = np.sum(np.stack([p2 for _, p2 in parts]), axis=0)

    n = float(len(seeds))
    m1 = s1 / n
    var = np.maximum(s2 / n - m1 * m1, 0.0) * (n / max(n - 1.0, 1.0))
    se_raw = np.sqrt(var / n)

    gam = {}
    for kv in ks:
        if sigma.lip == 0.0:
            gam[kv] = 0.0
        else:
            gam[kv] = gamma_k(model, max(kv, 2.0), sigma.lip, spec)

    mass = u0.total_mass
    rows_t, rows_x, rows_k = [], [], []
    est, se, b_eu, b_h1, rawm, rawse = [], [], [], [], [], []
    for slot, i in enumerate(t_idx):
        t = i * dt
        pt0 = p0_eval(model, t, spec)
        ptu = heat_convolve_many(model, u0, t, x_nodes[cols], spec)
        for cpos in range(n_px):
            shape = pt0 * max(float(ptu[cpos]), 0.0)
            for kpos, kv in enumerate(ks):
                kk = max(kv, 2.0)
                m = m1[slot, cpos, kpos]
                r = se_raw[slot, cpos, kpos]
                if kv == 1:
                    e, de = m, r
                elif m > 0:
                    e = m ** (1.0 / kv)
                    de = r * e / (kv * m)
                else:
                    e, de = 0.0, 0.0
                rows_t.append(t)
                rows_x.append(float(x_nodes[cols[cpos]]))
                rows_k.append(kv)
                est.append(e)
                se.append(de)
                b_eu.append(math.exp((1.0 + EPS_GROWTH) * gam[kv] * t / kk)
                            * math.sqrt(1.0 + shape))
                b_h1.append(4.0 * math.sqrt(kk) * max(1.0, sigma.lip)
                            * math.sqrt(mass * shape))
                rawm.append(m)
                rawse.append(r)

    return MomentTable(
        t=np.array(rows_t), x=np.array(rows_x), k=np.array(rows_k),
        estimate=np.array(est), std_error=np.array(se),
        bound_exist_unique=np.array(b_eu), bound_h1=np.array(b_h1),
        raw_moment=np.array(rawm), raw_std_error=np.array(rawse),
        replicas=len(seeds))


# ---------------------------------------------------------------------------
# Mollified-initial-data comparison.
# ---------------------------------------------------------------------------

def stability_bound(model: KernelModel, mass: float, eps: float, beta: float,
                    spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """Ceiling for the Laplace-weighted L^2 distance to the eps-start:

        (mass^2 / pi) int_R (1 - e^{-eps psi})^2 / (beta + 2 psi) dxi.

    Evaluated as 2/pi times the half-line integral; past the cutoff the
    numerator is 1 to machine precision and the exact resolvent tail is
    used.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if eps == 0.0:
        return 0.0
    if not beta > 0:
        raise ValueError("beta must be positive")
    if model.kind == "brownian":
        cutoff = math.sqrt(max(40.0 / eps, 1600.0 * (1.0 + beta))
                           / model.kappa)
    elif model.kind == "stable":
        cutoff = (max(40.0 / eps, 40.0 * (1.0 + beta))
                  / model.kappa) ** (1.0 / model.alpha)
    else:
        cutoff = float(model.xi_table[-1])
        if eps * psi_eval(model, cutoff) < 40.0:
            raise QuadratureUnderresolved(
                "tabulated exponent table too short for the stability bound")
    nodes, weights = _xi_rule(cutoff, 0.0, spec)
    ps = psi_eval(model, nodes)
    core = weights @ (np.expm1(-eps * ps) ** 2 / (beta + 2.0 * ps))
    total = core + _upsilon_tail(model, beta, cutoff)
    return 2.0 * mass * mass * total / math.pi


def _deterministic_distance_time(model: KernelModel, mass: float, eps: float,
                                 beta: float,
                                 spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """sigma = 0 distance for a point mass, via time-domain quadrature.

    || p_t*u0 - p_{t+eps}*u0 ||_2^2 = mass^2 (p_{2t}(0) + p_{2t+2eps}(0)
    - 2 p_{2t+eps}(0)), integrated against e^{-beta t} with t = tau^2 to
    absorb the square-root singularity.  For sigma = 0 the Plancherel
    evaluation of the same distance is exactly stability_bound / 2, which
    is the cross-check the tests run.
    """
    tau_max = math.sqrt(45.0 / beta)
    from .levy_kernel import _gauss_rule
    z, w = _gauss_rule(64)
    total = 0.0
    n_panel = 24
    edges = np.linspace(0.0, tau_max, n_panel + 1)
    for a, b in zip(edges[:-1], edges[1:]):
        tau = 0.5 * (b - a) * z + 0.5 * (a + b)
        wt = 0.5 * (b - a) * w
        for ta, wa in zip(tau, wt):
            t = ta * ta
            val = (p0_eval(model, 2.0 * t, spec)
                   + p0_eval(model, 2.0 * t + 2.0 * eps, spec)
                   - 2.0 * p0_eval(model, 2.0 * t + eps, spec))
            total += wa * 2.0 * ta * math.exp(-beta * t) * val
    return mass * mass * total


def stability_compare(model: KernelModel, u0: FiniteMeasure,
                      sigma: SigmaSpec, eps_list, beta: float, seeds, *,
                      t_max: float = 6.0, dt: float = 0.01, nx: int = 320,
                      half_width: float = 20.0, batch: int = 24,
                      threads: int | None = None,
                      spec: QuadratureSpec = DEFAULT_SPEC,
                      max_cells: int = MAX_CELLS) -> list[StabilityRow]:
    """Distance between the solution and its mollified-start version.

    For each eps, runs the pair (u from u0, U from p_eps * u0) coupled on
    the same noise per seed, and estimates

        int_0^T e^{-beta t} dt int dx E |u_t(x) - U_t(x)|^2

    by a Riemann sum over the lattice (right rule in t, so the truncated
    estimate stays below the untruncated integral for a decaying
    integrand).  The mollified start only changes the deterministic rows:
    p_t * (p_eps * u0) = p_{t+eps} * u0 by the semigroup property.  beta
    must satisfy upsilon(beta) <= 1/(2 lip^2) or the comparison bound does
    not close.  Returns one row per eps with the Monte Carlo distance, its
    standard error, the quadrature value of the xi-integral ceiling, and a
    crude e^{-beta T} tail proxy from the final lattice row.
    """
    if sigma.lip > 0.0:
        ups = upsilon_eval(model, beta, spec)
        if ups > 1.0 / (2.0 * sigma.lip ** 2):
            raise ValueError(
                f"beta={beta:g} is not admissible: upsilon(beta)={ups:g} "
                f"exceeds 1/(2 lip^2)={1.0 / (2.0 * sigma.lip ** 2):g}")
    eps_arr = [float(e) for e in np.atleast_1d(eps_list)]
    if any(e < 0 for e in eps_arr):
        raise ValueError("eps values must be nonnegative")
    if isinstance(seeds, (int, np.integer)):
        seed_list = list(range(int(seeds)))
    else:
        seed_list = [int(s) for s in seeds]

    dx = 2.0 * half_width / nx
    steps = _steps_for(t_max, dt)
    x_nodes = _x_centers(nx, dx)
    _check_truncation(model, u0, t_max, half_width, spec)
    if batch * steps * nx > max_cells:
        raise AllocationLimit("seed chunk exceeds the allocation budget")

    times = dt * np.arange(1, steps + 1)
    det_u = _det_rows_shared(model, u0, times, x_nodes, spec)
    p, k0 = _propagators(model, dt, dx, nx)
    decay = np.exp(-beta * times)
    threads = _worker_count(threads)
    mass = u0.total_mass

    out = []
    for eps in eps_arr:
        det_e = _det_rows_shared(model, u0, times + eps, x_nodes, spec)

        def run_chunk(chunk, det_e=det_e):
            b = len(chunk)
            w = np.empty((b, steps, nx))
            for i, s in enumerate(chunk):
                w[i] = sample_noise(dt, dx, steps, nx, s,
                                    max_cells=max_cells).increments
            vu = np.zeros((b, nx))
            ve = np.zeros((b, nx))
            uu = np.broadcast_to(det_u[0], (b, nx)).copy()
            ue = np.broadcast_to(det_e[0], (b, nx)).copy()
            dist = decay[0] * ((uu - ue) ** 2).sum(axis=1)
            for j in range(1, steps):
                wj = w[:, j, :]
                vu = vu @ p + (sigma.apply(uu) * wj) @ k0
                ve = ve @ p + (sigma.apply(ue) * wj) @ k0
                uu = det_u[j] + vu
                ue = det_e[j] + ve
                dist += decay[j] * ((uu - ue) ** 2).sum(axis=1)
            last = ((uu - ue) ** 2).sum(axis=1)
            return dist * dt * dx, last * dx

        parts = _thread_map(run_chunk, _seed_chunks(seed_list, batch),
                            threads)
        dists = np.concatenate([d for d, _ in parts])
        lasts = np.concatenate([l for _, l in parts])
        n = dists.size
        mean = float(dists.mean())
        se = float(dists.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        tail = math.exp(-beta * t_max) * float(lasts.mean()) / beta
        out.append(StabilityRow(eps=eps, distance=mean, std_error=se,
                                bound=stability_bound(model, mass, eps, beta,
                                                      spec),
                                tail_bound=tail))
    return out


# ---------------------------------------------------------------------------
# Positivity.
# ---------------------------------------------------------------------------

def positivity_scan(fld: FieldLattice, *,
                    eps_num: float | None = None) -> tuple[float, int]:
    """Lattice minimum and count of cells below -eps_num.

    The continuum solution is nonnegative; the discrete scheme can dip
    slightly negative, so violations are counted against the scheme-error
    yardstick eps_num (ten times the measured sigma = 0 drift, stored on
    timestep fields).  Pass eps_num explicitly for Picard fields.
    """
    tol = eps_num if eps_num is not None else fld.eps_num
    if tol is None:
        raise ValueError("field carries no scheme error estimate; "
                         "pass eps_num explicitly")
    vals = fld.grid.values
    return float(vals.min()), int(np.count_nonzero(vals < -tol))
