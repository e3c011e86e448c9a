"""Seeded lattice realizations of space-time white noise.

Cell (i, j) holds the noise increment over [t_i, t_{i+1}) x [x_j, x_{j+1}),
an independent Normal(0, dt*dx) draw. Cells are addressed by a counter-based
generator keyed on the seed, so any row can be produced without generating
its predecessors: cell q = i*nx + j consumes raw word q of the keyed Philox
stream (each counter block carries four 64-bit words). This makes restart
suffixes, streaming generation, and the full matrix agree bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .errors import AllocationLimit, OffsetOutOfRange

MAX_CELLS = 1 << 26  # ~0.5 GiB of float64 increments

_HEADER = struct.Struct("<4sIIddQ")
_MAGIC = b"LHN1"


@dataclass(frozen=True)
class NoiseLattice:
    """Immutable (nt x nx) matrix of iid Normal(0, dt*dx) increments.

    t0_cells records how many leading rows were dropped by shift_noise;
    (seed, shape, t0_cells) fully determines the increments.
    """

    dt: float
    dx: float
    nt: int
    nx: int
    seed: int
    increments: np.ndarray = field(repr=False)
    t0_cells: int = 0

    def __post_init__(self):
        if self.dt <= 0 or self.dx <= 0:
            raise ValueError("dt and dx must be positive")
        if self.nt < 1 or self.nx < 1:
            raise ValueError("nt and nx must be at least 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in 64 bits")
        inc = np.asarray(self.increments, dtype=float)
        if inc.shape != (self.nt, self.nx):
            raise ValueError("increments must have shape (nt, nx)")
        object.__setattr__(self, "increments", inc)


def _raw_to_normal(raw: np.ndarray, scale: float) -> np.ndarray:
    # top 53 bits -> uniform on (0,1), then the normal quantile
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    return ndtri(u) * scale


def _check_budget(n_cells: int, max_cells: int):
    if n_cells > max_cells:
        raise AllocationLimit(
            f"{n_cells} noise cells exceed the budget of {max_cells}; "
            "use the streaming row generator instead")


def sample_noise(dt: float, dx: float, nt: int, nx: int, seed: int,
                 max_cells: int = MAX_CELLS) -> NoiseLattice:
    """Full noise lattice; deterministic in (seed, shape)."""
    if dt <= 0 or dx <= 0:
        raise ValueError("dt and dx must be positive")
    if nt < 1 or nx < 1:
        raise ValueError("nt and nx must be at least 1")
    _check_budget(nt * nx, max_cells)
    bg = np.random.Philox(key=seed)
    raw = bg.random_raw(nt * nx).reshape(nt, nx)
    inc = _raw_to_normal(raw, float(np.sqrt(dt * dx)))
    return NoiseLattice(dt, dx, nt, nx, seed, inc)


def noise_row(dt: float, dx: float, nx: int, seed: int, i: int,
              t0_cells: int = 0) -> np.ndarray:
    """Row i of the lattice, generated standalone.

    Bit-exact with sample_noise(...).increments[i] because the keyed
    stream is addressed by absolute cell index.
    """
    q0 = (t0_cells + i) * nx
    pre = q0 % 4
    bg = np.random.Philox(key=seed)
    bg.advance(q0 // 4)
    raw = bg.random_raw(pre + nx)[pre:]
    return _raw_to_normal(raw, float(np.sqrt(dt * dx)))


def iter_noise_rows(dt: float, dx: float, nt: int, nx: int, seed: int,
                    start_row: int = 0, t0_cells: int = 0):
    """Generator of rows start_row..nt-1 with O(nx) memory."""
    for i in range(start_row, nt):
        yield noise_row(dt, dx, nx, seed, i, t0_cells)


def shift_noise(n: NoiseLattice, t_offset_cells: int) -> NoiseLattice:
    """Suffix lattice starting t_offset_cells rows in (restart harness)."""
    if not 0 <= t_offset_cells < n.nt:
        raise OffsetOutOfRange(
            f"offset {t_offset_cells} outside [0, {n.nt})")
    return NoiseLattice(n.dt, n.dx, n.nt - t_offset_cells, n.nx, n.seed,
                        n.increments[t_offset_cells:].copy(),
                        n.t0_cells + t_offset_cells)


def dump_noise(n: NoiseLattice, path):
    """Binary dump: header {magic, nt, nx, dt, dx, seed}, row-major float64.

    Only unshifted lattices round-trip (the header has no origin field).
    """
    if n.t0_cells != 0:
        raise ValueError("only unshifted lattices can be dumped")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, n.nt, n.nx, n.dt, n.dx, n.seed))
        fh.write(np.ascontiguousarray(n.increments, dtype="<f8").tobytes())


def load_noise(path) -> NoiseLattice:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise ValueError("truncated noise dump header")
        magic, nt, nx, dt, dx, seed = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise ValueError("not a noise dump (bad magic)")
        payload = fh.read(nt * nx * 8)
    if len(payload) != nt * nx * 8:
        raise ValueError("truncated noise dump payload")
    inc = np.frombuffer(payload, dtype="<f8").reshape(nt, nx).copy()
    return NoiseLattice(dt, dx, nt, nx, seed, inc)
