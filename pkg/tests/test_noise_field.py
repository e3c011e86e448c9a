import numpy as np
import pytest

from levyheat import AllocationLimit, OffsetOutOfRange
from levyheat.noise_field import (
    NoiseLattice,
    dump_noise,
    iter_noise_rows,
    load_noise,
    noise_row,
    sample_noise,
    shift_noise,
)

N_REPS = 10_000


@pytest.fixture(scope="module")
def replicas():
    """(N_REPS, 20, 16) block of small lattices, one per seed."""
    nt, nx, dt, dx = 20, 16, 0.05, 0.25
    reps = np.empty((N_REPS, nt, nx))
    for s in range(N_REPS):
        reps[s] = sample_noise(dt, dx, nt, nx, seed=s).increments
    return reps


class TestDeterminism:
    def test_same_seed_identical(self):
        a = sample_noise(0.1, 0.2, 8, 5, seed=42)
        b = sample_noise(0.1, 0.2, 8, 5, seed=42)
        assert np.array_equal(a.increments, b.increments)

    def test_different_seed_differs(self):
        a = sample_noise(0.1, 0.2, 8, 5, seed=42)
        b = sample_noise(0.1, 0.2, 8, 5, seed=43)
        assert not np.array_equal(a.increments, b.increments)

    def test_streaming_matches_matrix(self):
        full = sample_noise(0.1, 0.2, 7, 13, seed=99).increments
        for i, row in enumerate(iter_noise_rows(0.1, 0.2, 7, 13, seed=99)):
            assert np.array_equal(row, full[i])
        assert np.array_equal(noise_row(0.1, 0.2, 13, 99, 3), full[3])

    def test_longer_run_shares_prefix(self):
        # counter addressing: extending nt must not disturb earlier rows
        short = sample_noise(0.1, 0.2, 7, 13, seed=99).increments
        long = sample_noise(0.1, 0.2, 9, 13, seed=99).increments
        assert np.array_equal(long[:7], short)


class TestStatistics:
    def test_cell_variance(self):
        # 1e6 cells; sample variance of iid normals has SE sigma^2 sqrt(2/N)
        lat = sample_noise(0.2, 0.05, 1000, 1000, seed=7)
        target = 0.2 * 0.05
        three_se = 3.0 * target * np.sqrt(2.0 / lat.increments.size)
        assert abs(lat.increments.var() - target) < three_se
        assert abs(lat.increments.mean()) < 3.0 * np.sqrt(target / lat.increments.size)

    def test_sheet_covariance(self, replicas):
        # dt=0.05, dx=0.25: W_1(1) spans 20 rows x 4 cols, W_0.5(2) 10 x 8;
        # the sheet covariance is min(1, 0.5) * min(1, 2) = 0.5
        a = replicas[:, :20, :4].sum(axis=(1, 2))
        b = replicas[:, :10, :8].sum(axis=(1, 2))
        prod = a * b
        se = prod.std(ddof=1) / np.sqrt(N_REPS)
        assert abs(prod.mean() - 0.5) < 3.0 * se

    @pytest.mark.parametrize("cell_a,cell_b", [
        ((0, 0), (3, 5)),
        ((0, 0), (17, 2)),
        ((3, 5), (17, 2)),
        ((19, 15), (0, 0)),
    ])
    def test_disjoint_cells_uncorrelated(self, replicas, cell_a, cell_b):
        r = np.corrcoef(replicas[:, cell_a[0], cell_a[1]],
                        replicas[:, cell_b[0], cell_b[1]])[0, 1]
        assert abs(r) < 4.0 / np.sqrt(N_REPS)

    def test_sign_structure(self, replicas):
        # regions on opposite sides of the origin carry independent mass
        left = replicas[:, :, :8].sum(axis=(1, 2))
        right = replicas[:, :, 8:].sum(axis=(1, 2))
        r = np.corrcoef(left, right)[0, 1]
        assert abs(r) < 4.0 / np.sqrt(N_REPS)


class TestShift:
    def test_zero_offset_identity(self):
        lat = sample_noise(0.1, 0.2, 6, 4, seed=5)
        sh = shift_noise(lat, 0)
        assert np.array_equal(sh.increments, lat.increments)
        assert sh.t0_cells == 0

    def test_suffix_rows(self):
        lat = sample_noise(0.1, 0.2, 6, 4, seed=5)
        sh = shift_noise(lat, 2)
        assert sh.nt == 4
        assert np.array_equal(sh.increments, lat.increments[2:])
        assert sh.t0_cells == 2

    def test_boundary_single_row(self):
        lat = sample_noise(0.1, 0.2, 6, 4, seed=5)
        sh = shift_noise(lat, 5)
        assert sh.nt == 1
        assert np.array_equal(sh.increments[0], lat.increments[5])

    def test_shifted_rows_regenerable(self):
        lat = sample_noise(0.1, 0.2, 7, 13, seed=99)
        sh = shift_noise(lat, 3)
        regen = noise_row(0.1, 0.2, 13, 99, 0, t0_cells=3)
        assert np.array_equal(sh.increments[0], regen)

    @pytest.mark.parametrize("offset", [-1, 6, 100])
    def test_offset_out_of_range(self, offset):
        lat = sample_noise(0.1, 0.2, 6, 4, seed=5)
        with pytest.raises(OffsetOutOfRange):
            shift_noise(lat, offset)


class TestLimitsAndIO:
    def test_allocation_limit(self):
        with pytest.raises(AllocationLimit):
            sample_noise(0.1, 0.2, 50, 50, seed=1, max_cells=100)

    def test_validation(self):
        with pytest.raises(ValueError):
            sample_noise(-0.1, 0.2, 4, 4, seed=1)
        with pytest.raises(ValueError):
            sample_noise(0.1, 0.2, 0, 4, seed=1)
        with pytest.raises(ValueError):
            NoiseLattice(0.1, 0.2, 2, 2, 1, np.zeros((3, 2)))

    def test_dump_round_trip(self, tmp_path):
        lat = sample_noise(0.25, 0.5, 9, 7, seed=1234)
        path = tmp_path / "noise.bin"
        dump_noise(lat, path)
        # header is 36 bytes, payload 9*7 doubles
        assert path.stat().st_size == 36 + 9 * 7 * 8
        back = load_noise(path)
        assert (back.dt, back.dx, back.nt, back.nx, back.seed) == \
            (0.25, 0.5, 9, 7, 1234)
        assert np.array_equal(back.increments, lat.increments)

    def test_dump_rejects_shifted(self, tmp_path):
        lat = shift_noise(sample_noise(0.1, 0.2, 6, 4, seed=5), 1)
        with pytest.raises(ValueError):
            dump_noise(lat, tmp_path / "x.bin")

    def test_load_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError):
            load_noise(path)

    def test_load_rejects_truncation(self, tmp_path):
        lat = sample_noise(0.25, 0.5, 9, 7, seed=1234)
        path = tmp_path / "noise.bin"
        dump_noise(lat, path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(ValueError):
            load_noise(path)
