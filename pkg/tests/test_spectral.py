import numpy as np
import pytest

from sct.recon import Geometry, forward_project
from sct.spectral import (CountData, Disk, EnergyRangeError, MassAttenuationTable, PhantomSpec,
                          SpectrumBins, attenuation_at, build_attenuation_matrix_true,
                          line_integrals, load_attenuation_table, log_normalize, make_phantom,
                          sample_poisson, spectral_images, synthesize_counts)

GEOM = Geometry(n_angles=30, n_detectors=64, detector_spacing=1.0, shape=(32, 32), pixel_size=1.0)
BINS = SpectrumBins((20, 35, 50, 70), (35, 50, 70, 100), (30, 40, 60, 80), (1e4,) * 4)


def test_bundled_table():
    t = load_attenuation_table()
    for m in ("water", "aluminum", "iodine", "bone", "soft_tissue"):
        e, v = t.samples[m]
        assert e[0] == 20 and e[-1] == 140
        assert np.all(np.diff(e) == 10)
        assert np.all(v > 0)


def test_table_validation():
    with pytest.raises(ValueError):
        MassAttenuationTable({"x": ([20, 10], [1, 2])})
    with pytest.raises(ValueError):
        MassAttenuationTable({"x": ([10, 20], [1, -2])})


def test_attenuation_interp():
    t = MassAttenuationTable({"m": ([10.0, 40.0], [4.0, 1.0])})
    assert attenuation_at(t, "m", 10.0) == 4.0
    # geometric midpoint in energy gives the geometric mean of the values
    assert attenuation_at(t, "m", 20.0) == pytest.approx(2.0, rel=1e-12)
    v = attenuation_at(t, "m", 33.0)
    assert 1.0 < v < 4.0
    with pytest.raises(EnergyRangeError):
        attenuation_at(t, "m", 50.0)
    with pytest.raises(ValueError):
        attenuation_at(t, "bone", 20.0)


def test_bins_validation():
    with pytest.raises(ValueError):
        SpectrumBins((20,), (30,), (35,), (1.0,))
    with pytest.raises(ValueError):
        SpectrumBins((20, 25), (30, 40), (25, 30), (1.0, 1.0))
    with pytest.raises(ValueError):
        SpectrumBins((20,), (30,), (25,), (0.0,))


def test_empty_phantom():
    f, air = make_phantom(PhantomSpec((8, 8), 1.0, 2, []))
    assert not f.any()
    assert np.all(air == 1)


def test_water_disk_eq17():
    f, air = make_phantom(PhantomSpec((16, 16), 1.0, 1, [Disk((8, 8), 4, 0)]))
    np.testing.assert_array_equal(f.sum(axis=2) + air, 1.0)
    assert f[8, 8, 0] == 1 and f[0, 0, 0] == 0


def test_three_disk_membership():
    disks = [Disk((16, 16), 12, 0), Disk((16, 10), 3, 1), Disk((16, 22), 3, 2, 0.5, 0)]
    f, air = make_phantom(PhantomSpec((32, 32), 1.0, 3, disks))
    for i in range(32):
        for j in range(32):
            want = np.zeros(3)
            for d in disks:
                if (i - d.center[0]) ** 2 + (j - d.center[1]) ** 2 <= d.radius**2:
                    want = np.zeros(3)
                    want[d.material] = d.fraction
                    if d.balance is not None:
                        want[d.balance] += 1 - d.fraction
            np.testing.assert_array_equal(f[i, j], want)
    assert np.all(f >= 0) and np.all(f <= 1)
    np.testing.assert_array_equal(f.sum(axis=2) + air, 1.0)


def test_phantom_bad_fraction():
    with pytest.raises(ValueError):
        make_phantom(PhantomSpec((8, 8), 1.0, 1, [Disk((4, 4), 2, 0, 1.5)]))


def test_attenuation_matrix():
    t = load_attenuation_table()
    B = build_attenuation_matrix_true(t, BINS, ["water", "aluminum", "iodine"],
                                      {"water": 1.0, "aluminum": 2.7, "iodine": 0.02})
    assert B.shape == (4, 3)
    assert np.all(B > 0)
    assert np.all(np.diff(B[:, :2], axis=0) < 0)
    for n, e in enumerate(BINS.e_eff):
        assert B[n, 1] == attenuation_at(t, "aluminum", e) * 2.7
    one = SpectrumBins((20,), (40,), (30,), (1.0,))
    b1 = build_attenuation_matrix_true(t, one, ["water"], {"water": 2.0})
    assert b1.shape == (1, 1) and b1[0, 0] == 2.0 * attenuation_at(t, "water", 30)
    with pytest.raises(ValueError):
        build_attenuation_matrix_true(t, one, ["unobtainium"], {"unobtainium": 1})


def test_identity_table():
    bins = SpectrumBins((20, 40), (40, 60), (30, 50), (1.0, 1.0))
    tiny = 1e-30
    t = MassAttenuationTable({"a": ([20, 30, 50, 60], [tiny, 1.0, tiny, tiny]),
                              "b": ([20, 30, 50, 60], [tiny, tiny, 1.0, tiny])})
    B = build_attenuation_matrix_true(t, bins, ["a", "b"], {"a": 1, "b": 1})
    np.testing.assert_allclose(B, np.eye(2), atol=1e-25)


def test_air_counts_equal_i0():
    f = np.zeros(GEOM.shape + (2,))
    c = synthesize_counts(f, np.ones((4, 2)), GEOM, BINS)
    np.testing.assert_array_equal(c.y, 1e4)


def test_single_ray_square():
    g = Geometry(n_angles=1, n_detectors=64, detector_spacing=1.0, shape=(32, 32), pixel_size=1.0)
    f = np.zeros((32, 32, 1))
    f[8:24, :, 0] = 1.0  # full-width slab; vertical rays cross 16 pixels
    B = np.array([[0.2], [0.1], [0.05], [0.02]])
    c = synthesize_counts(f, B, g, BINS)
    # theta = 0: ray along y at x = t; t = 0.5 hits pixel-column centers between 15 and 16
    np.testing.assert_allclose(c.y[0, 32, :], 1e4 * np.exp(-B[:, 0] * 16.0), rtol=1e-10)


def test_noise_deterministic():
    f, _ = make_phantom(PhantomSpec((32, 32), 1.0, 1, [Disk((16, 16), 10, 0)]))
    B = np.array([[0.2], [0.1], [0.05], [0.02]])
    a = synthesize_counts(f, B, GEOM, BINS, noise=True, seed=3)
    b = synthesize_counts(f, B, GEOM, BINS, noise=True, seed=3)
    assert a.y.tobytes() == b.y.tobytes()
    assert np.all(a.y >= 0) and np.all(a.y == np.round(a.y))
    c = synthesize_counts(f, B, GEOM, BINS, noise=True, seed=4)
    assert not np.array_equal(a.y, c.y)


def test_poisson_mean():
    mean = np.full((2, 3, 1), 50.0)
    mean[1, 2, 0] = 5.0
    draws = np.stack([sample_poisson(mean, s) for s in range(2000)])
    emp = draws.mean(axis=0)
    # 3 sigma of the sample mean
    assert np.all(np.abs(emp - mean) <= 3 * np.sqrt(mean / 2000))


def test_log_normalize():
    y = np.array([[[1e4, 0.0, 1e4 * np.exp(-2)]]])
    bins = SpectrumBins((20, 35, 50), (35, 50, 70), (30, 40, 60), (1e4,) * 3)
    p = log_normalize(CountData(y, GEOM, None), bins)
    assert p[0, 0, 0] == 0
    assert p[0, 0, 1] == pytest.approx(-np.log(0.5 / 1e4))
    assert p[0, 0, 2] == pytest.approx(2.0)
    with pytest.raises(ValueError):
        log_normalize(CountData(-y, GEOM, None), bins)


def test_noise_free_selfconsistency():
    disks = [Disk((16, 16), 12, 0), Disk((16, 10), 3, 1), Disk((16, 22), 3, 2, 0.5, 0)]
    f, _ = make_phantom(PhantomSpec((32, 32), 1.0, 3, disks))
    B = np.array([[0.3, 1.2, 0.2], [0.25, 0.8, 0.4], [0.2, 0.5, 0.15], [0.18, 0.4, 0.1]]) * 0.1
    p = log_normalize(synthesize_counts(f, B, GEOM, BINS), BINS)
    x = spectral_images(f, B)
    ref = np.stack([forward_project(x[:, :, n], GEOM) for n in range(4)], axis=-1)
    np.testing.assert_allclose(p, ref, atol=1e-10)
    np.testing.assert_allclose(line_integrals(f, B, GEOM), ref, atol=1e-10)


def test_geometry_mismatch():
    with pytest.raises(ValueError):
        synthesize_counts(np.zeros((8, 8, 1)), np.ones((4, 1)), GEOM, BINS)
    with pytest.raises(ValueError):
        synthesize_counts(np.zeros((32, 32, 2)), np.ones((4, 1)), GEOM, BINS)
