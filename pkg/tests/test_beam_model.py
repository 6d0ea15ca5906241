import math

import numpy as np
import pytest
from scipy.integrate import quad

import sketchloc.beam_model as bm
from sketchloc.beam_model import (
    PAPER_WEIGHTS, BeamModelParams, RangeScan, beam_density, expected_ranges,
    scan_log_likelihood, scan_log_likelihoods, subsample_indices,
)
from sketchloc.raster_map import SketchMap
from sketchloc.se2 import Pose2D


def integral(p: BeamModelParams, z_hat: float) -> float:
    upper = p.z_max + p.delta
    pts = sorted({x for x in (z_hat, p.z_max - p.delta, p.z_max) if 0 < x < upper})
    val, _ = quad(lambda z: beam_density(z, z_hat, p), 0, upper, points=pts or None, limit=500)
    return val


def random_params(rng) -> BeamModelParams:
    z_max = rng.uniform(2, 40)
    return BeamModelParams(
        sigma_z=rng.uniform(0.01, 2), lam=rng.uniform(0.01, 3), delta=rng.uniform(0.001, 0.1 * z_max),
        z_max=z_max, w_hit=rng.uniform(), w_dyn=rng.uniform(), w_max=rng.uniform(), w_rnd=rng.uniform())


class TestParams:
    def test_paper_weights_normalized(self):
        p = BeamModelParams()
        assert p.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert p.weights == pytest.approx(np.array(PAPER_WEIGHTS) / 1.205)
        assert p.raw_weights == PAPER_WEIGHTS

    def test_invalid(self):
        with pytest.raises(ValueError):
            BeamModelParams(w_hit=-1)
        with pytest.raises(ValueError):
            BeamModelParams(delta=30)
        with pytest.raises(ValueError):
            BeamModelParams(sigma_z=0)


class TestDensity:
    def test_pure_uniform(self):
        p = BeamModelParams(w_hit=0, w_dyn=0, w_max=1, w_rnd=0)
        for z in (0.0, 3.3, 19.99, 20.0):
            assert beam_density(z, 7.0, p) == pytest.approx(1 / 20)

    def test_texp_support(self):
        p = BeamModelParams(w_hit=0, w_dyn=1, w_max=0, w_rnd=0, lam=0.1)
        assert beam_density(12.0, 10.0, p) == 0.0
        assert beam_density(5.0, 10.0, p) == pytest.approx(0.1 * math.exp(-0.5) / (1 - math.exp(-1)))

    def test_zero_expected_range_disables_texp(self):
        p = BeamModelParams(w_hit=0, w_dyn=1, w_max=0, w_rnd=0)
        assert beam_density(0.0, 0.0, p) == 0.0

    def test_paper_quadrature(self):
        p = BeamModelParams()
        for z_hat in (0.5, 5.0, 12.0, 19.95):
            assert integral(p, z_hat) == pytest.approx(1.0, abs=0.02)

    def test_random_quadrature(self, rng):
        for _ in range(30):
            p = random_params(rng)
            z_hat = rng.uniform(0, p.z_max)
            assert integral(p, z_hat) == pytest.approx(1.0, abs=0.02)

    def test_non_negative(self, rng):
        p = random_params(rng)
        z = rng.uniform(-5, 50, 5000)
        assert np.all(beam_density(z, rng.uniform(0, 20, 5000), p) >= 0)

    def test_hit_peak(self):
        p = BeamModelParams(w_hit=1, w_dyn=0, w_max=0, w_rnd=0, sigma_z=0.2)
        assert beam_density(10.0, 10.0, p) == pytest.approx(1 / (0.2 * math.sqrt(2 * math.pi)), rel=1e-9)


def _room():
    occ = np.zeros((100, 120), bool)
    occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = True
    occ[30:60, 70] = True
    return SketchMap.from_occupancy(occ)


class TestScanLikelihood:
    def test_empty_map_all_max(self):
        m = SketchMap.from_occupancy(np.zeros((400, 400), bool))
        p = BeamModelParams()
        s = 0.1
        scan = RangeScan(np.full(180, p.z_max), np.linspace(-math.pi / 2, math.pi / 2, 180))
        got = scan_log_likelihood(scan, Pose2D(200, 200, 0.3), s, m, p)
        pp = p.in_pixels(s)
        want = p.beams_per_scan * math.log(beam_density(p.z_max / s, p.z_max / s, pp))
        assert got == pytest.approx(want, rel=1e-12)

    def test_round_trip_beats_perturbed_pose(self):
        m = _room()
        p = BeamModelParams(w_hit=0.7, w_dyn=0.2, w_max=0.05, w_rnd=0.05, sigma_z=0.5)
        angles = np.linspace(-math.pi / 2, math.pi / 2, 180)
        pose = Pose2D(40, 45, 0.2)
        scan = RangeScan(expected_ranges(pose, 1.0, angles, m, p.z_max), angles)
        ll_true = scan_log_likelihood(scan, pose, 1.0, m, p)
        ll_off = scan_log_likelihood(scan, Pose2D(40 + 5 * 0.5, 45, 0.2), 1.0, m, p)
        assert ll_true >= ll_off
        # every subsampled beam sits at the Gaussian peak
        idx = subsample_indices(180, 10)
        peak = beam_density(scan.ranges[idx], scan.ranges[idx], p)
        assert ll_true == pytest.approx(np.log(peak).sum())

    def test_ten_raycasts(self, monkeypatch):
        calls = []
        real = bm.raycast_many

        def spy(m, ox, oy, angles, max_ranges):
            calls.append(np.broadcast(ox, angles).size)
            return real(m, ox, oy, angles, max_ranges)

        monkeypatch.setattr(bm, "raycast_many", spy)
        scan = RangeScan(np.full(360, 3.0), np.linspace(-math.pi, math.pi, 360, endpoint=False))
        scan_log_likelihood(scan, Pose2D(50, 50, 0), 0.1, _room(), BeamModelParams())
        assert calls == [10]

    def test_subsampling_deterministic(self):
        a = subsample_indices(181, 10)
        assert np.array_equal(a, subsample_indices(181, 10))
        assert len(np.unique(a)) == 10 and np.all(np.diff(a) > 0)
        assert np.array_equal(subsample_indices(5, 10), np.arange(5))

    def test_scale_equivariance_of_argmax(self):
        m = _room()
        p = BeamModelParams(w_hit=0.7, w_dyn=0.2, w_max=0.05, w_rnd=0.05, sigma_z=0.1, z_max=8)
        angles = np.linspace(-math.pi / 2, math.pi / 2, 90)
        s = 0.05
        scan = RangeScan(expected_ranges(Pose2D(50, 40, 0.4), s, angles, m, p.z_max), angles)
        gx, gy = np.meshgrid(np.arange(30, 70, 2.0), np.arange(20, 60, 2.0))
        gx, gy = gx.ravel(), gy.ravel()
        th = np.full(gx.size, 0.4)
        c = 1.7
        p2 = BeamModelParams(w_hit=0.7, w_dyn=0.2, w_max=0.05, w_rnd=0.05, sigma_z=0.1 * c,
                             lam=0.1 / c, delta=0.01 * c, z_max=8 * c)
        a = scan_log_likelihoods(scan, gx, gy, th, s, m, p)
        b = scan_log_likelihoods(scan.scaled(c), gx, gy, th, s * c, m, p2)
        assert np.argmax(a) == np.argmax(b)
        # differences are a common constant (the density unit)
        assert np.ptp(a - b) < 1e-6

    def test_out_of_map_floor(self):
        m = _room()
        p = BeamModelParams()
        scan = RangeScan(np.full(10, 3.0), np.zeros(10))
        ll = scan_log_likelihoods(scan, np.array([-5.0, 50.0]), np.array([50.0, 50.0]),
                                  np.zeros(2), 0.1, m, p)
        assert ll[0] == p.out_of_map_floor
        assert np.isfinite(ll).all() and ll[1] > ll[0]

    def test_jacobian_term(self):
        m = _room()
        scan = RangeScan(np.full(10, 2.0), np.linspace(-1, 1, 10))
        a = BeamModelParams(sigma_z=0.3)
        b = BeamModelParams(sigma_z=0.3, scale_jacobian=True)
        la = scan_log_likelihood(scan, Pose2D(50, 50, 0), 0.05, m, a)
        lb = scan_log_likelihood(scan, Pose2D(50, 50, 0), 0.05, m, b)
        assert lb - la == pytest.approx(-10 * math.log(0.05))
