import io
import json
import math

import numpy as np
import pytest
from scipy.stats import kstest

from sketchloc.beam_model import BeamModelParams, beam_density
from sketchloc.learning import (
    CalibrationRow, CalibrationSample, best_scale_grid, calibrate, fit_beam_params,
    mixture_log_likelihood, read_calibration_csv, rows_to_samples, sample_ranges,
    write_calibration_csv,
)
from sketchloc.raster_map import SketchMap
from sketchloc.se2 import Pose2D

PAPER = BeamModelParams()
GRID = np.round(np.arange(0.05, 0.2 + 1e-9, 0.005), 6)


def px_samples(s_true, n, rng, sigma=0.02):
    p = BeamModelParams(sigma_z=sigma, w_hit=1, w_dyn=0, w_max=0, w_rnd=0)
    zh_px = rng.uniform(10, 150, n)
    z = sample_ranges(zh_px * s_true, p, rng)
    return [CalibrationSample(float(a), float(b)) for a, b in zip(z, zh_px)]


class TestScaleGrid:
    p0 = BeamModelParams(sigma_z=0.02, w_hit=0.9, w_dyn=0.05, w_max=0.04, w_rnd=0.01)

    def test_recovers_true_scale(self, rng):
        assert best_scale_grid(px_samples(0.1, 50, rng), GRID, self.p0) == pytest.approx(0.1)

    def test_single_value(self):
        assert best_scale_grid([CalibrationSample(3.0, 10.0)], [0.7], self.p0) == 0.7

    def test_equivariance(self, rng):
        smp = px_samples(0.12, 40, rng)
        doubled = [CalibrationSample(2 * s.z, s.z_hat) for s in smp]
        p2 = BeamModelParams(sigma_z=0.04, lam=0.05, delta=0.02, z_max=40,
                             w_hit=0.9, w_dyn=0.05, w_max=0.04, w_rnd=0.01)
        a = best_scale_grid(smp, GRID, self.p0)
        b = best_scale_grid(doubled, 2 * GRID, p2)
        assert list(GRID).index(a) == list(2 * GRID).index(b)

    def test_weight_scaling_invariance(self, rng):
        smp = px_samples(0.08, 40, rng)
        p3 = BeamModelParams(sigma_z=0.02, w_hit=9, w_dyn=0.5, w_max=0.4, w_rnd=0.1)
        assert best_scale_grid(smp, GRID, self.p0) == best_scale_grid(smp, GRID, p3)

    def test_ties_go_small(self):
        # ranges beyond every cast are explained only by the uniform term
        p = BeamModelParams(w_hit=0, w_dyn=0, w_max=1, w_rnd=0, scale_jacobian=True)
        assert best_scale_grid([CalibrationSample(1.0, 5.0)], [0.3, 0.1, 0.2], p) == 0.1

    def test_empty(self):
        with pytest.raises(ValueError):
            best_scale_grid([], GRID, self.p0)
        with pytest.raises(ValueError):
            best_scale_grid([CalibrationSample(1, 1)], [], self.p0)


class TestSampler:
    def test_matches_density(self, rng):
        p = BeamModelParams(sigma_z=0.5, w_hit=0.5, w_dyn=0.3, w_max=0.2, w_rnd=0.0)
        z = sample_ranges(np.full(20_000, 8.0), p, rng)
        grid = np.linspace(0, p.z_max + p.delta, 40001)
        cdf = np.cumsum(beam_density(grid, 8.0, p)) * (grid[1] - grid[0])
        assert kstest(z, lambda v: np.interp(v, grid, cdf / cdf[-1])).pvalue > 0.01


class TestEM:
    def test_round_trip_paper_params(self, rng):
        zh = rng.uniform(0.5, 19.5, 10_000)
        z = sample_ranges(zh, PAPER, rng)
        init = BeamModelParams(sigma_z=0.3, lam=0.3, w_hit=0.25, w_dyn=0.25, w_max=0.25, w_rnd=0.25)
        rep = fit_beam_params(list(zip(z, zh)), init)
        p = rep.params
        assert np.all(np.abs(p.weights - PAPER.weights) <= 0.05)
        assert p.sigma_z == pytest.approx(0.1, rel=0.2)
        assert p.lam == pytest.approx(0.1, rel=0.2)
        assert np.all(np.diff(rep.log_likelihoods) >= -1e-9 * np.abs(rep.log_likelihoods[:-1]))
        assert p.weights.sum() == pytest.approx(1.0, abs=1e-9)

    def test_pure_hit_data(self, rng):
        zh = rng.uniform(1, 10, 500)
        rep = fit_beam_params(list(zip(zh, zh)), BeamModelParams())
        assert rep.params.w_hit > 0.99
        assert rep.params.sigma_z == pytest.approx(1e-4)
        assert "rnd" in rep.floored_components

    def test_warns_on_small_input(self, rng):
        zh = rng.uniform(1, 10, 20)
        with pytest.warns(RuntimeWarning):
            rep = fit_beam_params(list(zip(zh + 0.05, zh)), BeamModelParams())
        assert rep.warnings

    def test_likelihood_improves_over_init(self, rng):
        zh = rng.uniform(1, 19, 2000)
        z = sample_ranges(zh, BeamModelParams(sigma_z=0.4, w_hit=0.6, w_dyn=0.3, w_max=0.1, w_rnd=0), rng)
        rep = fit_beam_params(list(zip(z, zh)), PAPER)
        assert rep.log_likelihoods[-1] >= mixture_log_likelihood(z, zh, PAPER)
        d = json.loads(rep.to_json())
        assert d["weights_sum"] == pytest.approx(1.0)


class TestCsvAndCalibrate:
    def test_csv_round_trip(self):
        rows = [CalibrationRow("a", Pose2D(1.5, 2.0, 0.1), -0.5, 3.25),
                CalibrationRow("b", Pose2D(4.0, 5.0, -1.0), 0.25, 7.0)]
        text = write_calibration_csv(rows)
        assert text.splitlines()[0] == "sketch_id,pose_x,pose_y,pose_theta,beam_angle,z"
        back = read_calibration_csv(io.StringIO(text))
        assert [(r.sketch_id, r.pose, r.beam_angle, r.z) for r in back] == \
               [(r.sketch_id, r.pose, r.beam_angle, r.z) for r in rows]

    def test_missing_column(self):
        with pytest.raises(ValueError):
            read_calibration_csv(io.StringIO("sketch_id,z\na,1\n"))

    def test_calibrate_end_to_end(self, rng):
        occ = np.zeros((200, 300), bool)
        occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = True
        occ[50:120, 200] = True
        m = SketchMap.from_occupancy(occ)
        truth = BeamModelParams(sigma_z=0.05, w_hit=0.8, w_dyn=0.1, w_max=0.1, w_rnd=0.0)
        rows = []
        for pose in (Pose2D(60, 60, 0.0), Pose2D(150, 150, 1.0)):
            for a in np.linspace(-math.pi, math.pi, 360, endpoint=False):
                rows.append(CalibrationRow("k", pose, float(a), 0.0))
        samples = rows_to_samples(rows, {"k": m})
        zh_m = np.minimum(np.array([s.z_hat for s in samples]) * 0.06, truth.z_max)
        z = sample_ranges(zh_m, truth, rng)
        samples = [CalibrationSample(float(v), s.z_hat, s.pose, s.sketch_id, s.beam_angle)
                   for v, s in zip(z, samples)]
        init = BeamModelParams(sigma_z=0.05, w_hit=0.7, w_dyn=0.1, w_max=0.1, w_rnd=0.1)
        res = calibrate(samples, GRID, init)
        assert all(abs(v - 0.06) < 1e-9 for v in res.scales.values())
        assert res.report.params.w_hit == pytest.approx(0.8, abs=0.05)
