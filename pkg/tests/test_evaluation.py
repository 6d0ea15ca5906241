import csv
import io
import json
import math

import numpy as np
import pytest

from sketchloc.evaluation import (
    RoomRegions, RunResult, locate_room, ratio_difference, ratio_vs_success, results_to_json,
    success_table,
)
from sketchloc.raster_map import MapMetadata, SketchMap
from sketchloc.se2 import Pose2D

REGIONS = RoomRegions({"3": (0, 0, 50, 50), "7": (25, 25, 100, 100), "10": (200, 0, 300, 50)})


def box_sketch(w, h, canvas=(400, 500)):
    occ = np.zeros(canvas, bool)
    occ[5, 5:5 + w] = occ[5 + h - 1, 5:5 + w] = True
    occ[5:5 + h, 5] = occ[5:5 + h, 5 + w - 1] = True
    return SketchMap.from_occupancy(occ)


def runs(route, ok, n=10, sketch="s"):
    out = []
    for i in range(n):
        pose = Pose2D(10, 10, 0) if i < ok else Pose2D(150, 150, 0)
        out.append(RunResult.score(route, sketch, i, "3", pose, 0.05, REGIONS))
    return out


class TestLocate:
    def test_center(self):
        assert locate_room(Pose2D(250, 25, 0), REGIONS) == "10"

    def test_outside(self):
        assert locate_room(Pose2D(150, 150, 0), REGIONS) is None

    def test_overlap_lowest_id(self):
        assert locate_room(Pose2D(40, 40, 0), REGIONS) == "3"

    def test_numeric_ordering(self):
        r = RoomRegions({"10": (0, 0, 10, 10), "9": (0, 0, 10, 10)})
        assert locate_room(Pose2D(5, 5, 0), r) == "9"

    def test_from_metadata_and_bounds(self):
        meta = MapMetadata(rooms={"1": (0, 0, 10, 10)})
        r = RoomRegions.from_metadata(meta)
        r.validate_for(SketchMap.from_occupancy(np.zeros((20, 20), bool)))
        with pytest.raises(ValueError):
            r.validate_for(SketchMap.from_occupancy(np.zeros((5, 5), bool)))

    def test_inverted_rect(self):
        with pytest.raises(ValueError):
            RoomRegions({"1": (10, 0, 0, 10)})


class TestSuccessTable:
    def test_all_successful(self):
        res = [r for k in range(10) for r in runs(f"R{k}", 10)]
        assert success_table(res).total("s") == 100.0

    def test_paper_layout(self):
        oks = [10, 10, 7, 10, 8, 10, 10, 8, 10, 10]
        res = [r for k, ok in enumerate(oks) for r in runs(f"R{k}", ok)]
        tab = success_table(res)
        assert tab.total("s") == 93.0
        assert tab.percent("R2", "s") == 70.0

    def test_zero(self):
        assert success_table(runs("R", 0)).total("s") == 0.0

    def test_run_weighted_total(self):
        tab = success_table(runs("a", 1, n=1) + runs("b", 0, n=3))
        assert tab.total("s") == 25.0

    def test_csv_shape(self):
        res = runs("A", 10, sketch="s1") + runs("A", 5, sketch="s2") + runs("B", 2, sketch="s1")
        rows = list(csv.reader(io.StringIO(success_table(res).to_csv())))
        assert rows[0] == ["route", "s1", "s2"]
        assert rows[1] == ["A", "100", "50"]
        assert rows[2] == ["B", "20", ""]
        assert rows[3][0] == "total"

    def test_idempotent_recompute(self):
        res = runs("A", 4) + runs("B", 9)
        again = [RunResult.from_dict(r.to_dict()) for r in res]
        assert success_table(again).to_csv() == success_table(res).to_csv()
        assert 0 <= success_table(res).overall() <= 100

    def test_json(self):
        d = json.loads(results_to_json(runs("A", 3), seed=1))
        assert d["seed"] == 1 and sum(r["success"] for r in d["runs"]) == 3

    def test_success_iff_in_target(self):
        r = RunResult.score("x", "s", 0, "7", Pose2D(40, 40, 0), 0.1, REGIONS)
        assert r.success and r.located_room == "3"


class TestRatio:
    def test_identical(self):
        a = box_sketch(200, 100)
        assert ratio_difference(a, a) == 0.0

    def test_constructed_pair(self):
        assert ratio_difference(box_sketch(200, 100), box_sketch(120, 100)) == pytest.approx(0.8)

    def test_series_sorted_and_correlated(self):
        ref = box_sketch(200, 100)
        entries = [(box_sketch(w, 100), ref, succ) for w, succ in
                   [(300, 20.0), (200, 100.0), (240, 80.0), (260, 50.0), (210, 90.0)]]
        s = ratio_vs_success(entries, ["e", "a", "c", "d", "b"])
        assert s.names == ["a", "b", "c", "d", "e"]
        assert s.ratio_difference == sorted(s.ratio_difference)
        assert s.spearman == pytest.approx(-1.0)
        assert s.to_csv().splitlines()[0] == "sketch,ratio_difference,success_percent"

    def test_needs_two(self):
        with pytest.raises(ValueError):
            ratio_vs_success([(box_sketch(10, 10), box_sketch(10, 10), 1.0)])

    def test_constant_success(self):
        ref = box_sketch(100, 100)
        s = ratio_vs_success([(box_sketch(100, 100), ref, 50.0), (box_sketch(150, 100), ref, 50.0)])
        assert math.isnan(s.spearman)
