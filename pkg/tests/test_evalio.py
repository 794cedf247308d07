import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hbox2rbox import evalio, synth
from hbox2rbox.errors import InvalidArgumentError, ParseError
from hbox2rbox.geom import HBox, RBox, mcr, rbox_corners

from conftest import random_rbox_array


def random_records(rng, n):
    classes = ["plane", "ship", "storage-tank", "cross"]
    return [
        evalio.RBoxRecord(classes[i % len(classes)], RBox(*row), int(rng.integers(0, 2)))
        for i, row in enumerate(random_rbox_array(rng, n, center=500, spread=400, size=(2, 200)))
    ]


def pr_example():
    """Two ground truths, three detections scored TP, FP, TP: AP = 1/2 * 1 + 1/2 * 2/3."""
    g1, g2 = RBox(10, 10, 8, 4, 0.2), RBox(40, 40, 8, 4, -0.3)
    preds = [
        evalio.DetectionRecord("a", g1, 0.9),
        evalio.DetectionRecord("a", RBox(80, 80, 8, 4, 0.0), 0.8),
        evalio.DetectionRecord("a", g2, 0.7),
    ]
    return preds, [("a", g1), ("a", g2)]


class TestCorners:
    def test_round_trip(self, rng):
        for row in random_rbox_array(rng, 200):
            rb = RBox(*row)
            back, residual = evalio.corners_to_rbox(evalio.rbox_to_corners(rb))
            assert residual < 1e-9
            np.testing.assert_allclose(rbox_corners(back)[np.argsort(rbox_corners(back)[:, 0])],
                                       rbox_corners(rb)[np.argsort(rbox_corners(rb)[:, 0])], atol=1e-9)

    def test_first_edge_runs_along_width(self):
        c = evalio.rbox_to_corners(RBox(0, 0, 10, 2, 0.0))
        np.testing.assert_allclose(c[0], [-5, -1])
        np.testing.assert_allclose(c[1], [5, -1])

    def test_non_rectangular_warns(self):
        quad = np.array([[0, 0], [10, 0], [20, 5], [0, 5]], float)
        with pytest.warns(evalio.NonRectangularWarning):
            _, residual = evalio.corners_to_rbox(quad)
        assert residual > 1.0

    def test_degenerate(self):
        with pytest.raises(InvalidArgumentError):
            evalio.corners_to_rbox(np.zeros((4, 2)))


class TestLines:
    def test_rbox_round_trip_bit_stable(self, rng):
        for rec in random_records(rng, 1000):
            line = evalio.format_rbox_line(evalio.rbox_to_corners(rec.rbox), rec.cls, rec.difficulty)
            parsed = evalio.parse_rbox_line(line)
            again = evalio.format_rbox_line(parsed.corners, parsed.cls, parsed.difficulty)
            assert again == line
            np.testing.assert_allclose(parsed.corners, evalio.rbox_to_corners(rec.rbox), atol=5e-7)

    def test_negative_zero_is_normalised(self):
        assert evalio.format_hbox_line(HBox.from_xyxy(-1e-9, 0, 1, 1), "a").startswith("0.000000 ")

    def test_hbox_line(self):
        hb, cls = evalio.parse_hbox_line("1 2 3 5 ship\n")
        assert cls == "ship" and hb.xyxy == (1, 2, 3, 5)
        assert evalio.format_hbox_line(hb, cls) == "1.000000 2.000000 3.000000 5.000000 ship\n"

    @pytest.mark.parametrize("line", ["1 2 3 ship", "1 2 0 5 ship", "1 x 3 5 ship", "1 2 nan 5 ship"])
    def test_hbox_line_errors(self, line):
        with pytest.raises(ParseError):
            evalio.parse_hbox_line(line, 7)

    def test_parse_error_carries_line_number(self):
        with pytest.raises(ParseError, match="7"):
            evalio.parse_hbox_line("1 2", 7)

    def test_detection_round_trip(self):
        det = evalio.DetectionRecord("plane", RBox(5, 6, 7, 3, 0.4), 0.25)
        back = evalio.parse_detection_line(evalio.format_detection_line(det))
        assert back.cls == "plane" and back.score == 0.25
        assert back.rbox.theta == pytest.approx(0.4, abs=1e-6)

    @pytest.mark.parametrize("kw", [dict(cls="two words"), dict(cls=""), dict(score=1.5), dict(score=math.nan)])
    def test_detection_validation(self, kw):
        args = dict(cls="a", rbox=RBox(0, 0, 1, 1), score=0.5) | kw
        with pytest.raises(InvalidArgumentError):
            evalio.DetectionRecord(**args)

    def test_files(self, tmp_path, rng):
        recs = random_records(rng, 20)
        path = tmp_path / "gt.txt"
        evalio.write_rbox_file(path, recs)
        back = evalio.read_rbox_file(path)
        assert [r.cls for r in back] == [r.cls for r in recs]
        for a, b in zip(back, recs):
            assert a.rbox.cx == pytest.approx(b.rbox.cx, abs=1e-6)
            assert a.rbox.w == pytest.approx(b.rbox.w, abs=1e-5)
        (tmp_path / "bad.txt").write_text("\n0 0 4 0 4 2 0 2 x 0\n1 2 3\n")
        with pytest.raises(ParseError, match="3"):
            evalio.read_rbox_file(tmp_path / "bad.txt")


class TestConvert:
    def test_chbox_contains_corners(self, rng):
        recs = random_records(rng, 200)
        for rec, out in zip(recs, evalio.convert_rbox_to_chbox(recs)):
            x1, y1, x2, y2 = out.hbox.xyxy
            c = rbox_corners(rec.rbox)
            assert np.all(c[:, 0] >= x1 - 1e-9) and np.all(c[:, 0] <= x2 + 1e-9)
            assert np.all(c[:, 1] >= y1 - 1e-9) and np.all(c[:, 1] <= y2 + 1e-9)
            assert out.cls == rec.cls

    def test_thbox_matches_synthetic_annotation(self):
        spec = synth.ShapeSpec("airplane_polygon", RBox(128, 128, 90, 70, 0.6))
        out = evalio.convert_rbox_to_thbox([evalio.RBoxRecord("airplane_polygon", spec.rbox)])
        assert out[0].hbox == synth.annotate(spec).t_hbox
        assert out[0].hbox.w < mcr(spec.rbox).w


class TestMetrics:
    def test_hand_computed_ap(self):
        assert evalio.average_precision([1, 0, 1], 2) == 5 / 6
        preds, gts = pr_example()
        report = evalio.ap50(preds, gts)
        assert report.ap["a"] == 5 / 6
        assert report.n_tp == 2

    def test_ap_edges(self):
        assert evalio.average_precision([], 3) == 0.0
        assert evalio.average_precision([1, 1], 2) == 1.0
        assert evalio.average_precision([0, 1], 1) == 0.5
        with pytest.raises(InvalidArgumentError):
            evalio.average_precision([1], 0)

    @settings(max_examples=50)
    @given(st.lists(st.floats(0.01, 0.99), min_size=3, max_size=3, unique=True))
    def test_monotone_score_rescaling(self, scores):
        preds, gts = pr_example()
        preds = [evalio.DetectionRecord(p.cls, p.rbox, s) for p, s in zip(preds, scores)]
        squashed = [evalio.DetectionRecord(p.cls, p.rbox, p.score**3) for p in preds]
        assert evalio.ap50(preds, gts).ap == evalio.ap50(squashed, gts).ap

    def test_duplicates_are_false_positives(self):
        g = RBox(0, 0, 10, 10, 0.0)
        preds = [evalio.DetectionRecord("a", g, 0.9), evalio.DetectionRecord("a", g, 0.8)]
        r = evalio.ap50(preds, [("a", g)])
        assert r.n_tp == 1 and r.ap["a"] == 1.0

    def test_subset_and_classes(self):
        g = RBox(0, 0, 10, 10, 0.0)
        gts = [("cross", g), ("disc", RBox(50, 50, 6, 6))]
        r = evalio.ap50([evalio.DetectionRecord("cross", g, 0.5)], gts)
        assert r.ap == {"cross": 1.0, "disc": 0.0}
        assert r.map50 == 0.5 and r.subset_map50 == 1.0
        assert "ap50[disc]: 0.000000" in r.format()
        assert r.to_dict()["ap50"] == {"cross": 1.0, "disc": 0.0}

    def test_invalid(self):
        with pytest.raises(InvalidArgumentError):
            evalio.ap50([], [])
        with pytest.raises(InvalidArgumentError):
            evalio.ap50([], [("a", RBox(0, 0, 1, 1))], iou_thresh=1.0)

    @given(st.floats(-3, 3), st.floats(-3, 3))
    def test_angle_error_symmetric_and_folded(self, a, b):
        ra, rb = RBox(0, 0, 2, 1, a), RBox(0, 0, 2, 1, b)
        e = evalio.angle_error(ra, rb)
        assert e == pytest.approx(evalio.angle_error(rb, ra), abs=1e-9)
        assert 0.0 <= e <= 45.0


class TestPgm:
    @pytest.mark.parametrize("maxval", [255, 65535])
    def test_round_trip(self, tmp_path, rng, maxval):
        img = rng.random((7, 11))
        evalio.write_pgm(tmp_path / "a.pgm", img, maxval)
        back = evalio.read_pgm(tmp_path / "a.pgm")
        assert back.shape == (7, 11)
        assert np.abs(back - img).max() <= 0.5 / maxval + 1e-12

    def test_comment_and_errors(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
        np.testing.assert_array_equal(evalio.read_pgm(tmp_path / "c.pgm"), [[0.0, 1.0]])
        (tmp_path / "t.pgm").write_bytes(b"P5\n2 2\n255\n\x00")
        with pytest.raises(ParseError):
            evalio.read_pgm(tmp_path / "t.pgm")
        (tmp_path / "m.pgm").write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(ParseError):
            evalio.read_pgm(tmp_path / "m.pgm")


def test_scene_directory_round_trip(tmp_path):
    scene = synth.generate_scene(5)
    evalio.write_scene(tmp_path, 0, scene)
    (loaded,) = evalio.load_scene_dir(tmp_path)
    assert np.abs(loaded.image - scene.image).max() <= 0.5 / 65535 + 1e-12
    assert [o.kind for o in loaded.objects] == [o.kind for o in scene.objects]
    for a, b in zip(synth.derive_annotations(loaded), synth.derive_annotations(scene)):
        assert a.t_hbox == b.t_hbox
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        thb = evalio.read_hbox_file(tmp_path / "scene_0000.thbox.txt")
    assert len(thb) == len(scene.objects)


class TestDocumentedExamples:
    def test_rbox_line_examples(self):
        parsed = evalio.parse_rbox_line("0 0 4 0 4 2 0 2 plane 0")
        assert parsed.cls == "plane" and parsed.difficulty == 0
        rb, _ = evalio.corners_to_rbox(parsed.corners)
        assert (rb.cx, rb.cy, rb.w, rb.h, rb.theta) == (2, 1, 4, 2, 0)
        with pytest.raises(ParseError):
            evalio.parse_rbox_line("0 0 4 0 4 2 0 2 plane")

    def test_known_box_round_trip(self):
        rb = RBox(2, 1, 4, 2, math.pi / 6)
        line = evalio.format_rbox_line(evalio.rbox_to_corners(rb), "plane")
        back, _ = evalio.corners_to_rbox(evalio.parse_rbox_line(line).corners)
        # Corners are stored at 6 decimals, so the recovered parameters agree to that precision.
        np.testing.assert_allclose(back.as_array(), rb.as_array(), atol=1e-6)

    def test_perturbed_corners_residual(self, rng):
        for row in random_rbox_array(rng, 100, size=(10, 60)):
            c = evalio.rbox_to_corners(RBox(*row)) + rng.uniform(-0.1, 0.1, (4, 2))
            _, residual = evalio.corners_to_rbox(c)
            assert residual <= 0.2

    def test_inverted_hbox(self):
        with pytest.raises(ParseError):
            evalio.parse_hbox_line("4 0 0 2 plane")
        hb, _ = evalio.parse_hbox_line("0 0 4 2 plane")
        assert (hb.cx, hb.cy, hb.w, hb.h) == (2, 1, 4, 2)

    def test_chbox_examples(self):
        out = evalio.convert_rbox_to_chbox([evalio.RBoxRecord("a", RBox(0, 0, 2, 2, math.pi / 4)),
                                            evalio.RBoxRecord("b", RBox(5, 5, 4, 2, 0.0))])
        assert out[0].hbox.w == pytest.approx(2 * math.sqrt(2))
        assert out[1].hbox.xyxy == (3, 4, 7, 6) and [o.cls for o in out] == ["a", "b"]

    def test_angle_error_examples(self):
        a = RBox(0, 0, 2, 1, 0.2)
        assert evalio.angle_error(a, a) == 0
        assert evalio.angle_error(RBox(0, 0, 2, 1, 0.2 + math.pi / 2), a) == pytest.approx(0, abs=1e-9)
        assert evalio.angle_error(RBox(0, 0, 2, 1, math.pi / 3), RBox(0, 0, 2, 1, 0)) == pytest.approx(30)

    def test_ap_examples(self):
        g = RBox(0, 0, 10, 10, 0.0)
        assert evalio.ap50([evalio.DetectionRecord("a", g, 0.5)], [("a", g)]).ap["a"] == 1.0
        # Shifted by 4.3 px: IoU = 5.7 / 14.3, just under 0.4.
        shifted = RBox(4.3, 0, 10, 10, 0.0)
        assert evalio.ap50([evalio.DetectionRecord("a", shifted, 0.5)], [("a", g)]).ap["a"] == 0.0
        assert evalio.ap50([], [("a", g)]).ap["a"] == 0.0

    def test_images_are_matched_separately(self):
        g = RBox(0, 0, 10, 10, 0.0)
        det = evalio.DetectionRecord("a", g, 0.9)
        # The second image's detection must not claim the first image's box.
        r = evalio.ap50_images([([det], [("a", g)]), ([evalio.DetectionRecord("a", g, 0.8)], [("a", RBox(50, 50, 4, 4))])])
        assert r.n_gt == 2 and r.n_tp == 1 and r.ap["a"] == 0.5
